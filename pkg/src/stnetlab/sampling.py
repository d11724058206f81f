"""Segment sampling and super-image construction.

A video of F frames is cut into T equal spans of length L = floor(F/T); one
snippet of N contiguous frames is read from each span (random offset in
train mode, centered in eval mode) and its frames are stacked along the
channel axis into a 3N-channel "super image". Short videos clamp offsets and
repeat the last frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .rng import RngStream
from .tensor import ShapeError


@dataclass
class FrameSequence:
    """frames: [F, 3, H, W] float32 values in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[1] != 3:
            raise ShapeError(
                f"FrameSequence expects [F,3,H,W], got {f.shape}")
        self.frames = f

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def hw(self) -> Tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]


@dataclass
class SuperImageBatch:
    """clips: [B, T, 3N, H, W] float32; labels: int64 [B]."""

    clips: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.clips = np.asarray(self.clips, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.clips.ndim != 5:
            raise ShapeError(
                f"SuperImageBatch clips must be [B,T,3N,H,W], got {self.clips.shape}")
        if self.labels.shape != (self.clips.shape[0],):
            raise ShapeError("labels must match batch size")


def sample_segments(F: int, T: int, N: int, mode: str,
                    rng: Optional[RngStream] = None) -> np.ndarray:
    """Start offsets of the T snippets, clamped into [0, F-1].

    With span length L = floor(F/T) >= N the offset inside span i is drawn
    uniformly from {0..L-N} (train) or centered at floor((L-N)/2) (eval).
    Degenerate inputs (L < N or F < T) clamp; the reader pads by repeating
    the last frame.
    """
    if F < 1 or T < 1 or N < 1:
        raise ShapeError(f"F, T, N must be positive, got {F}, {T}, {N}")
    if mode not in ("train", "eval"):
        raise ShapeError(f"mode must be train or eval, got {mode!r}")
    L = F // T
    offsets = np.empty(T, dtype=np.int64)
    slack = L - N
    for i in range(T):
        if mode == "train":
            u = int(rng.integers(0, slack + 1)) if slack > 0 else 0
        else:
            u = slack // 2  # floor; negative when L < N, clamped below
        offsets[i] = i * L + u
    return np.clip(offsets, 0, F - 1)


def build_super_image(seq: FrameSequence, offsets: Sequence[int],
                      N: int) -> np.ndarray:
    """Stack N contiguous frames per segment along channels -> [T, 3N, H, W].

    Frame j of segment i occupies channels 3j..3j+2; reads past the last
    frame repeat it.
    """
    frames = seq.frames
    F, _, H, W = frames.shape
    T = len(offsets)
    out = np.empty((T, 3 * N, H, W), dtype=np.float32)
    for i, off in enumerate(offsets):
        idx = np.minimum(int(off) + np.arange(N), F - 1)
        out[i] = frames[idx].reshape(3 * N, H, W)
    return out


def inflate_conv1_weights(w2d: np.ndarray, N: int) -> np.ndarray:
    """Replicate a [C,3,k,k] kernel across N frame slots, scaled by 1/N.

    On a super image whose N frames are identical the inflated kernel
    reproduces the 2-D convolution of a single frame exactly.
    """
    if N < 1:
        raise ShapeError(f"N must be >= 1, got {N}")
    w2d = np.asarray(w2d)
    if w2d.ndim != 4 or w2d.shape[1] != 3:
        raise ShapeError(f"expected [C,3,k,k] weights, got {w2d.shape}")
    return np.tile(w2d / N, (1, N, 1, 1))


def make_batch(items: List[Tuple[FrameSequence, int]], T: int, N: int,
               mode: str, rng: Optional[RngStream] = None,
               normalize: Optional[Tuple[np.ndarray, np.ndarray]] = None
               ) -> SuperImageBatch:
    """Assemble clips for a list of (sequence, label) pairs.

    Train-mode offsets come from per-sample child streams, so the result is
    independent of any loader parallelism. `normalize` is an optional
    per-channel (mean, std) pair applied to the raw frames; default off.
    """
    clips = []
    labels = []
    for i, (seq, label) in enumerate(items):
        frames = seq.frames
        if normalize is not None:
            mean, std = normalize
            frames = (frames - mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1)
            seq = FrameSequence(frames)
        r = rng.spawn(i) if rng is not None else None
        offs = sample_segments(seq.num_frames, T, N, mode, r)
        clips.append(build_super_image(seq, offs, N))
        labels.append(label)
    return SuperImageBatch(np.stack(clips), np.asarray(labels, dtype=np.int64))
