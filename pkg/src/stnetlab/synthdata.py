"""Seeded synthetic tasks.

TemporalOrderTask: every class shows the same set of frames, in a different
chunk order. The frame multiset (and, when segments tile the chunks, the
segment multiset) is identical across classes, so any segment-order-invariant
classifier is stuck at chance while an order-aware model can reach 100%.

MultimodalXorTask: each modality carries one latent bit; the label is the XOR
of all bits, so no single modality (nor any proper subset... the bits are
independent) can decode the label from its bit alone. A weak "hint" channel,
present on a random subset of samples per modality, gives every single
modality a little skill (well under the 60% probe gate) so that score
ensembling has something to average, mirroring how real per-modality models
are weak-but-above-chance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .fusion import ModalityBundle
from .rng import RngStream
from .sampling import FrameSequence
from .serialize import read_bundle, read_clip, write_bundle, write_clip


# ---------------------------------------------------------------------------
# temporal-order task
# ---------------------------------------------------------------------------

@dataclass
class TemporalOrderCfg:
    num_classes: int = 4
    num_frames: int = 35
    height: int = 32
    width: int = 32
    noise: float = 0.05
    chunks: int = 7
    n_train: int = 400
    n_test: int = 200

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.num_frames < self.num_classes:
            raise ValueError("need F >= K")
        if self.num_frames % self.chunks != 0:
            raise ValueError(
                f"num_frames ({self.num_frames}) must be divisible by "
                f"chunks ({self.chunks})")


def base_frames(cfg: TemporalOrderCfg) -> np.ndarray:
    """[F, 3, H, W] canvas; the bar's column and brightness encode the step.

    Channel 0 holds the bar mask, channel 1 the bar scaled by a brightness
    ramp (survives global average pooling), channel 2 a fixed horizontal
    gradient shared by every frame.
    """
    F, H, W = cfg.num_frames, cfg.height, cfg.width
    bar_w = max(2, W // 12)
    frames = np.zeros((F, 3, H, W), dtype=np.float32)
    gradient = np.tile(np.linspace(0.0, 1.0, W, dtype=np.float32), (H, 1))
    for t in range(F):
        c = round(t * (W - bar_w) / max(1, F - 1))
        ramp = 0.2 + 0.8 * t / max(1, F - 1)
        frames[t, 0, :, c:c + bar_w] = 1.0
        frames[t, 1, :, c:c + bar_w] = ramp
        frames[t, 2] = gradient
    return frames


def class_permutations(cfg: TemporalOrderCfg, rng: RngStream) -> List[np.ndarray]:
    """K distinct chunk orders; the first is always the identity."""
    c = cfg.chunks
    total = math.factorial(c)
    if cfg.num_classes > total:
        raise ValueError(
            f"cannot build {cfg.num_classes} classes from {c} chunks: only "
            f"{total} distinct permutations exist")
    if total <= 10_000:
        pool = list(permutations(range(c)))
        ident = pool.index(tuple(range(c)))
        rest = [pool[i] for i in range(len(pool)) if i != ident]
        picks = rng.choice(len(rest), size=cfg.num_classes - 1, replace=False)
        chosen = [tuple(range(c))] + [rest[int(i)] for i in np.sort(picks)]
    else:
        chosen = [tuple(range(c))]
        seen = {chosen[0]}
        i = 0
        while len(chosen) < cfg.num_classes:
            perm = tuple(int(v) for v in rng.spawn(i).permutation(c))
            i += 1
            if perm not in seen:
                seen.add(perm)
                chosen.append(perm)
    return [np.asarray(p, dtype=np.int64) for p in chosen]


def _order_sample(base: np.ndarray, perm: np.ndarray, chunk_len: int,
                  noise: float, rng: RngStream) -> FrameSequence:
    chunks = base.reshape(-1, chunk_len, *base.shape[1:])
    frames = chunks[perm].reshape(-1, *base.shape[1:])
    if noise > 0:
        frames = frames + rng.normal(0.0, noise, size=frames.shape)
    return FrameSequence(np.clip(frames, 0.0, 1.0).astype(np.float32))


def gen_temporal_order(cfg: TemporalOrderCfg, seed: int):
    """Deterministic class-balanced (train, test) lists of (FrameSequence, y).

    Noise streams for the two splits are disjoint; the noiseless content of a
    sample depends only on its class.
    """
    root = RngStream(seed, stream=101)
    base = base_frames(cfg)
    perms = class_permutations(cfg, root.spawn(0))
    chunk_len = cfg.num_frames // cfg.chunks
    out = []
    for split_id, n in ((1, cfg.n_train), (2, cfg.n_test)):
        split_rng = root.spawn(split_id)
        items = []
        for i in range(n):
            label = i % cfg.num_classes
            seq = _order_sample(base, perms[label], chunk_len, cfg.noise,
                                split_rng.spawn(i))
            items.append((seq, label))
        out.append(items)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# multimodal XOR task
# ---------------------------------------------------------------------------

@dataclass
class MultimodalXorCfg:
    dims: Dict[str, int] = field(default_factory=lambda: {
        "rgb": 32, "flow_a": 32, "flow_b": 32, "audio": 16})
    t_min: int = 8
    t_max: int = 16
    n_train: int = 512
    n_test: int = 1024
    noise: float = 0.25
    bit_scale: float = 1.0
    hint_scale: float = 1.0
    hint_prob: float = 0.25
    hint_correct: float = 0.66
    probe_limit: float = 0.60
    max_attempts: int = 5

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ValueError("need at least 2 modalities")
        for m, d in self.dims.items():
            if d < 2:
                raise ValueError(f"modality {m!r} needs dim >= 2, got {d}")


def _directions(cfg: MultimodalXorCfg, rng: RngStream):
    """Per-modality unit directions: bit pattern on the first half of the
    feature dims, hint pattern on the second half."""
    dirs = {}
    for i, m in enumerate(sorted(cfg.dims)):
        d = cfg.dims[m]
        r = rng.spawn(i)
        u = np.zeros(d)
        v = np.zeros(d)
        half = d // 2
        u[:half] = r.normal(size=half)
        v[half:] = r.normal(size=d - half)
        dirs[m] = (u / np.linalg.norm(u), v / np.linalg.norm(v))
    return dirs


def _xor_sample(cfg: MultimodalXorCfg, dirs, rng: RngStream):
    mods = sorted(cfg.dims)
    bits = {m: int(rng.integers(0, 2)) for m in mods}
    label = 0
    for m in mods:
        label ^= bits[m]
    seqs = {}
    for m in mods:
        d = cfg.dims[m]
        t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
        u, v = dirs[m]
        seq = rng.normal(0.0, cfg.noise, size=(t, d))
        seq += (2 * bits[m] - 1) * cfg.bit_scale * u
        if rng.uniform() < cfg.hint_prob:
            shown = label if rng.uniform() < cfg.hint_correct else 1 - label
            seq += (2 * shown - 1) * cfg.hint_scale * v
        seqs[m] = seq.astype(np.float32)
    return ModalityBundle(seqs), label


def _probe_features(bundle: ModalityBundle, modality: str) -> np.ndarray:
    seq = bundle.sequences[modality]
    return np.concatenate([seq.mean(axis=0), seq.max(axis=0)])


def _logistic_probe_accuracy(x_tr, y_tr, x_te, y_te,
                             iters: int = 300, lr: float = 0.5,
                             l2: float = 1e-3) -> float:
    """Full-batch logistic regression on standardized features."""
    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0) + 1e-8
    xt = (x_tr - mu) / sd
    xe = (x_te - mu) / sd
    w = np.zeros(xt.shape[1])
    b = 0.0
    yt = y_tr.astype(np.float64)
    for _ in range(iters):
        z = xt @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        g = p - yt
        w -= lr * (xt.T @ g / len(yt) + l2 * w)
        b -= lr * g.mean()
    pred = (xe @ w + b) > 0
    return float((pred == y_te.astype(bool)).mean())


def single_modality_probe(train, test, modality: str) -> float:
    """Linear-probe test accuracy for one modality's features."""
    x_tr = np.stack([_probe_features(b, modality) for b, _ in train])
    y_tr = np.array([y for _, y in train])
    x_te = np.stack([_probe_features(b, modality) for b, _ in test])
    y_te = np.array([y for _, y in test])
    return _logistic_probe_accuracy(x_tr, y_tr, x_te, y_te)


def gen_multimodal_xor(cfg: MultimodalXorCfg, seed: int):
    """Deterministic (train, test) with the single-modality probe gate.

    Each generation attempt fits a logistic probe per modality on [mean_t,
    max_t] features; if any probe exceeds `probe_limit` the attempt is
    discarded and a fresh stream is used, erroring out after `max_attempts`.
    """
    root = RngStream(seed, stream=202)
    last = {}
    for attempt in range(cfg.max_attempts):
        arng = root.spawn(attempt)
        dirs = _directions(cfg, arng.spawn(0))
        splits = []
        for split_id, n in ((1, cfg.n_train), (2, cfg.n_test)):
            srng = arng.spawn(split_id)
            splits.append([_xor_sample(cfg, dirs, srng.spawn(i))
                           for i in range(n)])
        train, test = splits
        last = {m: single_modality_probe(train, test, m)
                for m in sorted(cfg.dims)}
        if all(acc <= cfg.probe_limit for acc in last.values()):
            return train, test
    raise RuntimeError(
        f"single-modality probe stayed above {cfg.probe_limit:.2f} after "
        f"{cfg.max_attempts} attempts: {last}")


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def save_temporal_dataset(directory, train, test,
                          cfg: TemporalOrderCfg, seed: int) -> None:
    d = Path(directory)
    for split, items in (("train", train), ("test", test)):
        sd = d / split
        sd.mkdir(parents=True, exist_ok=True)
        labels = []
        for i, (seq, y) in enumerate(items):
            write_clip(sd / f"clip_{i:05d}.clip", seq.frames)
            labels.append(int(y))
        (sd / "labels.json").write_text(json.dumps({"labels": labels}))
    (d / "meta.json").write_text(json.dumps(
        {"kind": "temporal_order", "seed": seed, "cfg": vars(cfg)},
        indent=2, sort_keys=True))


def load_temporal_dataset(directory):
    d = Path(directory)
    out = []
    for split in ("train", "test"):
        sd = d / split
        labels = json.loads((sd / "labels.json").read_text())["labels"]
        items = [(FrameSequence(read_clip(sd / f"clip_{i:05d}.clip")), y)
                 for i, y in enumerate(labels)]
        out.append(items)
    return out[0], out[1]


def save_xor_dataset(directory, train, test,
                     cfg: MultimodalXorCfg, seed: int) -> None:
    d = Path(directory)
    for split, items in (("train", train), ("test", test)):
        sd = d / split
        sd.mkdir(parents=True, exist_ok=True)
        labels = []
        for i, (bundle, y) in enumerate(items):
            write_bundle(sd / f"sample_{i:05d}", bundle.sequences)
            labels.append(int(y))
        (sd / "labels.json").write_text(json.dumps({"labels": labels}))
    meta = {"kind": "multimodal_xor", "seed": seed, "cfg": dict(vars(cfg))}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_xor_dataset(directory):
    d = Path(directory)
    out = []
    for split in ("train", "test"):
        sd = d / split
        labels = json.loads((sd / "labels.json").read_text())["labels"]
        items = [(ModalityBundle(read_bundle(sd / f"sample_{i:05d}")), y)
                 for i, y in enumerate(labels)]
        out.append(items)
    return out[0], out[1]
