"""Parameter sets and on-disk formats.

All binary formats are little-endian, row-major:

* ParamSet: ``manifest.json`` mapping name -> {dtype, shape} plus one raw
  ``<name>.bin`` blob per parameter. Round-trips are bit-exact.
* clip file: 12-byte header ``<u4 F, u4 H, u4 W`` followed by F*3*H*W f32
  frame values.
* modality bundle: ``manifest.json`` mapping modality -> {T, d} plus one f32
  ``<modality>.bin`` blob per modality.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Iterator, Optional

import numpy as np

from .tensor import DTYPES, Tensor

_LE = {"f32": "<f4", "f64": "<f8"}


def _is_buffer(name: str) -> bool:
    return name.endswith(".run_mean") or name.endswith(".run_var")


class ParamSet:
    """Named parameter tensors with deterministic iteration and serialization.

    Running-statistic buffers (``*.run_mean`` / ``*.run_var``) are stored
    alongside trainables but excluded from gradient updates.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def get(self, name: str) -> Optional[Tensor]:
        return self._params.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def keys(self):
        return self._params.keys()

    def items(self):
        return self._params.items()

    def names(self) -> list:
        return list(self._params)

    def trainable_names(self) -> list:
        return [n for n in self._params if not _is_buffer(n)]

    def total_params(self) -> int:
        """Trainable scalar count (buffers excluded), matching describe()."""
        return sum(self._params[n].size for n in self.trainable_names())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, t in self._params.items():
            out.add(n, Tensor(t.data.copy(), requires_grad=t.requires_grad))
        return out

    def astype(self, dtype: str) -> "ParamSet":
        out = ParamSet()
        for n, t in self._params.items():
            out.add(n, Tensor(t.data.astype(DTYPES[dtype]),
                              requires_grad=t.requires_grad))
        return out

    def allclose(self, other: "ParamSet", rtol=0.0, atol=0.0) -> bool:
        if set(self.keys()) != set(other.keys()):
            return False
        return all(np.allclose(self[n].data, other[n].data, rtol=rtol,
                               atol=atol) for n in self.keys())

    def identical(self, other: "ParamSet") -> bool:
        if set(self.keys()) != set(other.keys()):
            return False
        return all(self[n].data.tobytes() == other[n].data.tobytes()
                   for n in self.keys())

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {}
        for name in sorted(self._params):
            t = self._params[name]
            manifest[name] = {"dtype": t.dtype, "shape": list(t.shape)}
            blob = np.ascontiguousarray(t.data).astype(
                _LE[t.dtype], copy=False).tobytes()
            (d / f"{name}.bin").write_bytes(blob)
        (d / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True))

    @staticmethod
    def load(directory) -> "ParamSet":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        out = ParamSet()
        for name in sorted(manifest):
            meta = manifest[name]
            shape = tuple(meta["shape"])
            raw = (d / f"{name}.bin").read_bytes()
            arr = np.frombuffer(raw, dtype=_LE[meta["dtype"]]).reshape(shape)
            arr = arr.astype(DTYPES[meta["dtype"]])  # native order, owned copy
            out.add(name, Tensor(arr, requires_grad=not _is_buffer(name)))
        return out


# ---------------------------------------------------------------------------
# clip files
# ---------------------------------------------------------------------------

def write_clip(path, frames: np.ndarray) -> None:
    """frames: [F, 3, H, W] float array in [0, 1]."""
    f, c, h, w = frames.shape
    if c != 3:
        raise ValueError(f"clip frames must have 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", f, h, w))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_clip(path) -> np.ndarray:
    with open(path, "rb") as fh:
        f, h, w = struct.unpack("<III", fh.read(12))
        raw = fh.read(f * 3 * h * w * 4)
    arr = np.frombuffer(raw, dtype="<f4").reshape(f, 3, h, w)
    return arr.astype(np.float32)


# ---------------------------------------------------------------------------
# modality bundles
# ---------------------------------------------------------------------------

def write_bundle(directory, sequences: Dict[str, np.ndarray]) -> None:
    """sequences: modality -> [T, d] f32 array."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name in sorted(sequences):
        seq = np.asarray(sequences[name], dtype=np.float32)
        if seq.ndim != 2:
            raise ValueError(f"modality {name!r} must be [T, d], got {seq.shape}")
        manifest[name] = {"T": int(seq.shape[0]), "d": int(seq.shape[1])}
        (d / f"{name}.bin").write_bytes(
            np.ascontiguousarray(seq, dtype="<f4").tobytes())
    (d / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


def read_bundle(directory) -> Dict[str, np.ndarray]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    out = {}
    for name in sorted(manifest):
        meta = manifest[name]
        raw = (d / f"{name}.bin").read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(meta["T"], meta["d"])
        out[name] = arr.astype(np.float32)
    return out
