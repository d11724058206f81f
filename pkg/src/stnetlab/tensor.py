"""Dense tensors and the reverse-mode autodiff tape.

A :class:`Tensor` is a thin wrapper over a contiguous row-major numpy array in
f32 or f64. Differentiable ops (see :mod:`stnetlab.ops`) record one
:class:`TapeEntry` per call onto the active :class:`Tape`; entries are
appended in forward order, which makes the tape topologically sorted by
construction. ``Tape.backward`` walks the entries in reverse and accumulates
gradients for every reachable tracked tensor.

Tensors are immutable during forward/backward by convention; the optimizer
mutates ``Tensor.data`` in place between tape lifetimes.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_NP_TO_NAME = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""


class NumericsError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""

    def __init__(self, msg: str, op: str = "", layer: str = ""):
        super().__init__(msg)
        self.op = op
        self.layer = layer


# Global NaN/Inf check toggle; ops call check_finite on their outputs when on.
_finite_checks = False


def set_finite_checks(enabled: bool) -> bool:
    """Enable/disable per-op NaN/Inf checks; returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def finite_checks_enabled() -> bool:
    return _finite_checks


def check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by op '{op}'", op=op)


class Tensor:
    """N-dimensional dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "_tape", "_node")

    def __init__(self, data, dtype: Optional[str] = None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            target = DTYPES[dtype]
        elif arr.dtype == np.float64:
            target = np.float64
        else:
            target = np.float32
        if arr.dtype != target:
            arr = arr.astype(target)
        if not arr.flags["C_CONTIGUOUS"]:
            # note: ascontiguousarray would promote 0-d to 1-d, but 0-d
            # arrays are always contiguous so this branch never sees them
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Optional["Tape"] = None
        self._node: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return _NP_TO_NAME[self.data.dtype]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def astype(self, dtype: str) -> "Tensor":
        return Tensor(self.data, dtype=dtype, requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class TapeEntry:
    """One recorded op: output node, input nodes, and a backward closure.

    ``backward(g)`` receives the gradient w.r.t. the op output and returns a
    tuple of gradients aligned with ``inputs`` (None for untracked inputs).
    Saved activations live in the closure.
    """

    __slots__ = ("op", "out_id", "in_ids", "backward")

    def __init__(self, op: str, out_id: int, in_ids: tuple,
                 backward: Callable[[np.ndarray], tuple]):
        self.op = op
        self.out_id = out_id
        self.in_ids = in_ids
        self.backward = backward


class Grads:
    """Gradient lookup keyed by the tensors that produced them."""

    def __init__(self, by_id: dict):
        self._by_id = by_id

    def get(self, t: Tensor) -> Optional[np.ndarray]:
        if t._node is None:
            return None
        return self._by_id.get(t._node)

    def __contains__(self, t: Tensor) -> bool:
        return self.get(t) is not None


_tape_stack: list = []


def current_tape() -> Optional["Tape"]:
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Ordered record of ops for one forward pass (single-threaded)."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._next_id = 0
        # Keep leaves alive so Grads lookups by tensor stay valid.
        self._leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self
        return False

    def _fresh_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _node_of(self, t: Tensor) -> Optional[int]:
        """Node id of `t` on this tape; registers requires_grad leaves lazily."""
        if t._tape is self:
            return t._node
        if t.requires_grad:
            t._tape = self
            t._node = self._fresh_id()
            self._leaves.append(t)
            return t._node
        return None

    def tracks(self, t: Tensor) -> bool:
        return t._tape is self and t._node is not None

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor],
               backward: Callable[[np.ndarray], tuple]) -> None:
        in_ids = tuple(self._node_of(t) for t in inputs)
        if all(i is None for i in in_ids):
            return
        out._tape = self
        out._node = self._fresh_id()
        self.entries.append(TapeEntry(op, out._node, in_ids, backward))

    def backward(self, loss: Tensor) -> Grads:
        """Reverse sweep from a scalar loss; returns gradients for all
        reachable tracked tensors."""
        if loss.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar root, got shape {loss.shape}")
        if loss._tape is not self or loss._node is None:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {
            loss._node: np.ones_like(loss.data)
        }
        for entry in reversed(self.entries):
            g = grads.pop(entry.out_id, None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for nid, gi in zip(entry.in_ids, in_grads):
                if nid is None or gi is None:
                    continue
                acc = grads.get(nid)
                if acc is None:
                    grads[nid] = np.array(gi, copy=True)
                else:
                    acc += gi
        return Grads(grads)


def record(op: str, out: Tensor, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Record `op` on the active tape (if any) and return `out`."""
    check_finite(out.data, op)
    tape = current_tape()
    if tape is not None:
        tape.record(op, out, inputs, backward)
    return out
