"""Dense tensors plus a recording tape for reverse-mode differentiation.

A Tape collects op outputs in execution order while it is active; backward
walks the list in exact reverse order, so gradients from every consumer of a
value are accumulated before that value's own backward rule runs.  Leaves
(parameters, inputs) simply receive gradient accumulations.

Training runs in float32; tests and verification switch the default dtype to
float64, where the convolution/resampling ops use fixed-order accumulation so
they can be compared bit-for-bit against straightforward reference loops.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_DEFAULT_DTYPE = np.float32
_DEBUG_NAN = False


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug_nan(enabled: bool) -> None:
    """When enabled, every op output is checked for non-finite values."""
    global _DEBUG_NAN
    _DEBUG_NAN = bool(enabled)


def debug_nan_enabled() -> bool:
    return _DEBUG_NAN


class Tensor:
    """N-dimensional value node.  grad is allocated lazily during backward."""

    __slots__ = ("data", "grad", "_backward")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = None
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def constant(x) -> Tensor:
    """Tensor that participates in ops but never receives gradient pushes
    (its grad is simply ignored by the caller)."""
    return as_tensor(x)


class Tape:
    """Execution-ordered record of op outputs for one forward pass."""

    _current: "Tape | None" = None

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if Tape._current is not None:
            raise RuntimeError("tapes do not nest")
        Tape._current = self
        return self

    def __exit__(self, *exc):
        Tape._current = None
        return False

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._current

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Reverse sweep from root; gradients accumulate additively on fan-out."""
        if seed is None:
            if root.data.size != 1:
                raise ValueError("backward from a non-scalar needs an explicit seed")
            seed = np.ones_like(root.data)
        root.grad = np.asarray(seed, dtype=root.data.dtype)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


def tracing() -> bool:
    return Tape._current is not None


def register(out: Tensor, bwd) -> Tensor:
    """Attach a backward rule and record the node on the active tape."""
    out._backward = bwd
    Tape._current.nodes.append(out)
    return out


def accum_grad(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Parameter:
    """Named trainable tensor; gradient lives on the wrapped Tensor."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE))

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = value

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"
