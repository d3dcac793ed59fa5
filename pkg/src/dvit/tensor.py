"""Dense n-dimensional arrays with reverse-mode automatic differentiation.

Everything else in the package computes through the :class:`Tensor` type
defined here.  Values are backed by numpy arrays (float64 by default,
float32 permitted for training loops); gradients are propagated by walking
the recorded operation graph in reverse topological order.

Broadcasting follows trailing-dimension alignment (numpy's rule).  Higher
level primitives that need a custom derivative (convolution, deformable
aggregation, ...) hook into the graph through :func:`apply_op`.
"""

from __future__ import annotations

import contextlib
import io
import json
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "TensorDumpError",
    "GradCheckError",
    "apply_op",
    "no_grad",
    "grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "concat",
    "matmul",
    "grad_check",
    "dump_tensors",
    "load_tensors",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TensorDumpError(RuntimeError):
    """Raised on malformed, truncated, or inconsistent tensor dump files."""


class GradCheckError(RuntimeError):
    """Raised when a function under gradient check produces non-finite values."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable operation recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An immutable-by-convention ndarray plus optional gradient.

    ``grad`` is only mutated by :meth:`backward` (accumulation) and by
    optimizers clearing it between steps.  ``no_decay`` marks parameters
    the optimizer should exempt from weight decay.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.no_decay = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"

    # -- arithmetic -----------------------------------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out = _broadcast_op(self, other, np.add)

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return apply_op(out, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        out = _broadcast_op(self, other, np.subtract)

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return apply_op(out, (self, other), backward)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        out = _broadcast_op(self, other, np.multiply)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

        return apply_op(out, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out = _broadcast_op(self, other, np.divide)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb

        return apply_op(out, (self, other), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        return apply_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        e = float(exponent)
        x = self

        def backward(g):
            return (g * e * np.power(x.data, e - 1.0),)

        return apply_op(np.power(self.data, e), (self,), backward)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    # -- elementwise functions -------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return apply_op(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self
        return apply_op(np.log(self.data), (self,), lambda g: (g / x.data,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return apply_op(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return apply_op(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sin(self):
        x = self
        return apply_op(np.sin(self.data), (self,), lambda g: (g * np.cos(x.data),))

    def cos(self):
        x = self
        return apply_op(np.cos(self.data), (self,), lambda g: (-g * np.sin(x.data),))

    def relu(self):
        mask = self.data > 0
        return apply_op(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,))

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape, nd = self.shape, self.ndim

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return apply_op(out, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else _axis_size(self.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation ------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = self.data.reshape(shape)
        return apply_op(out, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return apply_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def __getitem__(self, key):
        out = self.data[key]
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, key, g)
            return (full,)

        return apply_op(np.array(out, copy=True), (self,), backward)

    # -- autodiff -----------------------------------------------------------
    def backward(self):
        """Populate ``grad`` on every reachable node that requires grad.

        The graph is traversed in reverse topological order; each recorded
        use contributes to its parents' gradients exactly once.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.data.dtype).reshape(parent.shape)
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad = parent.grad + g


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; deterministic for a fixed graph."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def apply_op(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    """Wrap ``data`` as a graph node.

    ``backward(upstream_grad)`` must return one gradient array (or None)
    per parent, each matching that parent's shape.
    """
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _broadcast_op(a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _axis_size(shape, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    return int(np.prod([shape[a] for a in axis]))


# -- constructors -------------------------------------------------------

def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op(out, tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for rank-2 or rank-3 (batched) operands.

    Rank-3 operands must carry equal batch dimensions; mixed 2/3 rank is
    handled by broadcasting the rank-2 side across the batch.
    """
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul supports rank 2..3 tensors, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op(out, (a, b), backward)


# -- gradient checking -----------------------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar-valued ``f`` against central differences.

    Returns max over elements of |analytic - numeric| / max(1, |numeric|).
    Raises :class:`GradCheckError` if ``f`` produces non-finite values.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        raise GradCheckError("function produced non-finite output")
    out.backward()
    analytic = np.zeros(x.shape, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)

    numeric = np.zeros(x.shape, dtype=np.float64)
    with no_grad():
        for i in range(x.data.size):
            idx = np.unravel_index(i, x.shape) if x.ndim else ()
            orig = x.data[idx]
            x.data[idx] = orig + eps
            hi = float(f(x).data.reshape(-1)[0])
            x.data[idx] = orig - eps
            lo = float(f(x).data.reshape(-1)[0])
            x.data[idx] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise GradCheckError(f"non-finite probe at index {idx}")
            numeric[idx] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- tensor dump format ------------------------------------------------------
#
# Text header, one line per tensor: "<name> <d0>x<d1>x... <dtype> <byte-offset>",
# terminated by a blank line, followed by raw little-endian IEEE-754 blobs
# concatenated in header order.  An optional single-line JSON metadata record
# may precede the tensor lines ("meta {...}").

_MAGIC = b"tensordump 1"
_DTYPE_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def dump_tensors(path, tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write named arrays (and optional JSON metadata) to ``path``."""
    header = io.StringIO()
    header.write(_MAGIC.decode() + "\n")
    if meta is not None:
        header.write("meta " + json.dumps(meta, sort_keys=True) + "\n")
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if " " in name or "\n" in name:
            raise ValueError(f"tensor name may not contain whitespace: {name!r}")
        arr = np.asarray(arr)
        code = _DTYPE_NAMES.get(arr.dtype)
        if code is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "1"
        header.write(f"{name} {shape} {code} {offset}\n")
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        blobs.append(blob)
        offset += len(blob)
    header.write("\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode())
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], Optional[dict]]:
    """Read a tensor dump; returns (tensors, metadata-or-None)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise TensorDumpError(f"{path}: missing header terminator")
    lines = raw[:sep].decode("utf-8", errors="replace").splitlines()
    blob = raw[sep + 2:]
    if not lines or lines[0].encode() != _MAGIC:
        raise TensorDumpError(f"{path}: bad magic line {lines[0] if lines else ''!r}")
    meta = None
    entries = []
    for line in lines[1:]:
        if line.startswith("meta "):
            try:
                meta = json.loads(line[5:])
            except json.JSONDecodeError as exc:
                raise TensorDumpError(f"{path}: malformed metadata: {exc}") from exc
            continue
        parts = line.split()
        if len(parts) != 4:
            raise TensorDumpError(f"{path}: malformed header line {line!r}")
        name, shape_s, code, offset_s = parts
        if code not in _DTYPE_CODES:
            raise TensorDumpError(f"{path}: unknown dtype code {code!r} for {name!r}")
        try:
            shape = tuple(int(d) for d in shape_s.split("x"))
            offset = int(offset_s)
        except ValueError as exc:
            raise TensorDumpError(f"{path}: malformed header line {line!r}") from exc
        entries.append((name, shape, _DTYPE_CODES[code], offset))
    tensors: dict[str, np.ndarray] = {}
    for name, shape, dtype, offset in entries:
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if offset + nbytes > len(blob):
            raise TensorDumpError(f"{path}: truncated blob for tensor {name!r}")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        tensors[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    return tensors, meta
