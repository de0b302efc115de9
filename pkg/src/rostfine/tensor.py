"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array together with an optional gradient buffer.
Every operation records its inputs and a backward closure on the fly, so
each forward pass rebuilds the tape from scratch.  ``Tensor.backward()``
replays the tape in reverse topological order and accumulates gradients
into every tensor created with ``requires_grad=True``.

Shape handling is deliberately strict: elementwise arithmetic requires
identical shapes, or one operand must be a scalar (a Python number or a
0-d tensor).  There is no implicit broadcasting anywhere else; shape bugs
surface as ``ShapeError`` instead of silently producing wrong results.

Double precision is the default dtype.  Single precision is supported for
training runs but all gradient checking assumes float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_checked = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


def set_checked(flag: bool) -> None:
    """Globally enable or disable NaN/Inf detection on op outputs."""
    global _checked
    _checked = bool(flag)


@contextlib.contextmanager
def checked():
    """Context manager that turns on NaN/Inf detection for its block."""
    global _checked
    previous = _checked
    _checked = True
    try:
        yield
    finally:
        _checked = previous


def _validate_finite(data: np.ndarray, op: str) -> None:
    if _checked and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A numpy array plus reverse-mode differentiation bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- graph plumbing -----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.shape:
            # only legal mismatch under strict shapes: scalar operand
            g = np.asarray(g.sum(), dtype=self.data.dtype).reshape(self.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a scalar; populates .grad on reachable tensors."""
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        _check_elementwise(self, other, "add")
        out = _result(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def _bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(g)
                if b.requires_grad:
                    b._accumulate(g)
            out._backward = _bw
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other, self.dtype)
        _check_elementwise(self, other, "sub")
        out = _result(self.data - other.data, (self, other), "sub")
        if out.requires_grad:
            def _bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(g)
                if b.requires_grad:
                    b._accumulate(-g)
            out._backward = _bw
        return out

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype).__sub__(self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        _check_elementwise(self, other, "mul")
        out = _result(self.data * other.data, (self, other), "mul")
        if out.requires_grad:
            def _bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(g * b.data)
                if b.requires_grad:
                    b._accumulate(g * a.data)
            out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        _check_elementwise(self, other, "div")
        out = _result(self.data / other.data, (self, other), "div")
        if out.requires_grad:
            def _bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(g / b.data)
                if b.requires_grad:
                    b._accumulate(-g * a.data / (b.data * b.data))
            out._backward = _bw
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype).__truediv__(self)

    def __neg__(self):
        out = _result(-self.data, (self,), "neg")
        if out.requires_grad:
            def _bw(g, a=self):
                a._accumulate(-g)
            out._backward = _bw
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("exponent must be a Python number")
        out = _result(self.data ** exponent, (self,), "pow")
        if out.requires_grad:
            def _bw(g, a=self, c=float(exponent)):
                a._accumulate(g * c * a.data ** (c - 1.0))
            out._backward = _bw
        return out

    def __matmul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        out = _result(np.matmul(a.data, b.data), (a, b), "matmul")
        if out.requires_grad:
            def _bw(g, a=a, b=b):
                if a.requires_grad:
                    a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
                if b.requires_grad:
                    b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))
            out._backward = _bw
        return out

    # -- pointwise functions --------------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        out = _result(y, (self,), "exp")
        if out.requires_grad:
            def _bw(g, a=self, y=y):
                a._accumulate(g * y)
            out._backward = _bw
        return out

    def log(self):
        out = _result(np.log(self.data), (self,), "log")
        if out.requires_grad:
            def _bw(g, a=self):
                a._accumulate(g / a.data)
            out._backward = _bw
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = _result(y, (self,), "sqrt")
        if out.requires_grad:
            def _bw(g, a=self, y=y):
                a._accumulate(g / (2.0 * y))
            out._backward = _bw
        return out

    def abs(self):
        out = _result(np.abs(self.data), (self,), "abs")
        if out.requires_grad:
            def _bw(g, a=self):
                a._accumulate(g * np.sign(a.data))
            out._backward = _bw
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = _result(y, (self,), "tanh")
        if out.requires_grad:
            def _bw(g, a=self, y=y):
                a._accumulate(g * (1.0 - y * y))
            out._backward = _bw
        return out

    def gelu(self):
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = _result(x * cdf, (self,), "gelu")
        if out.requires_grad:
            def _bw(g, a=self, cdf=cdf):
                pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
                a._accumulate(g * (cdf + a.data * pdf))
            out._backward = _bw
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False):
        out = _result(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            def _bw(g, a=self, axis=axis, keepdims=keepdims):
                a._accumulate(_spread(g, a.shape, axis, keepdims))
            out._backward = _bw
        return out

    def mean(self, axis: int | None = None, keepdims: bool = False):
        count = self.size if axis is None else self.shape[axis]
        out = _result(np.mean(self.data, axis=axis, keepdims=keepdims), (self,), "mean")
        if out.requires_grad:
            def _bw(g, a=self, axis=axis, keepdims=keepdims, count=count):
                a._accumulate(_spread(g, a.shape, axis, keepdims) / count)
            out._backward = _bw
        return out

    # -- shape manipulation -----------------------------------------------------

    def reshape(self, shape: Sequence[int]):
        shape = tuple(shape)
        out = _result(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            def _bw(g, a=self):
                a._accumulate(g.reshape(a.shape))
            out._backward = _bw
        return out

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        out = _result(np.transpose(self.data, axes), (self,), "transpose")
        if out.requires_grad:
            inv = tuple(np.argsort(axes))
            def _bw(g, a=self, inv=inv):
                a._accumulate(np.transpose(g, inv))
            out._backward = _bw
        return out

    def slice_along(self, axis: int, start: int, stop: int):
        """Contiguous slice [start:stop) along one axis."""
        idx = [slice(None)] * self.ndim
        idx[axis] = slice(start, stop)
        idx = tuple(idx)
        out = _result(self.data[idx], (self,), "slice")
        if out.requires_grad:
            def _bw(g, a=self, idx=idx):
                buf = np.zeros_like(a.data)
                buf[idx] = g
                a._accumulate(buf)
            out._backward = _bw
        return out

    def gather_rows(self, indices):
        """Select rows (axis 0) by an integer index array; grads scatter-add."""
        indices = np.asarray(indices, dtype=np.intp)
        out = _result(self.data[indices], (self,), "gather_rows")
        if out.requires_grad:
            def _bw(g, a=self, indices=indices):
                buf = np.zeros_like(a.data)
                np.add.at(buf, indices, g)
                a._accumulate(buf)
            out._backward = _bw
        return out


# -- free functions -------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    tensors = list(tensors)
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        def _bw(g, tensors=tensors, sizes=sizes, axis=axis):
            offset = 0
            for t, n in zip(tensors, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(offset, offset + n)
                    t._accumulate(g[tuple(idx)])
                offset += n
        out._backward = _bw
    return out


def tile_rows(t: Tensor, n: int) -> Tensor:
    """Repeat a leading-dim-1 tensor n times along axis 0."""
    if t.shape[0] != 1:
        raise ShapeError(f"tile_rows needs leading dimension 1, got {t.shape}")
    out = _result(np.repeat(t.data, n, axis=0), (t,), "tile_rows")
    if out.requires_grad:
        def _bw(g, a=t):
            a._accumulate(g.sum(axis=0, keepdims=True))
        out._backward = _bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on the last axis: (..., din) @ (din, dout) + (dout,)."""
    din, dout = w.shape
    if x.shape[-1] != din or b.shape != (dout,):
        raise ShapeError(f"linear shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = _result((x2 @ w.data + b.data).reshape(*lead, dout), (x, w, b), "linear")
    if out.requires_grad:
        def _bw(g, x=x, w=w, b=b, x2=x2, din=din, dout=dout):
            g2 = g.reshape(-1, dout)
            if x.requires_grad:
                x._accumulate((g2 @ w.data.T).reshape(x.shape))
            if w.requires_grad:
                w._accumulate(x2.T @ g2)
            if b.requires_grad:
                b._accumulate(g2.sum(axis=0))
        out._backward = _bw
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max-subtraction)."""
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, (x,), "softmax")
    if out.requires_grad:
        def _bw(g, a=x, y=y, axis=axis):
            dot = np.sum(g * y, axis=axis, keepdims=True)
            a._accumulate((g - dot) * y)
        out._backward = _bw
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _result(gamma.data * xhat + beta.data, (x, gamma, beta), "layer_norm")
    if out.requires_grad:
        def _bw(g, x=x, gamma=gamma, beta=beta, xhat=xhat, inv=inv, d=d):
            if x.requires_grad:
                gg = g * gamma.data
                term = gg - gg.mean(axis=-1, keepdims=True) \
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(term * inv)
            flat_axes = tuple(range(g.ndim - 1))
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=flat_axes))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=flat_axes))
        out._backward = _bw
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    """Tape for the reverse sweep: every node after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = np.zeros_like(t.data)


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Backward from a scalar loss; off-path params get zero gradients."""
    zero_grad(params)
    loss.backward()
    return [p.grad for p in params]


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Exhaustive: every coordinate of every parameter is perturbed.  The
    relative error is |analytic - numeric| / max(1, |numeric|).
    """
    return _grad_check_coords(f, params, h, coords=None)


def grad_check_sampled(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    per_tensor: int = 25,
    seed: int = 0,
) -> tuple[float, int]:
    """grad_check over a seeded coordinate sample from every parameter.

    Returns (max relative error, number of coordinates checked).  Use for
    models too large for the exhaustive sweep; each tensor contributes up
    to ``per_tensor`` coordinates, so every parameter is still covered.
    """
    rng = np.random.default_rng(seed)
    coords: list[list[int]] = []
    total = 0
    for p in params:
        if p.size <= per_tensor:
            chosen = list(range(p.size))
        else:
            chosen = sorted(rng.choice(p.size, size=per_tensor, replace=False).tolist())
        coords.append(chosen)
        total += len(chosen)
    err = _grad_check_coords(f, params, h, coords=coords)
    return err, total


def _grad_check_coords(f, params, h, coords):
    if not (1e-6 <= h <= 1e-4):
        raise ValueError("step size h must lie in [1e-6, 1e-4]")
    out = f()
    analytic = gradients(out, params)
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        gflat = analytic[k].reshape(-1)
        indices = range(flat.size) if coords is None else coords[k]
        for i in indices:
            keep = flat[i]
            flat[i] = keep + h
            up = f().item()
            flat[i] = keep - h
            down = f().item()
            flat[i] = keep
            if not (np.isfinite(up) and np.isfinite(down)):
                label = p.name or f"params[{k}]"
                raise NonFiniteError(f"non-finite loss while perturbing {label}[{i}]")
            numeric = (up - down) / (2.0 * h)
            rel = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
    return worst


# -- helpers ---------------------------------------------------------------------


def _scalar_error(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float, np.integer, np.floating)):
        return Tensor(np.asarray(value, dtype=dtype))
    raise TypeError(f"cannot operate on {type(value).__name__}")


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    _validate_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.name = None
    out._backward = None
    out._parents = tuple(p for p in parents if p.requires_grad) if out.requires_grad else ()
    return out


def _spread(g: np.ndarray, shape: tuple[int, ...], axis: int | None, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    if axis is None:
        return np.full(shape, g)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()
