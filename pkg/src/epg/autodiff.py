"""Reverse-mode automatic differentiation over dense float64 tensors.

Building an expression eagerly records the computation graph (a tape in
creation order, which is topological by construction); ``backward`` walks it
once in reverse and accumulates gradients into the leaves, summing over
fan-out.  Only the primitives the loss/policy networks need are provided:
matmul, elementwise arithmetic, tanh, leaky ReLU, strided 1-D convolution,
concat, slicing, reshape, row tiling and reductions.
"""

from __future__ import annotations

import numpy as np

_CHECK_FINITE = False


class ShapeError(ValueError):
    """Operation received tensors of incompatible shape."""


def set_check_finite(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every tensor created afterwards."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """Node of the computation graph, wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=True, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        if _CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite value in tensor")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience operators; constants are wrapped as non-differentiable leaves.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def constant(data) -> Tensor:
    """Leaf that never receives a gradient."""
    return Tensor(data, requires_grad=False)


def _node(data, parents, backward_fn) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, _parents=parents,
                  _backward=backward_fn if rg else None)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad += g


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # Only scalar-vs-array mixing is permitted, so a full sum suffices.
    if shape == ():
        return np.asarray(g.sum(), dtype=np.float64)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out_data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out_data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    out_data = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _node(-a.data, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(out_data, (a, b), bw)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _node(out_data, (a,), bw)


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data

    def bw(g):
        _accum(a, g * (2.0 * a.data))

    return _node(out_data, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0.0
    out_data = np.where(pos, a.data, slope * a.data)

    def bw(g):
        _accum(a, g * np.where(pos, 1.0, slope))

    return _node(out_data, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.float64(a.data.sum())

    def bw(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _node(out_data, (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.float64(a.data.sum() / n)

    def bw(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _node(out_data, (a,), bw)


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    ndim = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise ShapeError("concat: rank mismatch among parts")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis] = slice(lo, hi)
                _accum(p, g[tuple(idx)])

    return _node(out_data, tuple(parts), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim == 0:
        raise ShapeError("slice_rows: scalar input")
    out_data = a.data[start:stop]

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full)

    return _node(out_data, (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("slice_cols: expects a 2-D input")
    out_data = a.data[:, start:stop]

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accum(a, full)

    return _node(out_data, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(out_data, (a,), bw)


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a vector as n identical rows; gradient sums over rows."""
    if a.data.ndim != 1:
        raise ShapeError("tile_rows: expects a 1-D input")
    out_data = np.tile(a.data, (n, 1))

    def bw(g):
        _accum(a, g.sum(axis=0))

    return _node(out_data, (a,), bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor, kernel: int, stride: int) -> Tensor:
    """Valid strided 1-D convolution over the row (time) axis.

    ``x`` is (length, in_channels); ``w`` is (kernel * in_channels,
    out_channels) with window rows flattened time-major; output is
    (floor((length - kernel) / stride) + 1, out_channels).
    """
    if x.data.ndim != 2:
        raise ShapeError("conv1d: input must be 2-D (length, channels)")
    length, cin = x.data.shape
    if w.data.shape[0] != kernel * cin:
        raise ShapeError(
            f"conv1d: weight rows {w.data.shape[0]} != kernel*channels {kernel * cin}")
    if length < kernel:
        raise ShapeError(f"conv1d: input length {length} shorter than kernel {kernel}")
    n_out = (length - kernel) // stride + 1
    # Gather windows as a (n_out, kernel*cin) matrix, then it is a matmul.
    idx = (np.arange(n_out)[:, None] * stride + np.arange(kernel)[None, :])
    windows = x.data[idx].reshape(n_out, kernel * cin)
    out_data = windows @ w.data + b.data

    def bw(g):
        if w.requires_grad:
            _accum(w, windows.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))
        if x.requires_grad:
            gw = (g @ w.data.T).reshape(n_out, kernel, cin)
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, gw)
            _accum(x, gx)

    return _node(out_data, (x, w, b), bw)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor, seed_gradient=None) -> None:
    """Accumulate d(out)/d(leaf) into ``grad`` of every reachable leaf.

    Each node is visited exactly once, in reverse topological order.
    """
    if seed_gradient is None:
        if out.data.shape != ():
            raise ShapeError("backward: output is not scalar; pass seed_gradient")
        seed = np.float64(1.0)
    else:
        seed = np.asarray(seed_gradient, dtype=np.float64)
        if seed.shape != out.data.shape:
            raise ShapeError("backward: seed gradient shape mismatch")
    if not out.requires_grad:
        return
    out.grad = seed.copy() if isinstance(seed, np.ndarray) else seed
    for node in reversed(_toposort(out)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradients(out: Tensor, inputs: list[Tensor], seed_gradient=None) -> list[np.ndarray]:
    """Run backward and return the gradient of each requested input."""
    backward(out, seed_gradient)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]


def check_gradient(fn, point: np.ndarray, step: float = 1e-5) -> float:
    """Worst relative error of reverse-mode vs central finite differences.

    ``fn`` maps a Tensor leaf to a scalar Tensor.  Relative error uses
    denominator max(|analytic|, |numeric|, 1e-8) per component.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    leaf = Tensor(point.copy())
    out = fn(leaf)
    if out.data.shape != ():
        raise ShapeError("check_gradient: function output is not scalar")
    analytic = gradients(out, [leaf])[0]

    worst = 0.0
    flat = point.ravel()
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + step
        f_plus = fn(Tensor(probe.reshape(point.shape), requires_grad=False)).item()
        probe[i] = flat[i] - step
        f_minus = fn(Tensor(probe.reshape(point.shape), requires_grad=False)).item()
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
