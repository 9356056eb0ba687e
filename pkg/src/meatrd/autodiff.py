"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Every differentiable operation records
its parents and a closure mapping the upstream gradient to one gradient per
parent. :func:`backward` walks the recorded graph in reverse topological order
and accumulates into the ``.grad`` of every leaf that requires gradients.

Only the operations needed by the three training stages are provided.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "backward",
    "grad",
    "finite_difference_check",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "abs_",
    "matmul", "sum_", "mean", "reshape", "transpose", "concat", "index_rows",
    "segment_sum", "segment_softmax", "softmax", "leaky_relu", "sigmoid",
    "l2_norm", "conv2d", "conv_transpose2d",
]


class NonFiniteError(FloatingPointError):
    """Raised when a forward evaluation produces NaN or Inf."""


_GRAD_ENABLED = True
CHECK_FINITE = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the reflected Tensor op

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)

    @property
    def T(self): return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant real exponent."""
    a = _as_tensor(a)
    p = float(p)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "power")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def _scatter(ufunc, idx: np.ndarray, vals: np.ndarray, n: int, fill: float = 0.0) -> np.ndarray:
    """Reduce rows of ``vals`` into ``n`` buckets given by ``idx`` (sorted reduceat, deterministic)."""
    out = np.full((n,) + vals.shape[1:], fill)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    s = idx[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    out[s[starts]] = ufunc.reduceat(vals[order], starts, axis=0)
    return out


def index_rows(a, idx) -> Tensor:
    """Gather ``a[idx]`` along the first axis (indices may repeat)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bw(g):
        return (_scatter(np.add, idx, g, shape[0]),)

    return _make(a.data[idx], (a,), bw, "index_rows")


def segment_sum(a, seg, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``seg``."""
    a = _as_tensor(a)
    seg = np.asarray(seg, dtype=np.intp)
    out = _scatter(np.add, seg, a.data, n_segments)
    return _make(out, (a,), lambda g: (g[seg],), "segment_sum")


def segment_softmax(a, seg, n_segments: int) -> Tensor:
    """Softmax of rows of ``a`` within each segment (per trailing column)."""
    a = _as_tensor(a)
    seg = np.asarray(seg, dtype=np.intp)
    mx = _scatter(np.maximum, seg, a.data, n_segments, -np.inf)
    e = np.exp(a.data - mx[seg])
    out = e / _scatter(np.add, seg, e, n_segments)[seg]

    def bw(g):
        dot = _scatter(np.add, seg, g * out, n_segments)
        return (out * (g - dot[seg]),)

    return _make(out, (a,), bw, "segment_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def l2_norm(a, axis: int = -1, keepdims: bool = True, eps: float = 0.0) -> Tensor:
    """Euclidean norm along ``axis``; ``eps`` is added to the result."""
    a = _as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    ad = a.data

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (g * ad / safe,)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make(out + eps, (a,), bw, "l2_norm")


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; supports 2-D and stacked (batched) operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def _out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> (N, oh, ow, C, kh, kw)
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return cols.transpose(0, 4, 5, 1, 2, 3)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    # inverse scatter of _im2col; cols is (N, oh, ow, C, kh, kw)
    out = np.zeros(shape)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + s * oh:s, j:j + s * ow:s] += cols[:, :, i, j]
    return out


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and (O, C, kh, kw) weights."""
    x, w = _as_tensor(x), _as_tensor(w)
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {c2}")
    oh, ow = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, oh, ow).reshape(n * oh * ow, c * kh * kw)
    wm = w.data.reshape(o, -1)
    out = (cols @ wm.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data.reshape(1, o, 1, 1)
        parents.append(b)
    xp_shape = xp.shape

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wm).reshape(n, oh, ow, c, kh, kw)
        gxp = _col2im(gcols, xp_shape, kh, kw, stride, oh, ow)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution, NCHW input and (Cin, Cout, kh, kw) weights.

    Output spatial size is ``(H - 1) * stride - 2 * padding + kh``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    n, cin, h, wd = x.shape
    cin2, cout, kh, kw = w.shape
    if cin != cin2:
        raise ValueError(f"conv_transpose2d channel mismatch: input {cin}, weight {cin2}")
    full_h, full_w = (h - 1) * stride + kh, (wd - 1) * stride + kw
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wm = w.data.reshape(cin, -1)
    cols = (xm @ wm).reshape(n, h, wd, cout, kh, kw)
    full = _col2im(cols, (n, cout, full_h, full_w), kh, kw, stride, h, wd)
    out = full[:, :, padding:full_h - padding, padding:full_w - padding]
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data.reshape(1, cout, 1, 1)
        parents.append(b)

    def bw(g):
        gfull = np.zeros((n, cout, full_h, full_w))
        gfull[:, :, padding:full_h - padding, padding:full_w - padding] = g
        gcols = _im2col(gfull, kh, kw, stride, h, wd).reshape(-1, cout * kh * kw)
        gx = (gcols @ wm.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        gw = (xm.T @ gcols).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(np.ascontiguousarray(out), parents, bw, "conv_transpose2d")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``root``.

    Gradients are added into ``.grad`` of every reachable leaf with
    ``requires_grad`` (so repeated calls accumulate). Returns the gradients of
    this pass keyed by leaf tensor.
    """
    if root.size != 1 and seed is None:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data) if seed is None else seed}
    leaves: dict[Tensor, np.ndarray] = {}
    if not root.requires_grad:
        return leaves
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` w.r.t. ``wrt`` without touching ``.grad``.

    Leaves not reachable from ``root`` get a zero gradient.
    """
    wrt = list(wrt)
    saved = [w.grad for w in wrt]
    for w in wrt:
        w.grad = None
    try:
        got = backward(root)
    finally:
        for w, s in zip(wrt, saved):
            w.grad = s
    return [got.get(w, np.zeros_like(w.data)) for w in wrt]


def finite_difference_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a tensor to a scalar tensor. The relative error per coordinate
    is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    (analytic,) = grad(f(xt), [xt])
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x0.copy())).item()
        flat[i] = orig - step
        fm = f(Tensor(x0.copy())).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("non-finite evaluation in finite_difference_check")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(err.max())
