"""Dense tensors with reverse-mode autodiff over the operators the network uses.

Tensors wrap a numpy array. Every differentiable op records its parents and a
closure mapping the output gradient to parent gradients; ``Tensor.backward``
replays that record in reverse topological order. Storage is float32 unless the
caller hands in float64 data (used for gradient verification).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "conv2d",
    "bilinear_sample",
    "deform_conv2d",
    "pool2d",
    "upsample_bilinear",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "concat_channels",
    "fully_connected",
    "global_avg_pool",
    "clamp",
    "sqrt",
    "finite_diff_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would hold NaN or Inf."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 and isinstance(data, (np.ndarray, np.generic)):
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = _as_array(data, dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def sum(self) -> Tensor:
        return _sum(self)

    def mean(self) -> Tensor:
        return _mean(self)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf.

        Only scalar outputs are accepted unless an explicit seed gradient is
        given. Repeated calls add to existing ``.grad`` arrays.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    on_stack: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            on_stack.discard(key)
            order.append(node)
            continue
        if key in seen:
            continue
        seen.add(key)
        on_stack.add(key)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad:
                assert id(parent) not in on_stack, "cycle in autodiff graph"
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise ------------------------------------------------------------

def add(x: Tensor, y) -> Tensor:
    y = _lift(y, x.dtype)
    _check_broadcast(x, y)

    def backward(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _result(x.data + y.data, (x, y), backward)


def mul(x: Tensor, y) -> Tensor:
    y = _lift(y, x.dtype)
    _check_broadcast(x, y)

    def backward(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return _result(x.data * y.data, (x, y), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(x.data * s, (x,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    # rounding would otherwise give exactly 0 or 1 for large |x|; keep the open interval
    fi = np.finfo(x.dtype)
    out = np.clip(out, fi.tiny, 1 - fi.epsneg, out=out)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def _sum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def _mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def _reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def _getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(x.data[idx]), (x,), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate ``[C_i, H, W]`` maps along the channel axis."""
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    hw = xs[0].shape[1:]
    for t in xs:
        if t.ndim != 3 or t.shape[1:] != hw:
            raise ValueError(f"spatial mismatch in concat: {[t.shape for t in xs]}")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _result(np.concatenate([t.data for t in xs], axis=0), xs, backward)


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ValueError(f"fully_connected shape mismatch: x{x.shape} w{w.shape} b{b.shape}")

    def backward(g):
        return w.data.T @ g, np.outer(g, x.data), g

    return _result(w.data @ x.data + b.data, (x, w, b), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    c, h, w = x.shape
    n = h * w

    def backward(g):
        return (np.broadcast_to((g / n)[:, None, None], x.shape).astype(x.dtype),)

    return _result(x.data.mean(axis=(1, 2)), (x,), backward)


# -- convolution ------------------------------------------------------------

def _zero_pad(a: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return a
    c, h, w = a.shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=a.dtype)
    out[:, pad:pad + h, pad:pad + w] = a
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(shape[0], k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2D cross-correlation of a ``[C_in, H, W]`` map."""
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d expects x[C,H,W] and w[O,C,K,K], got {x.shape}, {w.shape}")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square and odd, got {k}x{k2}")
    if c_in != x.shape[0] or b.shape != (c_out,):
        raise ValueError(f"conv2d shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _, h, wd = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output extent non-positive for input {x.shape}")
    xp = _zero_pad(x.data, pad)
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = w.data.reshape(c_out, -1)
    out = (w2 @ cols).reshape(c_out, ho, wo) + b.data[:, None, None]

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gx = None
        if x.requires_grad:
            gxp = _col2im(w2.T @ g2, xp.shape, k, stride, ho, wo)
            gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, w, b), backward)


# -- bilinear sampling and deformable convolution ---------------------------

def _gather_bilinear(x: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """Sample ``x[G, Cg, H, W]`` at per-group coordinates ``rows/cols[G, M]``.

    Returns the sampled values ``[G, Cg, M]`` and a cache for the backward pass.
    Neighbours outside the map contribute zero.
    """
    g, cg, h, w = x.shape
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = (rows - r0).astype(x.dtype, copy=False)
    fc = (cols - c0).astype(x.dtype, copy=False)
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    # All four neighbours at once: corner axis first, out-of-map taps read index 0 and are masked.
    rr = r0[None] + np.array([0, 0, 1, 1]).reshape(4, 1, 1)
    cc = c0[None] + np.array([0, 1, 0, 1]).reshape(4, 1, 1)
    ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    ii = np.where(ok, rr * w + cc, 0)
    base = (np.arange(g * cg, dtype=np.int64) * (h * w)).reshape(g, cg, 1)
    vals4 = x.reshape(-1)[base[None] + ii[:, :, None, :]]
    vals4 *= ok[:, :, None, :]
    idx, valid, vals = list(ii), list(ok), list(vals4)
    v00, v01, v10, v11 = vals
    frb = fr[:, None, :]
    fcb = fc[:, None, :]
    out = (1 - frb) * ((1 - fcb) * v00 + fcb * v01) + frb * ((1 - fcb) * v10 + fcb * v11)
    return out, (fr, fc, idx, valid, vals)


def _scatter_bilinear(gout: np.ndarray, cache, shape) -> np.ndarray:
    """Adjoint of ``_gather_bilinear`` with respect to the sampled map."""
    g, cg, h, w = shape
    fr, fc, idx, valid, _ = cache
    weights = ((1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc)
    base = (np.arange(g * cg, dtype=np.int64) * (h * w)).reshape(g, cg, 1)
    flat_idx = []
    contrib = []
    for ii, ok, wt in zip(idx, valid, weights):
        flat_idx.append((base + ii[:, None, :]).ravel())
        contrib.append((gout * (wt * ok)[:, None, :]).ravel())
    total = np.bincount(np.concatenate(flat_idx), weights=np.concatenate(contrib),
                        minlength=g * cg * h * w)
    return total.astype(gout.dtype, copy=False).reshape(shape)


def _coord_grads(gout: np.ndarray, cache):
    """d(loss)/d(row), d(loss)/d(col) summed over the channels of each group."""
    fr, fc, _, _, (v00, v01, v10, v11) = cache
    frb = fr[:, None, :]
    fcb = fc[:, None, :]
    dval_dr = (1 - fcb) * (v10 - v00) + fcb * (v11 - v01)
    dval_dc = (1 - frb) * (v01 - v00) + frb * (v11 - v10)
    return (gout * dval_dr).sum(axis=1), (gout * dval_dc).sum(axis=1)


def bilinear_sample(x: Tensor, row, col) -> Tensor:
    """Bilinearly sample a ``[H, W]`` map at (row, col), zero outside the map.

    ``row`` and ``col`` may be numbers or tensors of a common shape; the result
    has that shape and is differentiable in ``x`` and in the coordinates.
    """
    if x.ndim != 2:
        raise ValueError(f"bilinear_sample expects x[H,W], got {x.shape}")
    row_t = _lift(row, np.float64)
    col_t = _lift(col, np.float64)
    out_shape = np.broadcast_shapes(row_t.shape, col_t.shape)
    rows = np.broadcast_to(row_t.data, out_shape).reshape(1, -1).astype(np.float64)
    cols = np.broadcast_to(col_t.data, out_shape).reshape(1, -1).astype(np.float64)
    h, w = x.shape
    vals, cache = _gather_bilinear(x.data.reshape(1, 1, h, w), rows, cols)

    def backward(g):
        g3 = g.reshape(1, 1, -1).astype(x.dtype, copy=False)
        gx = _scatter_bilinear(g3, cache, (1, 1, h, w)).reshape(h, w) if x.requires_grad else None
        gr = gc = None
        if row_t.requires_grad or col_t.requires_grad:
            dr, dc = _coord_grads(g3, cache)
            gr = _unbroadcast(dr.reshape(out_shape), row_t.shape)
            gc = _unbroadcast(dc.reshape(out_shape), col_t.shape)
        return gx, gr, gc

    return _result(vals.reshape(out_shape), (x, row_t, col_t), backward)


def deform_conv2d(x: Tensor, offsets: Tensor, w: Tensor, b: Tensor, groups: int = 1) -> Tensor:
    """Deformable convolution (no modulation), stride 1, same padding.

    ``offsets`` has shape ``[groups, 2K^2, H, W]`` holding (d_row, d_col) pairs
    per kernel tap in row-major tap order. Offset group ``g`` displaces the taps
    of input channels ``[g*C/groups, (g+1)*C/groups)``.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"deform_conv2d expects x[C,H,W] and w[O,C,K,K], got {x.shape}, {w.shape}")
    c_in, h, wd = x.shape
    c_out, wc, k, k2 = w.shape
    if k != k2 or k % 2 == 0 or wc != c_in or b.shape != (c_out,):
        raise ValueError(f"deform_conv2d shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    if groups < 1 or c_in % groups:
        raise ValueError(f"{c_in} input channels not divisible into {groups} groups")
    kk = k * k
    if offsets.shape != (groups, 2 * kk, h, wd):
        raise ValueError(f"offsets must be {(groups, 2 * kk, h, wd)}, got {offsets.shape}")
    cg = c_in // groups
    half = (k - 1) // 2
    n = h * wd
    tap_r, tap_c = np.divmod(np.arange(kk), k)
    base_r = (np.arange(h)[:, None] + np.zeros(wd)[None, :]).ravel()
    base_c = (np.zeros(h)[:, None] + np.arange(wd)[None, :]).ravel()
    off = offsets.data.reshape(groups, kk, 2, n).astype(np.float64)
    rows = (base_r[None, None, :] + (tap_r - half)[None, :, None] + off[:, :, 0]).reshape(groups, kk * n)
    cols = (base_c[None, None, :] + (tap_c - half)[None, :, None] + off[:, :, 1]).reshape(groups, kk * n)
    sampled, cache = _gather_bilinear(x.data.reshape(groups, cg, h, wd), rows, cols)
    colmat = sampled.reshape(c_in * kk, n)
    w2 = w.data.reshape(c_out, -1)
    out = (w2 @ colmat).reshape(c_out, h, wd) + b.data[:, None, None]

    def backward(g):
        g2 = g.reshape(c_out, n)
        gx = goff = None
        gcols = (w2.T @ g2).reshape(groups, cg, kk * n)
        if x.requires_grad:
            gx = _scatter_bilinear(gcols, cache, (groups, cg, h, wd)).reshape(x.shape)
        if offsets.requires_grad:
            dr, dc = _coord_grads(gcols, cache)
            goff = np.stack([dr.reshape(groups, kk, n), dc.reshape(groups, kk, n)], axis=2)
            goff = goff.reshape(offsets.shape).astype(offsets.dtype, copy=False)
        gw = (g2 @ colmat.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b.requires_grad else None
        return gx, goff, gw, gb

    return _result(out, (x, offsets, w, b), backward)


# -- resampling ---------------------------------------------------------------

def pool2d(x: Tensor, kind: str = "avg", k: int = 2, stride: int = 2, pad: int = 0) -> Tensor:
    """Average pooling; padded positions count as zeros in a k*k window."""
    if kind != "avg":
        raise ValueError(f"unsupported pooling kind {kind!r}")
    if k < 1 or stride < 1:
        raise ValueError("pool kernel and stride must be >= 1")
    c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"pool2d output extent non-positive for input {x.shape}")
    xp = _zero_pad(x.data, pad)
    acc = np.zeros((c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            acc += xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    inv = 1.0 / (k * k)

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gs = g * inv
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gs
        return (gxp[:, pad:pad + h, pad:pad + w] if pad else gxp,)

    return _result(acc * inv, (x,), backward)


@lru_cache(maxsize=64)
def _interp_matrix(n: int, factor: int) -> np.ndarray:
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    lam = src - i0
    m = np.zeros((n * factor, n))
    rows = np.arange(n * factor)
    np.add.at(m, (rows, i0), 1 - lam)
    np.add.at(m, (rows, i1), lam)
    m.flags.writeable = False
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling with half-pixel centres (align_corners=False)."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return x
    c, h, w = x.shape
    mr = _interp_matrix(h, factor).astype(x.dtype)
    mc = _interp_matrix(w, factor).astype(x.dtype)
    out = np.matmul(np.matmul(mr, x.data), mc.T)

    def backward(g):
        return (np.matmul(np.matmul(mr.T, g), mc),)

    return _result(out, (x,), backward)


# -- verification -----------------------------------------------------------

def finite_diff_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Iterable[Tensor],
    h: float = 1e-4,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``f`` is called as ``f(x)`` when ``x`` is a single tensor, otherwise as
    ``f()`` with the tensors in ``x`` mutated in place. With ``coords`` set, only
    that many randomly chosen scalar coordinates (across all tensors) are
    perturbed. Data should be float64 for meaningful results.
    """
    single = isinstance(x, Tensor)
    tensors = [x] if single else list(x)

    def call():
        return f(x) if single else f()

    saved = [(t.requires_grad, t.grad) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss = call()
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    sizes = [t.data.size for t in tensors]
    total = int(sum(sizes))
    if coords is None or coords >= total:
        picks = np.arange(total)
    else:
        rng = rng or np.random.default_rng(0)
        picks = np.sort(rng.choice(total, size=coords, replace=False))
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    with no_grad():
        for p in picks:
            ti = int(np.searchsorted(offsets, p, side="right") - 1)
            j = int(p - offsets[ti])
            flat = tensors[ti].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = float(call().data)
            flat[j] = orig - h
            fm = float(call().data)
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic[ti].reshape(-1)[j])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    for t, (rg, gr) in zip(tensors, saved):
        t.requires_grad, t.grad = rg, gr
    return worst
