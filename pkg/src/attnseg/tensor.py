"""Dense float64 tensors with reverse-mode automatic differentiation.

Every network operation in this package is built from the primitives in this
module. Tensors hold a numpy array plus an optional gradient buffer; each op
that touches a ``requires_grad`` tensor records a backward rule, and
``Tensor.backward()`` replays the recorded graph in reverse topological order
(one visit per node, gradients accumulating across fan-out). After a backward
sweep the recorded graph is released; calling backward again on the same graph
raises :class:`TapeConsumedError`.

Conventions fixed here:
    * everything is float64,
    * convolution is cross-correlation (no kernel flip),
    * bilinear resampling uses half-pixel source centers with edge clamping,
    * ReLU's subgradient at 0 is 0,
    * max reductions route gradient to the first (row-major) maximum.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class TapeConsumedError(RuntimeError):
    """backward() was called on a graph already swept (and released)."""


_grad_enabled = True
_nan_checks = False


def set_nan_checks(enabled: bool) -> None:
    """Toggle the debug mode that rejects non-finite op outputs."""
    global _nan_checks
    _nan_checks = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference/eval mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    # contiguity matters: the grad checker perturbs flat views in place
    # (np.ascontiguousarray alone would promote 0-d scalars to 1-d)
    arr = np.asarray(value, dtype=np.float64)
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)


class Tensor:
    """A float64 n-d array participating in a reverse-mode gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward_fn = None
        self._consumed = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Reverse sweep from this scalar, populating grads of reachable leaves.

        The recorded op nodes form the gradient tape; they are visited exactly
        once in reverse topological order and then released, so a second call
        on the same graph raises :class:`TapeConsumedError`.
        """
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise TapeConsumedError("backward() already consumed this graph")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise TapeConsumedError("graph shares nodes with an already-consumed tape")
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node)
        for node in order:
            if node._backward_fn is not None:
                node._backward_fn = None
                node._parents = ()
                node._consumed = True
                if node is not self:
                    node.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn, name: str) -> Tensor:
    if _nan_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by '{name}'")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # own the buffer
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(out):
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(out):
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(-out.grad, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(out):
        _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(out):
        _accum(a, _unbroadcast(out.grad / b.data, a.shape))
        _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward(out):
        _accum(a, -out.grad)

    return _make(-a.data, (a,), backward, "neg")


def exp(a) -> Tensor:
    a = _wrap(a)
    y = np.exp(a.data)

    def backward(out):
        _accum(a, out.grad * y)

    return _make(y, (a,), backward, "exp")


def log(a) -> Tensor:
    a = _wrap(a)

    def backward(out):
        _accum(a, out.grad / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def sqrt(a) -> Tensor:
    a = _wrap(a)
    y = np.sqrt(a.data)

    def backward(out):
        _accum(a, out.grad / (2.0 * y))

    return _make(y, (a,), backward, "sqrt")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is 1 strictly inside, 0 at/after the rails."""
    a = _wrap(a)
    mask = (a.data > lo) & (a.data < hi)

    def backward(out):
        _accum(a, out.grad * mask)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clip")


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0  # subgradient at 0 is 0

    def backward(out):
        _accum(a, out.grad * mask)

    return _make(np.maximum(a.data, 0.0), (a,), backward, "relu")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(out):
        _accum(a, out.grad * y * (1.0 - y))

    return _make(y, (a,), backward, "sigmoid")


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)

    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape) / count)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)

    def backward(out):
        _accum(a, out.grad.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)

    def backward(out):
        _accum(a, out.grad.swapaxes(ax1, ax2))

    return _make(a.data.swapaxes(ax1, ax2), (a,), backward, "swapaxes")


def broadcast_batch(a, n: int) -> Tensor:
    """Stack a tensor n times along a new leading (batch) axis."""
    a = _wrap(a)

    def backward(out):
        _accum(a, out.grad.sum(axis=0))

    data = np.broadcast_to(a.data[None], (n,) + a.shape).copy()
    return _make(data, (a,), backward, "broadcast_batch")


def concat_channels(tensors) -> Tensor:
    """Concatenate along axis 1 (channels); all other extents must agree."""
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = ts[0].shape
    for t in ts[1:]:
        s = t.shape
        if len(s) != len(ref) or s[0] != ref[0] or s[2:] != ref[2:]:
            raise ShapeError(f"concat_channels extents mismatch: {ref} vs {s}")
    offsets = np.cumsum([0] + [t.shape[1] for t in ts])

    def backward(out):
        for t, start, stop in zip(ts, offsets[:-1], offsets[1:]):
            _accum(t, out.grad[:, start:stop])

    return _make(np.concatenate([t.data for t in ts], axis=1), tuple(ts), backward, "concat_channels")


# ---------------------------------------------------------------------------
# matrix product and softmax
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents mismatch: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(out):
        _accum(a, _unbroadcast(np.matmul(out.grad, b.data.swapaxes(-1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), out.grad), b.shape))

    return _make(data, (a, b), backward, "matmul")


def softmax(a, axis: int) -> Tensor:
    """Max-subtracted softmax along `axis`; slices sum to 1."""
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(out):
        g = out.grad
        _accum(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# spatial ops (NCHW)
# ---------------------------------------------------------------------------


def _require_nchw(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an (N, C, H, W) tensor, got {x.shape}")


def _im2col(data: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Flatten sliding windows into a GEMM-ready (N*ho*wo, C*kh*kw) matrix."""
    n, c, h, w = data.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C, ho, wo, kh, kw)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def _corr(data: np.ndarray, weights: np.ndarray, stride: int, padding: int):
    """Raw cross-correlation; returns (out NCHW, im2col matrix, ho, wo)."""
    n = data.shape[0]
    k, c, kh, kw = weights.shape
    cols, ho, wo = _im2col(data, kh, kw, stride, padding)
    out = (cols @ weights.reshape(k, c * kh * kw).T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    return out, cols, ho, wo


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x (N,C,H,W) with w (K,C,kh,kw); floor output sizing."""
    x, w = _wrap(x), _wrap(w)
    _require_nchw(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weights must be (K, C, kh, kw), got {w.shape}")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(
            f"conv2d kernel ({kh}x{kw}) exceeds padded input ({h + 2 * padding}x{wd + 2 * padding})"
        )
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _conv2d_1x1(x, w, bias)
    out, cols, ho, wo = _corr(x.data, w.data, stride, padding)
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (k,):
            raise ShapeError(f"conv2d bias must be ({k},), got {bias.shape}")
        out = out + bias.data.reshape(1, k, 1, 1)

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(o):
        gout = o.grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        _accum(w, (gout.T @ cols).reshape(w.shape))
        if bias is not None:
            _accum(bias, o.grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            if stride == 1 and kh == kw and kh - 1 - padding >= 0:
                # input gradient is correlation with the spatially flipped,
                # channel-transposed kernel (one more GEMM)
                wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx, _, _, _ = _corr(
                    np.ascontiguousarray(o.grad), wt, stride=1, padding=kh - 1 - padding
                )
                _accum(x, gx)
            else:
                gcols = (gout @ w.data.reshape(k, c * kh * kw)).reshape(n, ho, wo, c, kh, kw)
                gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                if padding:
                    gxp = gxp[:, :, padding : padding + h, padding : padding + wd]
                _accum(x, gxp)

    return _make(out, parents, backward, "conv2d")


def _conv2d_1x1(x: Tensor, w: Tensor, bias) -> Tensor:
    """Pointwise convolution as a plain channel matmul (no im2col)."""
    n, c, h, wd = x.shape
    k = w.shape[0]
    wmat = w.data.reshape(k, c)
    x3 = x.data.reshape(n, c, h * wd)
    out = np.matmul(wmat, x3).reshape(n, k, h, wd)
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (k,):
            raise ShapeError(f"conv2d bias must be ({k},), got {bias.shape}")
        out = out + bias.data.reshape(1, k, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(o):
        g3 = o.grad.reshape(n, k, h * wd)
        _accum(w, np.matmul(g3, x3.swapaxes(1, 2)).sum(axis=0).reshape(w.shape))
        if bias is not None:
            _accum(bias, o.grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accum(x, np.matmul(wmat.T, g3).reshape(x.shape))

    return _make(out, parents, backward, "conv2d")


def max_pool2d(x, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max pool; -inf padding; gradient routes to the first row-major max."""
    x = _wrap(x)
    _require_nchw(x, "max_pool2d")
    n, c, h, w = x.shape
    xp = np.pad(
        x.data,
        ((0, 0), (0, 0), (padding, padding), (padding, padding)),
        constant_values=-np.inf,
    )
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(o):
        ai, aj = np.divmod(idx, kernel)
        oy = np.arange(ho).reshape(1, 1, ho, 1)
        ox = np.arange(wo).reshape(1, 1, 1, wo)
        iy = oy * stride + ai - padding
        ix = ox * stride + aj - padding
        ni = np.arange(n).reshape(n, 1, 1, 1)
        ci = np.arange(c).reshape(1, c, 1, 1)
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        g = np.zeros_like(x.data)
        np.add.at(
            g,
            (
                np.broadcast_to(ni, idx.shape)[valid],
                np.broadcast_to(ci, idx.shape)[valid],
                iy[valid],
                ix[valid],
            ),
            o.grad[valid],
        )
        _accum(x, g)

    return _make(out, (x,), backward, "max_pool2d")


def avg_pool2d_2x(x) -> Tensor:
    """2x2 stride-2 average pool; spatial extents must be even."""
    x = _wrap(x)
    _require_nchw(x, "avg_pool2d_2x")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d_2x needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(o):
        _accum(x, np.repeat(np.repeat(o.grad, 2, axis=2), 2, axis=3) / 4.0)

    return _make(out, (x,), backward, "avg_pool2d_2x")


def global_max_pool(x) -> Tensor:
    """Spatial max per channel -> (N, C, 1, 1); first max gets the gradient."""
    x = _wrap(x)
    _require_nchw(x, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

    def backward(o):
        g = np.zeros((n, c, h * w))
        np.put_along_axis(g, idx[..., None], o.grad.reshape(n, c, 1), axis=2)
        _accum(x, g.reshape(x.shape))

    return _make(out, (x,), backward, "global_max_pool")


def global_avg_pool(x) -> Tensor:
    """Spatial mean per channel -> (N, C, 1, 1)."""
    x = _wrap(x)
    _require_nchw(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(o):
        _accum(x, np.broadcast_to(o.grad, x.shape) / (h * w))

    return _make(out, (x,), backward, "global_avg_pool")


def _linear_coeffs(n_src: int, n_dst: int):
    """Half-pixel-center source indices/weights for 1-d linear resampling."""
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    i0 = np.clip(lo, 0, n_src - 1)
    i1 = np.clip(lo + 1, 0, n_src - 1)
    return i0, i1, frac


def _interp_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """(n_dst, n_src) matrix applying 1-d half-pixel linear resampling."""
    i0, i1, frac = _linear_coeffs(n_src, n_dst)
    m = np.zeros((n_dst, n_src))
    rows = np.arange(n_dst)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


_upsample_cache: dict = {}


def bilinear_upsample_2x(x) -> Tensor:
    """Double H and W by bilinear interpolation (half-pixel centers)."""
    x = _wrap(x)
    _require_nchw(x, "bilinear_upsample_2x")
    n, c, h, w = x.shape
    key = (h, w)
    if key not in _upsample_cache:
        _upsample_cache[key] = (_interp_matrix(h, 2 * h), _interp_matrix(w, 2 * w))
    my, mx = _upsample_cache[key]  # (2H, H), (2W, W)
    out = np.matmul(np.matmul(my, x.data), mx.T)

    def backward(o):
        _accum(x, np.matmul(np.matmul(my.T, o.grad), mx))

    return _make(out, (x,), backward, "bilinear_upsample_2x")


# ---------------------------------------------------------------------------
# batch normalization (composite; running stats updated outside the graph)
# ---------------------------------------------------------------------------


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W) of an NCHW tensor.

    Train mode normalizes with batch statistics (differentiating through
    them) and updates the running buffers in place by EMA with the biased
    batch variance. Eval mode treats the running buffers as constants.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    _require_nchw(x, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine params must be ({c},)")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c)
    else:
        mu = running_mean.reshape(1, c, 1, 1)
        centered = x.data - mu
        var = running_var.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    def backward(o):
        g = o.grad
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * g4
            if training:
                # batch statistics depend on x: classic fused expression
                # dx = inv/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                _accum(x, (inv / m) * (m * dxhat - s1 - xhat * s2))
            else:
                _accum(x, dxhat * inv)

    return _make(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    """Outcome of a central-difference check against recorded gradients."""

    max_rel_error: float
    coords_checked: int
    skipped: list = field(default_factory=list)  # (tensor_idx, flat_coord) at kinks


def finite_diff_grad_check(
    f,
    wrt,
    eps: float = 1e-4,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare f's recorded gradients with central differences.

    f must be a deterministic scalar-valued callable of no arguments that
    reads the tensors in `wrt` (normalization layers should run with frozen
    statistics so repeated evaluations agree). The relative error per
    coordinate is |analytic - numeric| / max(1, |analytic| + |numeric|).

    Nondifferentiable coordinates (a ReLU or max kink inside the probed
    window) are flagged in `skipped` instead of scored. Detection uses two
    step sizes: a kink leaves the central differences at eps and eps/2
    inconsistent, and a kink sitting exactly at the base point leaves the
    one-sided mismatch |fwd - bwd| unchanged across scales (for smooth f it
    shrinks linearly with the step).
    """
    tensors = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    for t in tensors:
        t.grad = None
    out = f()
    if out.size != 1:
        raise ValueError(f"finite_diff_grad_check needs a scalar f, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    checked = 0
    skipped: list = []
    half = eps / 2.0
    with no_grad():
        f0 = float(f().data)
        for ti, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
                gen = rng if rng is not None else np.random.default_rng(0)
                coords = gen.choice(flat.size, size=max_coords_per_tensor, replace=False)
            a_flat = analytic[ti].reshape(-1)
            for ci in coords:
                orig = flat[ci]

                def probe(step):
                    flat[ci] = orig + step
                    fp = float(f().data)
                    flat[ci] = orig - step
                    fm = float(f().data)
                    flat[ci] = orig
                    return (fp - fm) / (2.0 * step), (fp - f0) / step, (f0 - fm) / step

                c1, fwd1, bwd1 = probe(eps)
                c2, fwd2, bwd2 = probe(half)
                scale = max(1.0, abs(c1), abs(c2))
                m1 = abs(fwd1 - bwd1)
                m2 = abs(fwd2 - bwd2)
                crossing = abs(c1 - c2) > 1e-7 + 5e-5 * scale
                at_point = m1 > 1e-7 + 2e-5 * scale and m2 > 0.66 * m1
                if crossing or at_point:
                    skipped.append((ti, int(ci)))
                    continue
                rel = abs(a_flat[ci] - c2) / max(1.0, abs(a_flat[ci]) + abs(c2))
                worst = max(worst, rel)
                checked += 1
    return GradCheckResult(max_rel_error=worst, coords_checked=checked, skipped=skipped)
