"""Dense float tensors with reverse-mode gradients.

Everything downstream (tokenizers, attention, readouts, losses) is built
from the primitives in this module.  Forward values are plain numpy
arrays; each differentiable op records a backward closure so that
``Tensor.backward()`` can accumulate gradients by walking the graph in
reverse topological order.

Two dtypes are supported: float32 for training and float64 for
finite-difference verification.  Scalar constants are cast to the
partner tensor's dtype so mixed-precision promotion never happens by
accident.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _special

from .exceptions import DimensionError

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class RngState:
    """Seed plus the generator algorithm it feeds.

    The stream is numpy's PCG64, which produces identical output for an
    identical seed on every platform.
    """

    seed: int
    algorithm: str = "pcg64"

    def generator(self) -> np.random.Generator:
        if self.algorithm != "pcg64":
            raise ValueError(f"unknown rng algorithm: {self.algorithm}")
        return np.random.Generator(np.random.PCG64(self.seed))


def make_rng(seed: int) -> np.random.Generator:
    return RngState(int(seed)).generator()


class Tensor:
    """N-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate gradients of `self` into every reachable leaf.

        ``seed`` defaults to ones, i.e. the gradient of ``sum(self)``.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise DimensionError("backward seed shape mismatch")
        _accum(self, seed)
        for node in reversed(_topo_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    # -- method-style wrappers -----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else _axis_count(self.data.shape, axis)
        return reduce_sum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


# -- graph plumbing ------------------------------------------------------------


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _from_op(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
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
            stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _axis_count(shape, axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


# -- arithmetic primitives -------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _from_op(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _from_op(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _from_op(-a.data, (a,), backward)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    c = float(exponent)
    data = a.data ** c

    def backward(g):
        _accum(a, g * c * a.data ** (c - 1.0))

    return _from_op(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcast batch dims; operands must be >= 2-d."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-d")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _from_op(data, (a, b), backward)


# -- elementwise nonlinearities ---------------------------------------------------


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _from_op(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _from_op(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * (0.5 / data))

    return _from_op(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _from_op(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0.0))

    return _from_op(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + _special.erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf).astype(x.dtype))

    return _from_op(data, (a,), backward)


def elu_plus_one(a: Tensor) -> Tensor:
    """x+1 for x>0, e^x otherwise; strictly positive, C1 at the origin."""
    x = a.data
    data = np.where(x > 0.0, x + 1.0, np.exp(np.minimum(x, 0.0)))

    def backward(g):
        _accum(a, g * np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0))).astype(x.dtype))

    return _from_op(data.astype(x.dtype), (a,), backward)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    # log(1+e^x) computed from the negative side to avoid overflow
    data = (np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)).astype(x.dtype)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        _accum(a, g * sig.astype(x.dtype))

    return _from_op(data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)

    def backward(g):
        _accum(a, g * ((a.data > lo) & (a.data < hi)).astype(a.dtype))

    return _from_op(data, (a,), backward)


# -- reductions -------------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape) if keepdims else np.full_like(a.data, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape))

    return _from_op(np.asarray(data), (a,), backward)


def reduce_max(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if isinstance(axis, int):
        _normalize_axis(axis, a.ndim)
    data_kd = a.data.max(axis=axis, keepdims=True)
    if keepdims:
        out = data_kd
    elif axis is None:
        out = data_kd.reshape(())
    else:
        out = np.squeeze(data_kd, axis=axis)

    def backward(g):
        if axis is None:
            gg = np.asarray(g).reshape((1,) * a.ndim)
        elif keepdims:
            gg = g
        else:
            gg = np.expand_dims(g, axis)
        # ties split the gradient evenly
        mask = (a.data == data_kd).astype(a.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)
        _accum(a, mask * gg)

    return _from_op(np.asarray(out), (a,), backward)


# -- structural ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _from_op(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _from_op(data, (a,), backward)


def take(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing with gradient scatter."""
    data = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        _accum(a, ga)

    return _from_op(data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    axis = _normalize_axis(axis, tensors[0].ndim)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, sz in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + sz)
            if t.requires_grad:
                _accum(t, g[tuple(sl)])
            start += sz

    return _from_op(data, tuple(tensors), backward)


def pad(a: Tensor, pad_width, value: float = 0.0) -> Tensor:
    data = np.pad(a.data, pad_width, mode="constant", constant_values=value)
    inner = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.data.shape))

    def backward(g):
        _accum(a, g[inner])

    return _from_op(data, (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    data = np.broadcast_to(a.data, shape)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _from_op(np.ascontiguousarray(data), (a,), backward)


# -- composite layers --------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; each slice sums to 1."""
    axis = _normalize_axis(axis, x.ndim)
    shift = x.data.max(axis=axis, keepdims=True)  # constant, gradient-free
    e = exp(sub(x, Tensor(shift)))
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError("layer_norm affine parameters must match the last axis")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mul(centered, centered).mean(axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gamma), beta)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: kept units scaled by 1/(1-rate) at train time."""
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return mul(x, Tensor(keep))


# -- image-shaped primitives --------------------------------------------------------


def extract_patches(x: Tensor, patch: int, stride: int):
    """Slide a patch x patch window over [B,c,h,w] with the given stride.

    Returns ([B, l, c*patch*patch], (rows, cols)); row k of the token axis
    is the flattened (c, patch, patch) window at grid position
    (k // cols, k % cols).  Windows that would overrun the image are
    dropped (floor formula).
    """
    if x.ndim != 4:
        raise DimensionError("extract_patches expects [B, c, h, w]")
    b, c, h, w = x.shape
    if patch > h or patch > w:
        raise DimensionError(f"patch {patch} exceeds image {h}x{w}")
    rows = (h - patch) // stride + 1
    cols = (w - patch) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(x.data, (patch, patch), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]  # [B,c,rows,cols,p,p]
    data = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(b, rows * cols, c * patch * patch)

    def backward(g):
        g6 = g.reshape(b, rows, cols, c, patch, patch).transpose(0, 3, 1, 2, 4, 5)
        gx = np.zeros_like(x.data)
        # for a fixed in-patch offset the grid -> pixel map is injective
        for di in range(patch):
            for dj in range(patch):
                gx[:, :, di : di + stride * (rows - 1) + 1 : stride,
                       dj : dj + stride * (cols - 1) + 1 : stride] += g6[:, :, :, :, di, dj]
        _accum(x, gx)

    return _from_op(data, (x,), backward), (rows, cols)


def bilinear_sample(features: Tensor, positions: Tensor) -> Tensor:
    """Sample [B,d,H,W] feature maps at continuous positions in [-1,1]^2.

    positions is [B,n,2] ordered (x, y) where x runs along the width.
    Pixel centers follow the half-pixel convention: x=-1 and x=1 are the
    outer edges, so column j sits at x = (2j+1)/W - 1.  Out-of-range
    positions are clamped to the border pixel.  Gradients flow to both
    the feature maps and the positions.
    """
    if features.ndim != 4 or positions.ndim != 3 or positions.shape[-1] != 2:
        raise DimensionError("bilinear_sample expects [B,d,H,W] features and [B,n,2] positions")
    bsz, depth, hh, ww = features.shape
    pos = positions.data
    u = (pos[..., 0] + 1.0) * (0.5 * ww) - 0.5  # [B,n] column coordinate
    v = (pos[..., 1] + 1.0) * (0.5 * hh) - 0.5  # row coordinate
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = (u - u0).astype(features.dtype)
    fv = (v - v0).astype(features.dtype)
    x0 = np.clip(u0, 0, ww - 1).astype(np.intp)
    x1 = np.clip(u0 + 1, 0, ww - 1).astype(np.intp)
    y0 = np.clip(v0, 0, hh - 1).astype(np.intp)
    y1 = np.clip(v0 + 1, 0, hh - 1).astype(np.intp)

    fmap = features.data.transpose(0, 2, 3, 1)  # [B,H,W,d]
    bidx = np.arange(bsz, dtype=np.intp)[:, None]
    f00 = fmap[bidx, y0, x0]
    f01 = fmap[bidx, y0, x1]
    f10 = fmap[bidx, y1, x0]
    f11 = fmap[bidx, y1, x1]
    w00 = ((1 - fv) * (1 - fu))[..., None]
    w01 = ((1 - fv) * fu)[..., None]
    w10 = (fv * (1 - fu))[..., None]
    w11 = (fv * fu)[..., None]
    data = w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11  # [B,n,d]

    def backward(g):
        if features.requires_grad:
            gf = np.zeros_like(fmap)
            np.add.at(gf, (bidx, y0, x0), g * w00)
            np.add.at(gf, (bidx, y0, x1), g * w01)
            np.add.at(gf, (bidx, y1, x0), g * w10)
            np.add.at(gf, (bidx, y1, x1), g * w11)
            _accum(features, gf.transpose(0, 3, 1, 2))
        if positions.requires_grad:
            dval_dfu = (1 - fv)[..., None] * (f01 - f00) + fv[..., None] * (f11 - f10)
            dval_dfv = (1 - fu)[..., None] * (f10 - f00) + fu[..., None] * (f11 - f01)
            gx = (g * dval_dfu).sum(axis=-1) * (0.5 * ww)
            gy = (g * dval_dfv).sum(axis=-1) * (0.5 * hh)
            _accum(positions, np.stack([gx, gy], axis=-1).astype(positions.dtype))

    return _from_op(data.astype(features.dtype), (features, positions), backward)


def maxpool3x3_same(x: Tensor) -> Tensor:
    """3x3 max pool, stride 1, on [B,d,H,W]; output shape equals input.

    Borders are padded with -inf so only real pixels can win.
    """
    if x.ndim != 4:
        raise DimensionError("maxpool3x3_same expects [B, d, H, W]")
    b, d, h, w = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="constant", constant_values=-np.inf)
    view = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    flat = view.reshape(b, d, h, w, 9)
    arg = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        bi, di, yi, xi = np.indices((b, d, h, w), sparse=False)
        src_y = yi + arg // 3 - 1
        src_x = xi + arg % 3 - 1
        np.add.at(gx, (bi, di, src_y, src_x), g)
        _accum(x, gx)

    return _from_op(np.ascontiguousarray(data), (x,), backward)


# -- parameter initialization --------------------------------------------------------


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     clip_sigmas: float = 2.0, dtype=np.float32) -> np.ndarray:
    """Samples from N(0, std^2) truncated at +/- clip_sigmas standard deviations.

    Inverse-CDF sampling: exactly one uniform draw per element, so the
    stream consumption is shape-deterministic.
    """
    lo = _special.ndtr(-clip_sigmas)
    hi = _special.ndtr(clip_sigmas)
    u = rng.random(shape)
    z = _special.ndtri(lo + u * (hi - lo))
    return (z * std).astype(dtype)
