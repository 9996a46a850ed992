"""Differentiable operations over :class:`~egomtl.tensor.Tensor`.

Each function computes its forward value with NumPy and registers a
backward rule returning one gradient (or ``None``) per tensor input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from egomtl import kernels
from egomtl.errors import ConfigurationError, DimensionError
from egomtl.tensor import Tensor, unbroadcast

Scalar = Union[int, float]


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=like.dtype)
    out.requires_grad = False
    out.name = None
    out._grad = None
    out._node = None
    return out


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for a {ndim}-d tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise DimensionError(f"expected a triple, got {v}")
    return v


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (unbroadcast(g, sa) if a.requires_grad else None,
                unbroadcast(g, sb) if b.requires_grad else None)

    return Tensor._from_op(a.data + b.data, "add", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (unbroadcast(g * b.data, sa) if a.requires_grad else None,
                unbroadcast(g * a.data, sb) if b.requires_grad else None)

    return Tensor._from_op(a.data * b.data, "mul", (a, b), bw)


def scalar_mul(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)
    return Tensor._from_op(a.data * a.dtype.type(s), "scalar_mul", (a,),
                           lambda g: (g * g.dtype.type(s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, a.dtype.type(0)), "relu", (a,),
                           lambda g: (g * mask,))


# -- shape / reductions -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._from_op(out, "reshape", (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    axes = _norm_axes(axis, a.ndim)
    src = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src).copy(),)

    return Tensor._from_op(a.data.sum(axis=axes), "sum", (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scalar_mul(sum(a, axes), 1.0 / count)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return Tensor._from_op(out, "stack", tensors, bw)


def pick(a: Tensor, index) -> Tensor:
    """``out[b] = a[b, index[b]]`` for a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"pick needs [B,K] and [B] indices, got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])
    src = a.shape

    def bw(g):
        out = np.zeros(src, dtype=g.dtype)
        out[rows, index] = g
        return (out,)

    return Tensor._from_op(a.data[rows, index], "pick", (a,), bw)


def masked_select(a: Tensor, mask) -> Tensor:
    """Flatten the entries of ``a`` where ``mask`` is true into a 1-D tensor."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} differs from tensor shape {a.shape}")
    src = a.shape

    def bw(g):
        out = np.zeros(src, dtype=g.dtype)
        out[mask] = g
        return (out,)

    return Tensor._from_op(a.data[mask], "masked_select", (a,), bw)


def euclidean_norm(a: Tensor, axis: int = -1) -> Tensor:
    """L2 norm along ``axis``; the gradient at the origin is taken as zero."""
    (ax,) = _norm_axes(axis, a.ndim)
    n = np.sqrt((a.data * a.data).sum(axis=ax))

    def bw(g):
        nk = np.expand_dims(n, ax)
        safe = np.where(nk > 0, nk, 1)
        return (np.where(nk > 0, a.data / safe, 0) * np.expand_dims(g, ax),)

    return Tensor._from_op(n, "euclidean_norm", (a,), bw)


# -- softmax family ------------------------------------------------------------

def softmax(a: Tensor, axes=-1) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    z = a.data - a.data.max(axis=axes, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axes, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axes, keepdims=True)),)

    return Tensor._from_op(y, "softmax", (a,), bw)


def log_softmax(a: Tensor, axes=-1) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    z = a.data - a.data.max(axis=axes, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axes, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axes, keepdims=True),)

    return Tensor._from_op(out, "log_softmax", (a,), bw)


# -- dense layers ---------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x[B, F] @ weight[F, K] + bias[K]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    inputs = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        inputs = (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data.T if x.requires_grad else None,
                 x.data.T @ g if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return Tensor._from_op(out, "linear", inputs, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over every axis after the first two: ``[B, C, ...] -> [B, C]``."""
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool needs at least 3 axes, got {x.shape}")
    return mean(x, tuple(range(2, x.ndim)))


def conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation over (t, h, w) of ``x[B, C_in, T, H, W]``."""
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    if x.ndim != 5 or kernel.ndim != 5:
        raise DimensionError(f"conv3d needs 5-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, T, H, W = x.shape
    O, Ck, kt, kh, kw = kernel.shape
    if C != Ck:
        raise DimensionError(f"conv3d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if min(st, sh, sw) < 1:
        raise DimensionError(f"conv3d stride must be >= 1, got {(st, sh, sw)}")
    if T + 2 * pt < kt or H + 2 * ph < kh or W + 2 * pw < kw:
        raise DimensionError(f"conv3d kernel {kernel.shape[2:]} larger than padded input {x.shape[2:]}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv3d bias {bias.shape} does not match {O} output channels")
    To = kernels.out_extent(T, kt, st, pt)
    Ho = kernels.out_extent(H, kh, sh, ph)
    Wo = kernels.out_extent(W, kw, sw, pw)

    cols = kernels.vol2col(x.data, kt, kh, kw, st, sh, sw, pt, ph, pw)
    wmat = kernel.data.reshape(O, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, O, To, Ho, Wo)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g = g.reshape(B, O, To * Ho * Wo)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if x.requires_grad:
            gx = kernels.col2vol(np.matmul(wmat.T, g), C, T, H, W, kt, kh, kw, st, sh, sw, pt, ph, pw)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return Tensor._from_op(out, "conv3d", inputs, bw)


def max_pool3d(x: Tensor, kernel_size=2, stride=None) -> Tensor:
    kt, kh, kw = _triple(kernel_size)
    st, sh, sw = _triple(stride if stride is not None else kernel_size)
    if x.ndim != 5:
        raise DimensionError(f"max_pool3d needs a 5-d input, got {x.shape}")
    B, C, T, H, W = x.shape
    if T < kt or H < kh or W < kw:
        raise DimensionError(f"max_pool3d window {(kt, kh, kw)} larger than input {x.shape[2:]}")
    cols = kernels.py_vol2col(x.data.reshape(B * C, 1, T, H, W), kt, kh, kw, st, sh, sw, 0, 0, 0)
    To, Ho, Wo = (T - kt) // st + 1, (H - kh) // sh + 1, (W - kw) // sw + 1
    arg = cols.argmax(axis=1)  # [B*C, P]
    out = np.take_along_axis(cols, arg[:, None, :], axis=1)[:, 0, :].reshape(B, C, To, Ho, Wo)

    def bw(g):
        gcols = np.zeros_like(cols)
        np.put_along_axis(gcols, arg[:, None, :], g.reshape(B * C, 1, -1), axis=1)
        gx = kernels.py_col2vol(gcols, 1, T, H, W, kt, kh, kw, st, sh, sw, 0, 0, 0)
        return (gx.reshape(x.shape),)

    return Tensor._from_op(out, "max_pool3d", (x,), bw)


# -- batch normalization ---------------------------------------------------------

@dataclass
class RunningStats:
    """Per-channel running mean/variance; ``None`` until the first training pass."""

    num_channels: int
    momentum: float = 0.9
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None

    @property
    def ready(self) -> bool:
        return self.mean is not None and self.var is not None

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        if not self.ready:
            self.mean = np.zeros(self.num_channels, dtype=batch_mean.dtype)
            self.var = np.ones(self.num_channels, dtype=batch_mean.dtype)
        m = self.momentum
        self.mean = (m * self.mean + (1 - m) * batch_mean).astype(batch_mean.dtype)
        self.var = (m * self.var + (1 - m) * batch_var_unbiased).astype(batch_mean.dtype)


def batchnorm3d(x: Tensor, scale: Tensor, shift: Tensor, mode: str, running: RunningStats,
                eps: float = 1e-5) -> Tensor:
    if x.ndim != 5:
        raise DimensionError(f"batchnorm3d needs a 5-d input, got {x.shape}")
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise DimensionError(f"batchnorm3d params {scale.shape}/{shift.shape} do not match {C} channels")
    axes = (0, 2, 3, 4)
    bshape = (1, C, 1, 1, 1)
    n = x.size // C
    dt = x.dtype.type
    if mode == "train":
        if n < 2:
            raise DimensionError(f"batchnorm3d in train mode needs >= 2 values per channel, got {x.shape}")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        invstd = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
        xhat = xc * invstd.reshape(bshape)
        running.update(mu, var * dt(n / (n - 1)))
        out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

        def bw(g):
            gscale = (g * xhat).sum(axis=axes)
            gshift = g.sum(axis=axes)
            gx = None
            if x.requires_grad:
                gxhat = g * scale.data.reshape(bshape)
                gx = (invstd.reshape(bshape) / dt(n)) * (
                    dt(n) * gxhat
                    - gxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
            return (gx,
                    gscale if scale.requires_grad else None,
                    gshift if shift.requires_grad else None)

    elif mode == "eval":
        if not running.ready:
            raise ConfigurationError("batchnorm3d eval mode requested before any running statistics exist")
        invstd = (1.0 / np.sqrt(running.var + dt(eps))).astype(x.dtype)
        xhat = (x.data - running.mean.astype(x.dtype).reshape(bshape)) * invstd.reshape(bshape)
        out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

        def bw(g):
            return (g * (scale.data * invstd).reshape(bshape) if x.requires_grad else None,
                    (g * xhat).sum(axis=axes) if scale.requires_grad else None,
                    g.sum(axis=axes) if shift.requires_grad else None)
    else:
        raise ConfigurationError(f"unknown batchnorm mode {mode!r}")

    return Tensor._from_op(out.astype(x.dtype, copy=False), "batchnorm3d", (x, scale, shift), bw)
