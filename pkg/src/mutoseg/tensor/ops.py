"""Differentiable operators: exactly the set the segmentation network needs.

Every op computes its forward value eagerly and, when a Tape is active,
registers a closure implementing its vector-Jacobian product.  There is no
general broadcasting engine; each op supports the shapes the network uses.

In float64 the 3D convolution and trilinear upsampling accumulate their
output terms in a fixed documented order (input channel, then kz, ky, kx for
convolution; the eight interpolation corners z-major for upsampling), which
makes them bit-identical to plain reference loops written in the same order.
The float32 paths use BLAS matmul for speed.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .core import (
    Tensor,
    accum_grad,
    as_tensor,
    debug_nan_enabled,
    register,
    tracing,
)
from . import _convkernels as _ck


class OpError(ValueError):
    """Raised on shape or mode violations."""


def _finish(out: Tensor) -> Tensor:
    if debug_nan_enabled() and not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite values in op output")
    return out


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise OpError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    if tracing():
        def bwd(g):
            accum_grad(a, g)
            accum_grad(b, g)
        register(out, bwd)
    return _finish(out)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise OpError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)
    if tracing():
        def bwd(g):
            accum_grad(a, g * b.data)
            accum_grad(b, g * a.data)
        register(out, bwd)
    return _finish(out)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise OpError(f"div shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data / b.data)
    if tracing():
        def bwd(g):
            accum_grad(a, g / b.data)
            accum_grad(b, -g * a.data / (b.data * b.data))
        register(out, bwd)
    return _finish(out)


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or broadcastable constant array."""
    c = np.asarray(c, dtype=x.data.dtype)
    out = Tensor(x.data * c)
    if tracing():
        def bwd(g):
            accum_grad(x, g * c)
        register(out, bwd)
    return _finish(out)


def add_const(x: Tensor, c) -> Tensor:
    out = Tensor(x.data + np.asarray(c, dtype=x.data.dtype))
    if tracing():
        def bwd(g):
            accum_grad(x, g)
        register(out, bwd)
    return _finish(out)


def rsub_const(c, x: Tensor) -> Tensor:
    """c - x for constant c."""
    out = Tensor(np.asarray(c, dtype=x.data.dtype) - x.data)
    if tracing():
        def bwd(g):
            accum_grad(x, -g)
        register(out, bwd)
    return _finish(out)


def pow_const(x: Tensor, p: float) -> Tensor:
    """x ** p for constant p >= 0 (x assumed non-negative for fractional p)."""
    out = Tensor(np.power(x.data, p))
    if tracing():
        if p == 0:
            def bwd(g):
                accum_grad(x, np.zeros_like(x.data))
        else:
            def bwd(g):
                accum_grad(x, g * p * np.power(x.data, p - 1.0))
        register(out, bwd)
    return _finish(out)


def log_clamped(x: Tensor, floor: float = 1e-8) -> Tensor:
    """log(max(x, floor)); gradient is zero in the clamped region."""
    clamped = np.maximum(x.data, floor)
    out = Tensor(np.log(clamped))
    if tracing():
        mask = x.data > floor
        def bwd(g):
            accum_grad(x, np.where(mask, g / clamped, 0.0))
        register(out, bwd)
    return _finish(out)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if tracing():
        mask = x.data > 0
        def bwd(g):
            accum_grad(x, g * mask)
        register(out, bwd)
    return _finish(out)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    if tracing():
        def bwd(g):
            accum_grad(x, g * y * (1.0 - y))
        register(out, bwd)
    return _finish(out)


def softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    if tracing():
        def bwd(g):
            inner = (g * y).sum(axis=axis, keepdims=True)
            accum_grad(x, (g - inner) * y)
        register(out, bwd)
    return _finish(out)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(()))
    if tracing():
        def bwd(g):
            accum_grad(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))
        register(out, bwd)
    return _finish(out)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype).reshape(()))
    if tracing():
        def bwd(g):
            accum_grad(x, np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype))
        register(out, bwd)
    return _finish(out)


def sum_axes(x: Tensor, axes: tuple[int, ...], keepdims: bool = False) -> Tensor:
    axes = tuple(a % x.data.ndim for a in axes)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))
    if tracing():
        def bwd(g):
            gg = g
            if not keepdims:
                shape = list(x.data.shape)
                for a in axes:
                    shape[a] = 1
                gg = g.reshape(shape)
            accum_grad(x, np.broadcast_to(gg, x.data.shape).astype(x.data.dtype))
        register(out, bwd)
    return _finish(out)


def add_bias(x: Tensor, b: Tensor, axis: int) -> Tensor:
    """Add a 1-D bias along one axis of x."""
    axis = axis % x.data.ndim
    if b.data.shape != (x.data.shape[axis],):
        raise OpError(f"bias shape {b.data.shape} does not match axis {axis}")
    shape = [1] * x.data.ndim
    shape[axis] = -1
    out = Tensor(x.data + b.data.reshape(shape))
    if tracing():
        other = tuple(i for i in range(x.data.ndim) if i != axis)
        def bwd(g):
            accum_grad(x, g)
            accum_grad(b, g.sum(axis=other))
        register(out, bwd)
    return _finish(out)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if tracing():
        def bwd(g):
            accum_grad(x, g.reshape(x.data.shape))
        register(out, bwd)
    return _finish(out)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    if tracing():
        inv = np.argsort(axes)
        def bwd(g):
            accum_grad(x, np.ascontiguousarray(g.transpose(inv)))
        register(out, bwd)
    return _finish(out)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if tracing():
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                accum_grad(t, g[tuple(sl)])
        register(out, bwd)
    return _finish(out)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast
    (gradients of lower-rank operands sum over the broadcast axes)."""
    out = Tensor(np.matmul(a.data, b.data))
    if tracing():
        def bwd(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            while ga.ndim > a.data.ndim:
                ga = ga.sum(axis=0)
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            while gb.ndim > b.data.ndim:
                gb = gb.sum(axis=0)
            accum_grad(a, ga)
            accum_grad(b, gb)
        register(out, bwd)
    return _finish(out)


def mul_bcast(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product where b may have size-1 axes broadcast against a."""
    if a.data.ndim != b.data.ndim:
        raise OpError("mul_bcast operands need equal rank")
    out = Tensor(a.data * b.data)
    if tracing():
        baxes = tuple(i for i in range(b.data.ndim)
                      if b.data.shape[i] == 1 and a.data.shape[i] != 1)
        def bwd(g):
            accum_grad(a, g * b.data)
            gb = g * a.data
            if baxes:
                gb = gb.sum(axis=baxes, keepdims=True)
            accum_grad(b, gb)
        register(out, bwd)
    return _finish(out)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise channel mixing of a [N, C, D, H, W] tensor; w is [C_out, C]."""
    squeeze = x.data.ndim == 4
    xd = x.data[None] if squeeze else x.data
    n, c = xd.shape[:2]
    spatial = xd.shape[2:]
    co = w.data.shape[0]
    if w.data.shape != (co, c):
        raise OpError(f"conv1x1 weight shape {w.data.shape} mismatches C={c}")
    xt = xd.reshape(n, c, -1)
    y = (np.matmul(w.data, xt) + b.data[None, :, None]).reshape(
        (n, co) + spatial)
    out = Tensor(y[0] if squeeze else y)
    if tracing():
        def bwd(g):
            g3 = (g[None] if squeeze else g).reshape(n, co, -1)
            accum_grad(b, g3.sum(axis=(0, 2)))
            accum_grad(w, np.matmul(g3, xt.transpose(0, 2, 1)).sum(axis=0))
            gx = np.matmul(w.data.T, g3).reshape(xd.shape)
            accum_grad(x, gx[0] if squeeze else gx)
        register(out, bwd)
    return _finish(out)


# ---------------------------------------------------------------------------
# Normalization layers
# ---------------------------------------------------------------------------

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor,
              eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis, then per-feature affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Tensor(xh * gamma.data + beta.data)
    if tracing():
        other = tuple(range(x.data.ndim - 1))
        def bwd(g):
            accum_grad(beta, g.sum(axis=other))
            accum_grad(gamma, (g * xh).sum(axis=other))
            dxh = g * gamma.data
            m1 = dxh.mean(axis=-1, keepdims=True)
            m2 = (dxh * xh).mean(axis=-1, keepdims=True)
            accum_grad(x, inv * (dxh - m1 - xh * m2))
        register(out, bwd)
    return _finish(out)


class BatchNormState:
    """Running statistics buffers shared across training steps."""

    __slots__ = ("mean", "var", "steps")

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.steps = 0


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization of a [N, C, D, H, W] tensor.

    Train mode normalizes by batch statistics and updates the running
    buffers (side effect on `state`); eval mode uses the running buffers and
    refuses to run before any training step has populated them.
    """
    if x.data.ndim != 5:
        raise OpError(f"batchnorm3d expects 5-D input, got {x.data.shape}")
    c = x.data.shape[1]
    cshape = (1, c, 1, 1, 1)
    axes = (0, 2, 3, 4)
    if training:
        m = x.data.size // c
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(cshape)
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xh = xc * inv.reshape(cshape)
        unbiased = var * (m / max(m - 1, 1))
        state.mean[:] = (1 - momentum) * state.mean + momentum * mu
        state.var[:] = (1 - momentum) * state.var + momentum * unbiased
        state.steps += 1
    else:
        if state.steps == 0:
            raise OpError("batchnorm3d eval before any training step")
        inv = 1.0 / np.sqrt(state.var.astype(x.data.dtype) + eps)
        xh = (x.data - state.mean.astype(x.data.dtype).reshape(cshape)) \
            * inv.reshape(cshape)
    out = Tensor(xh * gamma.data.reshape(cshape) + beta.data.reshape(cshape))
    if tracing():
        def bwd(g):
            accum_grad(beta, g.sum(axis=axes))
            accum_grad(gamma, (g * xh).sum(axis=axes))
            dxh = g * gamma.data.reshape(cshape)
            if training:
                m1 = dxh.mean(axis=axes).reshape(cshape)
                m2 = (dxh * xh).mean(axis=axes).reshape(cshape)
                accum_grad(x, inv.reshape(cshape) * (dxh - m1 - xh * m2))
            else:
                accum_grad(x, dxh * inv.reshape(cshape))
        register(out, bwd)
    return _finish(out)


# ---------------------------------------------------------------------------
# Spatial ops on [N, C, D, H, W]
# ---------------------------------------------------------------------------

def _pad_spatial(x: np.ndarray) -> np.ndarray:
    n, c, d, h, w = x.shape
    xp = np.zeros((n, c, d + 2, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    return xp


def _im2col(xp: np.ndarray, d: int, h: int, w: int) -> np.ndarray:
    """[N, C, D+2, H+2, W+2] -> [C*27, N*D*H*W] patch matrix.

    Filled tap by tap with plain slab copies, which is considerably faster
    than one big strided transpose-copy.
    """
    n, c = xp.shape[:2]
    col = np.empty((c, 27, n, d * h * w), dtype=xp.dtype)
    k = 0
    for kz in range(3):
        for ky in range(3):
            for kx in range(3):
                slab = xp[:, :, kz:kz + d, ky:ky + h, kx:kx + w]
                col[:, k] = slab.transpose(1, 0, 2, 3, 4).reshape(c, n, -1)
                k += 1
    return col.reshape(c * 27, n * d * h * w)


def _conv3d_fwd_ordered(xp, w, b, d, h, wd):
    """Fixed-order accumulation: bias, then taps in (ci, kz, ky, kx) order."""
    n = xp.shape[0]
    co = w.shape[0]
    out = np.empty((n, co, d, h, wd), dtype=xp.dtype)
    out[:] = b.reshape(1, co, 1, 1, 1)
    for ci in range(w.shape[1]):
        for kz in range(3):
            for ky in range(3):
                for kx in range(3):
                    src = xp[:, ci, kz:kz + d, ky:ky + h, kx:kx + wd]
                    out += w[None, :, ci, kz, ky, kx, None, None, None] \
                        * src[:, None]
    return out


def _use_direct_kernels(c: int, wd: int, dtype) -> bool:
    # The direct kernels beat the patch-matrix GEMM when the spatial rows
    # are long enough to vectorize and the 27x patch copy would be large.
    return _ck.HAVE_NUMBA and dtype == np.float32 and wd >= 16 and c >= 16


def conv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3x3 cross-correlation, stride 1, zero padding 1.

    x is [N, C_in, D, H, W] (a leading batch axis of 1 is added for 4-D
    input); w is [C_out, C_in, 3, 3, 3]; b is [C_out].
    """
    squeeze = x.data.ndim == 4
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 5:
        raise OpError(f"conv3d expects 4-D or 5-D input, got {x.data.shape}")
    n, c, d, h, wd = xd.shape
    co = w.data.shape[0]
    if w.data.shape != (co, c, 3, 3, 3):
        raise OpError(f"conv3d weight shape {w.data.shape} mismatches "
                      f"input channels {c}")
    if b.data.shape != (co,):
        raise OpError(f"conv3d bias shape {b.data.shape}")
    xp = _pad_spatial(xd)
    direct = _use_direct_kernels(c, wd, xd.dtype)
    if xd.dtype == np.float64:
        y = _conv3d_fwd_ordered(xp, w.data, b.data, d, h, wd)
    elif direct:
        y = np.empty((n, co, d, h, wd), dtype=xd.dtype)
        _ck.conv_fwd(xp, w.data, b.data, y)
    else:
        col = _im2col(xp, d, h, wd)
        y = (w.data.reshape(co, c * 27) @ col) + b.data[:, None]
        y = np.ascontiguousarray(
            y.reshape(co, n, d, h, wd).transpose(1, 0, 2, 3, 4))
    out = Tensor(y[0] if squeeze else y)
    if tracing():
        def bwd(g):
            gy = np.ascontiguousarray(g[None] if squeeze else g)
            accum_grad(b, gy.sum(axis=(0, 2, 3, 4)))
            if direct:
                dw = np.empty_like(w.data)
                _ck.conv_dweight(gy, xp, dw)
                accum_grad(w, dw)
                gyp = _pad_spatial(gy)
                gx = np.empty_like(xd)
                _ck.conv_dinput(gyp, w.data, gx)
            else:
                g2 = np.ascontiguousarray(
                    gy.transpose(1, 0, 2, 3, 4)).reshape(co, n * d * h * wd)
                col_b = _im2col(xp, d, h, wd)
                accum_grad(w, (g2 @ col_b.T).reshape(co, c, 3, 3, 3))
                gcol = w.data.reshape(co, c * 27).T @ g2
                gcol = gcol.reshape(c, 3, 3, 3, n, d, h, wd)
                gxp = np.zeros((n, c, d + 2, h + 2, wd + 2), dtype=xd.dtype)
                for kz in range(3):
                    for ky in range(3):
                        for kx in range(3):
                            gxp[:, :, kz:kz + d, ky:ky + h, kx:kx + wd] += \
                                gcol[:, kz, ky, kx].transpose(1, 0, 2, 3, 4)
                gx = gxp[:, :, 1:-1, 1:-1, 1:-1]
            accum_grad(x, gx[0] if squeeze else gx)
        register(out, bwd)
    return _finish(out)


def maxpool3d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2x2 max pooling; gradient routes to the argmax
    (first index in z-major window order on ties)."""
    squeeze = x.data.ndim == 4
    xd = x.data[None] if squeeze else x.data
    n, c, d, h, w = xd.shape
    if d % 2 or h % 2 or w % 2:
        raise OpError(f"maxpool3d needs even spatial extents, got {xd.shape}")
    d2, h2, w2 = d // 2, h // 2, w // 2
    win = np.ascontiguousarray(
        xd.reshape(n, c, d2, 2, h2, 2, w2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    ).reshape(n, c, d2, h2, w2, 8)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = Tensor(y[0] if squeeze else y)
    if tracing():
        def bwd(g):
            gy = g[None] if squeeze else g
            gwin = np.zeros((n, c, d2, h2, w2, 8), dtype=xd.dtype)
            np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
            gx = gwin.reshape(n, c, d2, h2, w2, 2, 2, 2).transpose(
                0, 1, 2, 5, 3, 6, 4, 7).reshape(xd.shape)
            accum_grad(x, gx[0] if squeeze else np.ascontiguousarray(gx))
        register(out, bwd)
    return _finish(out)


def _upsample_axis_tables(n: int, dtype):
    """Per-axis source indices and weights for 2x linear interpolation
    (align_corners=False, edges clamped)."""
    o = np.arange(2 * n, dtype=np.float64)
    src = (o + 0.5) / 2.0 - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f, 0, n - 1).astype(np.int64)
    i1 = np.clip(i0f + 1, 0, n - 1).astype(np.int64)
    return (i0, i1), (np.asarray(1.0 - frac, dtype=dtype),
                      np.asarray(frac, dtype=dtype))


def _upsample1d_transpose(g: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of the per-axis 2x interpolation (pure slicing)."""
    g = np.moveaxis(g, axis, -1)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    gin = 0.75 * (ge + go)
    gin[..., :-1] += 0.25 * ge[..., 1:]
    gin[..., 1:] += 0.25 * go[..., :-1]
    gin[..., 0] += 0.25 * ge[..., 0]
    gin[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(gin, -1, axis)


def _upsample1d_forward(x: np.ndarray, axis: int) -> np.ndarray:
    """Per-axis 2x linear interpolation (pure slicing).

    out[2k] = 0.25 x[k-1] + 0.75 x[k]; out[2k+1] = 0.75 x[k] + 0.25 x[k+1],
    with clamped edges.
    """
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    out = np.empty(x.shape[:-1] + (2 * n,), dtype=x.dtype)
    ge = out[..., 0::2]
    go = out[..., 1::2]
    ge[:] = 0.75 * x
    ge[..., 1:] += 0.25 * x[..., :-1]
    ge[..., 0] += 0.25 * x[..., 0]
    go[:] = 0.75 * x
    go[..., :-1] += 0.25 * x[..., 1:]
    go[..., -1] += 0.25 * x[..., -1]
    return np.moveaxis(out, -1, axis)


def upsample3d(x: Tensor) -> Tensor:
    """2x trilinear upsampling (align_corners=False).

    The output is the sum over the eight interpolation corners, accumulated
    in fixed z-major corner order with weights (wz*wy)*wx, so the float64
    value matches a per-voxel reference loop exactly.  Constant fields map to
    constant fields.
    """
    squeeze = x.data.ndim == 4
    xd = x.data[None] if squeeze else x.data
    n, c, d, h, w = xd.shape
    dt = xd.dtype
    if dt == np.float64:
        (iz, wz) = _upsample_axis_tables(d, dt)
        (iy, wy) = _upsample_axis_tables(h, dt)
        (ix, wx) = _upsample_axis_tables(w, dt)
        y = np.zeros((n, c, 2 * d, 2 * h, 2 * w), dtype=dt)
        for a in (0, 1):
            for bb in (0, 1):
                for cc in (0, 1):
                    wgt = (wz[a][:, None, None] * wy[bb][None, :, None]) \
                        * wx[cc][None, None, :]
                    y += wgt * xd[:, :, iz[a][:, None, None],
                                  iy[bb][None, :, None], ix[cc][None, None, :]]
    else:
        # Same linear map, applied axis by axis (cheaper; float32 path).
        y = _upsample1d_forward(xd, 2)
        y = _upsample1d_forward(y, 3)
        y = _upsample1d_forward(y, 4)
    out = Tensor(y[0] if squeeze else y)
    if tracing():
        def bwd(g):
            gy = g[None] if squeeze else g
            gx = _upsample1d_transpose(gy, 2)
            gx = _upsample1d_transpose(gx, 3)
            gx = _upsample1d_transpose(gx, 4)
            gx = np.ascontiguousarray(gx)
            accum_grad(x, gx[0] if squeeze else gx)
        register(out, bwd)
    return _finish(out)


# ---------------------------------------------------------------------------
# Multi-head cross-attention (composed from the primitives above)
# ---------------------------------------------------------------------------

def _split_heads(x: Tensor, heads: int, dh: int) -> Tensor:
    """[..., T, d] -> [..., heads, T, dh]"""
    shape = x.data.shape
    lead = shape[:-2]
    t = shape[-2]
    y = reshape(x, lead + (t, heads, dh))
    n = len(lead)
    axes = tuple(range(n)) + (n + 1, n, n + 2)
    return transpose(y, axes)


def multihead_cross_attention(q_src: Tensor, kv_src: Tensor, p: dict,
                              heads: int) -> Tensor:
    """Pre-norm multi-head cross-attention over token sequences.

    q_src is [..., N_q, d] and kv_src [..., N_kv, d] with identical leading
    axes.  p maps parameter names (ln_q_gamma, ln_q_beta, ln_kv_gamma,
    ln_kv_beta, wq, bq, wk, bk, wv, bv, wo, bo) to Tensors.  Queries come
    from q_src; keys and values from kv_src; scaled dot-product softmax per
    head, concatenated heads, output projection.
    """
    d = q_src.data.shape[-1]
    if d % heads:
        raise OpError(f"model width {d} not divisible by {heads} heads")
    dh = d // heads
    lead = q_src.data.shape[:-2]
    nq = q_src.data.shape[-2]
    qn = layernorm(q_src, p["ln_q_gamma"], p["ln_q_beta"])
    kvn = layernorm(kv_src, p["ln_kv_gamma"], p["ln_kv_beta"])
    q = add_bias(matmul(qn, p["wq"]), p["bq"], axis=-1)
    k = add_bias(matmul(kvn, p["wk"]), p["bk"], axis=-1)
    v = add_bias(matmul(kvn, p["wv"]), p["bv"], axis=-1)
    qh = _split_heads(q, heads, dh)
    kh = _split_heads(k, heads, dh)
    vh = _split_heads(v, heads, dh)
    n = kh.data.ndim
    swap_last = tuple(range(n - 2)) + (n - 1, n - 2)
    scores = scale(matmul(qh, transpose(kh, swap_last)), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vh)
    nlead = len(lead)
    merge = tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2)
    ctx = reshape(transpose(ctx, merge), lead + (nq, d))
    return add_bias(matmul(ctx, p["wo"]), p["bo"], axis=-1)


ATTENTION_PARAM_NAMES = ("ln_q_gamma", "ln_q_beta", "ln_kv_gamma", "ln_kv_beta",
                         "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


# ---------------------------------------------------------------------------
# Gradient-vector utilities (operate on raw arrays, outside the tape)
# ---------------------------------------------------------------------------

def global_norm(arrays) -> float:
    total = 0.0
    for a in arrays:
        if a is not None:
            total += float(np.dot(a.ravel(), a.ravel()))
    return math.sqrt(total)


def clip_by_global_norm(arrays, max_norm: float = 1.0) -> float:
    """Rescale all gradients in place when their joint norm exceeds max_norm.

    Returns the pre-clip global norm.
    """
    norm = global_norm(arrays)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for a in arrays:
            if a is not None:
                a *= factor
    return norm
