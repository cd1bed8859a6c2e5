"""Direct 3x3x3 convolution kernels (numba, float32 training path).

The patch-matrix (im2col + GEMM) formulation inflates activations 27x, which
is memory-bound on modest hardware; these kernels compute the convolution
in place at ~arithmetic cost.  Work is parallelized over disjoint output
slabs only, so results are independent of thread scheduling.  Used for
float32 inputs with wide spatial extents; small layers and all float64
verification paths stay on the numpy implementation in ops.py.

Import is optional: when numba is unavailable, HAVE_NUMBA is False and
callers fall back to the numpy path.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
    from numba import njit, prange
    # Skip the TBB probe (the bundled TBB is too old and only warns).
    numba.config.THREADING_LAYER = "omp"
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco

    prange = range


@njit(parallel=True, cache=True)
def conv_fwd(xp, w, b, out):
    """out[n,o] = b[o] + sum_c,k w[o,c,k] * xp[n,c,shifted]; xp is padded."""
    n_batch, co, d, h, wd = out.shape
    c_in = w.shape[1]
    for idx in prange(n_batch * co):
        n = idx // co
        o = idx % co
        for z in range(d):
            for y in range(h):
                row = np.full(wd, b[o], dtype=out.dtype)
                for c in range(c_in):
                    for kz in range(3):
                        for ky in range(3):
                            xrow = xp[n, c, z + kz, y + ky]
                            w0 = w[o, c, kz, ky, 0]
                            w1 = w[o, c, kz, ky, 1]
                            w2 = w[o, c, kz, ky, 2]
                            for x in range(wd):
                                row[x] += (w0 * xrow[x] + w1 * xrow[x + 1]
                                           + w2 * xrow[x + 2])
                out[n, o, z, y] = row


@njit(parallel=True, cache=True)
def conv_dinput(gyp, w, gx):
    """Gather form of the input gradient: full correlation with the
    tap-flipped kernel.  gyp is the output gradient padded by one."""
    n_batch, c_in, d, h, wd = gx.shape
    co = w.shape[0]
    for idx in prange(n_batch * c_in):
        n = idx // c_in
        c = idx % c_in
        for z in range(d):
            for y in range(h):
                row = np.zeros(wd, dtype=gx.dtype)
                for o in range(co):
                    for kz in range(3):
                        for ky in range(3):
                            grow = gyp[n, o, z + 2 - kz, y + 2 - ky]
                            w0 = w[o, c, kz, ky, 0]
                            w1 = w[o, c, kz, ky, 1]
                            w2 = w[o, c, kz, ky, 2]
                            for x in range(wd):
                                row[x] += (w0 * grow[x + 2] + w1 * grow[x + 1]
                                           + w2 * grow[x])
                gx[n, c, z, y] = row


@njit(parallel=True, cache=True)
def conv_dweight(gy, xp, dw):
    """dw[o,c,k] = sum_n,p gy[n,o,p] * xp[n,c,p+k]; xp is padded.

    Row dot-products accumulate in float32 (SIMD lanes); the cross-row sum
    accumulates in float64.
    """
    n_batch, co, d, h, wd = gy.shape
    c_in = xp.shape[1]
    zero = xp.dtype.type(0.0)
    for idx in prange(co * c_in):
        o = idx // c_in
        c = idx % c_in
        for kz in range(3):
            for ky in range(3):
                a0 = 0.0
                a1 = 0.0
                a2 = 0.0
                for n in range(n_batch):
                    for z in range(d):
                        for y in range(h):
                            grow = gy[n, o, z, y]
                            xrow = xp[n, c, z + kz, y + ky]
                            s0 = zero
                            s1 = zero
                            s2 = zero
                            for x in range(wd):
                                g = grow[x]
                                s0 += g * xrow[x]
                                s1 += g * xrow[x + 1]
                                s2 += g * xrow[x + 2]
                            a0 += s0
                            a1 += s1
                            a2 += s2
                dw[o, c, kz, ky, 0] = a0
                dw[o, c, kz, ky, 1] = a1
                dw[o, c, kz, ky, 2] = a2
