"""Compiled inner loops for depth-wise 3D convolution.

Only the depth-wise case needs hand-written loops: its per-channel structure
defeats BLAS, and a naive numpy offset loop is memory-bound. The loops below
are laid out so the innermost dimension is contiguous and auto-vectorizes.
Parallel ranges only touch disjoint output slices (or reduce entirely within
one thread), so results are bit-identical regardless of thread count.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def dw_conv3d_forward(xp, w, out):
    N, C, Dp, Hp, Wp = xp.shape
    k = w.shape[1]
    D, H, W = out.shape[2], out.shape[3], out.shape[4]
    for nc in prange(N * C):
        n = nc // C
        c = nc - n * C
        for d in range(D):
            for h in range(H):
                row = out[n, c, d, h]
                for x in range(W):
                    row[x] = 0.0
                for kz in range(k):
                    for ky in range(k):
                        src = xp[n, c, d + kz, h + ky]
                        for kx in range(k):
                            wt = w[c, kz, ky, kx]
                            for x in range(W):
                                row[x] += wt * src[x + kx]


@njit(parallel=True, cache=True)
def dw_conv3d_grad_x(go, w, gxp):
    N, C, D, H, W = go.shape
    k = w.shape[1]
    for nc in prange(N * C):
        n = nc // C
        c = nc - n * C
        for d in range(D):
            for h in range(H):
                row = go[n, c, d, h]
                for kz in range(k):
                    for ky in range(k):
                        dst = gxp[n, c, d + kz, h + ky]
                        for kx in range(k):
                            wt = w[c, kz, ky, kx]
                            for x in range(W):
                                dst[x + kx] += wt * row[x]


@njit(parallel=True, cache=True)
def dw_conv3d_grad_w(xp, go, gw):
    N, C, D, H, W = go.shape
    k = gw.shape[1]
    for c in prange(C):
        for kz in range(k):
            for ky in range(k):
                for kx in range(k):
                    acc = 0.0
                    for n in range(N):
                        for d in range(D):
                            for h in range(H):
                                src = xp[n, c, d + kz, h + ky]
                                row = go[n, c, d, h]
                                for x in range(W):
                                    acc += src[x + kx] * row[x]
                    gw[c, kz, ky, kx] = acc
