"""Compiled inner loops for the depthwise convolution.

Plain numpy pays a heavy price for the strided window reads these need, so
the three kernels are jitted instead.  The stride-1 and stride-2 cases are
spelled out with literal strides because LLVM only vectorizes the innermost
walk when the step is a compile-time constant.  Every output element is
produced by exactly one thread with a fixed-order reduction, which keeps
results bitwise deterministic regardless of scheduling (fastmath stays off
for the same reason).
"""

from __future__ import annotations

import numpy as np
from numba import config as _numba_config
from numba import njit, prange

_numba_config.THREADING_LAYER = "omp"  # TBB here is too old and warns


@njit(cache=True, parallel=True, fastmath=False)
def dw_forward(xp, w, stride, ho, wo):
    """xp: padded (N,C,Hp,Wp) float32; w: (C,K,K); returns (N,C,ho,wo)."""
    n, c, _, _ = xp.shape
    k = w.shape[1]
    out = np.zeros((n, c, ho, wo), dtype=np.float32)
    for nc in prange(n * c):
        ni = nc // c
        ci = nc % c
        for oh in range(ho):
            out_row = out[ni, ci, oh]
            hb = oh * stride
            for i in range(k):
                x_row = xp[ni, ci, hb + i]
                for j in range(k):
                    wv = w[ci, i, j]
                    if stride == 1:
                        for ow in range(wo):
                            out_row[ow] += x_row[ow + j] * wv
                    elif stride == 2:
                        for ow in range(wo):
                            out_row[ow] += x_row[ow * 2 + j] * wv
                    else:
                        for ow in range(wo):
                            out_row[ow] += x_row[ow * stride + j] * wv
    return out


@njit(cache=True, parallel=True, fastmath=False)
def dw_input_grad(g, w, stride, hp, wp):
    """Scatter the upstream gradient back onto the padded input."""
    n, c, ho, wo = g.shape
    k = w.shape[1]
    dxp = np.zeros((n, c, hp, wp), dtype=np.float32)
    for nc in prange(n * c):
        ni = nc // c
        ci = nc % c
        for oh in range(ho):
            g_row = g[ni, ci, oh]
            hb = oh * stride
            for i in range(k):
                dx_row = dxp[ni, ci, hb + i]
                for j in range(k):
                    wv = w[ci, i, j]
                    if stride == 1:
                        for ow in range(wo):
                            dx_row[ow + j] += g_row[ow] * wv
                    elif stride == 2:
                        for ow in range(wo):
                            dx_row[ow * 2 + j] += g_row[ow] * wv
                    else:
                        for ow in range(wo):
                            dx_row[ow * stride + j] += g_row[ow] * wv
    return dxp


@njit(cache=True, parallel=True, fastmath=False)
def dw_weight_grad(xp, g, stride, k):
    """Per-channel kernel gradient, accumulated in float64 then cast."""
    n, c, ho, wo = g.shape
    dw = np.zeros((c, k, k), dtype=np.float32)
    for ci in prange(c):
        acc = np.zeros((k, k), dtype=np.float64)
        for ni in range(n):
            for oh in range(ho):
                g_row = g[ni, ci, oh]
                hb = oh * stride
                for i in range(k):
                    x_row = xp[ni, ci, hb + i]
                    for j in range(k):
                        s = 0.0
                        if stride == 1:
                            for ow in range(wo):
                                s += x_row[ow + j] * g_row[ow]
                        elif stride == 2:
                            for ow in range(wo):
                                s += x_row[ow * 2 + j] * g_row[ow]
                        else:
                            for ow in range(wo):
                                s += x_row[ow * stride + j] * g_row[ow]
                        acc[i, j] += s
        for i in range(k):
            for j in range(k):
                dw[ci, i, j] = np.float32(acc[i, j])
    return dw
