"""Compiled inner loops for the bilinear sampling ops.

Single-threaded, fixed iteration order: results are deterministic run to run.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def deform_forward(v3, base, fx, fy, wts, off_r, off_d, out):
    """out[r, h, :] += sum_p wts * bilinear(v3 at base/fx/fy).

    v3: [cells, heads, dh]; base/fx/fy/wts: [R, heads, P]; out: [R, heads, dh].
    """
    rr, hh, pp = base.shape
    dh = v3.shape[2]
    for r in range(rr):
        for h in range(hh):
            for p in range(pp):
                b = base[r, h, p]
                xf = fx[r, h, p]
                yf = fy[r, h, p]
                w = wts[r, h, p]
                w00 = (1.0 - yf) * (1.0 - xf) * w
                w01 = (1.0 - yf) * xf * w
                w10 = yf * (1.0 - xf) * w
                w11 = yf * xf * w
                b01 = b + off_r
                b10 = b + off_d
                b11 = b10 + off_r
                for c in range(dh):
                    out[r, h, c] += (w00 * v3[b, h, c] + w01 * v3[b01, h, c]
                                     + w10 * v3[b10, h, c] + w11 * v3[b11, h, c])


@numba.njit(cache=True)
def deform_backward(v3, base, fx, fy, inx, iny, wts, off_r, off_d, gh,
                    need_dval, dval, need_dw, dw, need_dp, dp):
    """One fused pass: gradients for values (scatter), weights and points.

    gh: [R, heads, dh] upstream gradient; dval: [cells, heads, dh];
    dw: [R, heads, P]; dp: [R, heads, P, 2].
    """
    rr, hh, pp = base.shape
    dh = v3.shape[2]
    for r in range(rr):
        for h in range(hh):
            for p in range(pp):
                b = base[r, h, p]
                xf = fx[r, h, p]
                yf = fy[r, h, p]
                w = wts[r, h, p]
                b01 = b + off_r
                b10 = b + off_d
                b11 = b10 + off_r
                wx0 = 1.0 - xf
                wy0 = 1.0 - yf
                c00 = wy0 * wx0
                c01 = wy0 * xf
                c10 = yf * wx0
                c11 = yf * xf
                acc_w = 0.0
                acc_dx = 0.0
                acc_dy = 0.0
                for c in range(dh):
                    g = gh[r, h, c]
                    v00 = v3[b, h, c]
                    v01 = v3[b01, h, c]
                    v10 = v3[b10, h, c]
                    v11 = v3[b11, h, c]
                    acc_w += g * (c00 * v00 + c01 * v01 + c10 * v10 + c11 * v11)
                    gw = g * w
                    acc_dx += gw * (wy0 * (v01 - v00) + yf * (v11 - v10))
                    acc_dy += gw * (wx0 * (v10 - v00) + xf * (v11 - v01))
                    if need_dval:
                        dval[b, h, c] += c00 * gw
                        dval[b01, h, c] += c01 * gw
                        dval[b10, h, c] += c10 * gw
                        dval[b11, h, c] += c11 * gw
                if need_dw:
                    dw[r, h, p] = acc_w
                if need_dp:
                    dp[r, h, p, 0] = acc_dx * inx[r, h, p]
                    dp[r, h, p, 1] = acc_dy * iny[r, h, p]
