"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here touches the package's own kernels; everything is plain loops.
"""

import cmath
import math

import numpy as np


def conv2d_loop(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                ii = i * stride + u - pad
                                jj = j * stride + v - pad
                                if 0 <= ii < H and 0 <= jj < W:
                                    acc += w[o, c, u, v] * x[n, c, ii, jj]
                    out[n, o, i, j] = acc
    return out


def dwconv2d_loop(x, w, b):
    B, C, H, W = x.shape
    k = w.shape[-1]
    r = k // 2
    out = np.zeros(x.shape)
    for n in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    acc = b[c]
                    for u in range(k):
                        for v in range(k):
                            ii, jj = i + u - r, j + v - r
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += w[c, 0, u, v] * x[n, c, ii, jj]
                    out[n, c, i, j] = acc
    return out


def dft2_naive(plane):
    H, W = plane.shape
    out = np.zeros((H, W), dtype=complex)
    for p in range(H):
        for q in range(W):
            acc = 0j
            for m in range(H):
                for n in range(W):
                    acc += plane[m, n] * cmath.exp(-2j * math.pi * (p * m / H + q * n / W))
            out[p, q] = acc
    return out


def circular_conv_loop(a, b):
    H, W = a.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for m in range(H):
                for n in range(W):
                    acc += a[m, n] * b[(i - m) % H, (j - n) % W]
            out[i, j] = acc
    return out


def reblur_loop(x, field):
    """x: [C,H,W]; field: [H,W,k,k]; replicate padding."""
    C, H, W = x.shape
    k = field.shape[-1]
    r = k // 2
    out = np.zeros(x.shape)
    for c in range(C):
        for i in range(H):
            for j in range(W):
                acc = 0.0
                for u in range(k):
                    for v in range(k):
                        ii = min(max(i + u - r, 0), H - 1)
                        jj = min(max(j + v - r, 0), W - 1)
                        acc += field[i, j, u, v] * x[c, ii, jj]
                out[c, i, j] = acc
    return out


def avg_pool2_loop(x):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H // 2, W // 2))
    for n in range(B):
        for c in range(C):
            for i in range(H // 2):
                for j in range(W // 2):
                    s = 0.0
                    for u in range(2):
                        for v in range(2):
                            s += x[n, c, 2 * i + u, 2 * j + v]
                    out[n, c, i, j] = s / 4
    return out


def l1_loop(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    total = 0.0
    for u, v in zip(a, b):
        total += abs(u - v)
    return total / len(a)


def ssim_direct(a, b, size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean SSIM over channels and valid window positions, straight from the formula."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 2:
        a, b = a[None], b[None]
    r = size // 2
    g = [math.exp(-((i - r) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    C, H, W = a.shape
    vals = []
    for c in range(C):
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                ma = mb = saa = sbb = sab = 0.0
                for u in range(size):
                    for v in range(size):
                        wt = g[u] * g[v]
                        pa = a[c, i + u, j + v]
                        pb = b[c, i + u, j + v]
                        ma += wt * pa
                        mb += wt * pb
                        saa += wt * pa * pa
                        sbb += wt * pb * pb
                        sab += wt * pa * pb
                va = saa - ma * ma
                vb = sbb - mb * mb
                cov = sab - ma * mb
                num = (2 * ma * mb + c1) * (2 * cov + c2)
                den = (ma * ma + mb * mb + c1) * (va + vb + c2)
                vals.append(num / den)
    return sum(vals) / len(vals)


def circular_conv_direct(a, b):
    """Circular convolution as a sum of shifted copies; O((HW)^2) but vectorized per shift."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.zeros_like(a)
    H, W = a.shape
    for m in range(H):
        for n in range(W):
            if a[m, n] != 0.0:
                out += a[m, n] * np.roll(b, (m, n), axis=(0, 1))
    return out
