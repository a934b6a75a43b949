"""Differentiable 2-D Fourier transforms over the last two axes.

Spectra are held as a :class:`ComplexGrid` of two real tensors so the rest of
the engine never sees complex dtypes. Forward transform is unnormalized, the
inverse carries the ``1/(H*W)`` factor.
"""

from dataclasses import dataclass

import numpy as np

from kpdeblur.errors import ParameterError
from kpdeblur.numerics.tensor import Tensor, add, make_result, mul, sub

# Test hook: flipping this corrupts the exponent sign of the forward transform.
_FORWARD_SIGN = -1


def _fwd(a):
    if _FORWARD_SIGN < 0:
        return np.fft.fft2(a, axes=(-2, -1))
    return np.fft.ifft2(a, axes=(-2, -1)) * (a.shape[-1] * a.shape[-2])


def _inv(a):
    return np.fft.ifft2(a, axes=(-2, -1))


@dataclass
class ComplexGrid:
    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ParameterError(f"real/imag shapes differ: {self.real.shape} vs {self.imag.shape}")

    @property
    def shape(self):
        return self.real.shape

    def numpy(self):
        return self.real.data + 1j * self.imag.data

    def abs2(self):
        return self.real.data ** 2 + self.imag.data ** 2


def fft2(x):
    """Unnormalized forward DFT of every (..., H, W) plane."""
    if x.ndim < 2 or min(x.shape[-2:]) < 1:
        raise ParameterError(f"fft2 needs at least a 2-d input, got {x.shape}")
    hw = x.shape[-1] * x.shape[-2]
    spec = _fwd(x.data)
    dt = x.dtype

    # adjoint of the unnormalized DFT is H*W times the inverse transform
    def back_real(g):
        return (np.real(_inv(g) * hw).astype(dt),)

    def back_imag(g):
        return ((-np.imag(_inv(g)) * hw).astype(dt),)

    re = make_result(np.ascontiguousarray(spec.real, dtype=dt), (x,), back_real, "fft2.real")
    im = make_result(np.ascontiguousarray(spec.imag, dtype=dt), (x,), back_imag, "fft2.imag")
    return ComplexGrid(re, im)


def ifft2_complex(X):
    """Inverse DFT returning both real and imaginary parts."""
    hw = X.shape[-1] * X.shape[-2]
    dt = X.real.dtype
    z = _inv(X.real.data + 1j * X.imag.data)
    # y = G z with G = conj(F)/hw; adjoint of G is F/hw
    def back_re(g):
        f = np.fft.fft2(g, axes=(-2, -1)) / hw
        return (np.real(f).astype(dt), np.imag(f).astype(dt))

    def back_im(g):
        f = np.fft.fft2(g, axes=(-2, -1)) / hw
        return ((-np.imag(f)).astype(dt), np.real(f).astype(dt))

    parents = (X.real, X.imag)
    re = make_result(np.ascontiguousarray(z.real, dtype=dt), parents, back_re, "ifft2.real")
    im = make_result(np.ascontiguousarray(z.imag, dtype=dt), parents, back_im, "ifft2.imag")
    return ComplexGrid(re, im)


def ifft2(X):
    """Real part of the inverse DFT."""
    hw = X.shape[-1] * X.shape[-2]
    dt = X.real.dtype
    z = _inv(X.real.data + 1j * X.imag.data)

    def backward(g):
        f = np.fft.fft2(g, axes=(-2, -1)) / hw
        return (np.real(f).astype(dt), np.imag(f).astype(dt))

    return make_result(np.ascontiguousarray(z.real, dtype=dt), (X.real, X.imag), backward, "ifft2")


def cmul(a, b):
    """Elementwise complex product."""
    if a.shape != b.shape:
        raise ParameterError(f"cmul shape mismatch: {a.shape} vs {b.shape}")
    re = sub(mul(a.real, b.real), mul(a.imag, b.imag))
    im = add(mul(a.real, b.imag), mul(a.imag, b.real))
    return ComplexGrid(re, im)


def cscale(a, w):
    """Multiply a spectrum by a real weight grid (broadcasting)."""
    return ComplexGrid(mul(a.real, w), mul(a.imag, w))


def spectral_product_composed(q, k):
    """``ifft2(cmul(fft2(q), fft2(k)))`` built from the generic ops."""
    return ifft2(cmul(fft2(q), fft2(k)))


def spectral_product(q, k):
    """Real part of ``ifft2(fft2(q) * fft2(k))``: circular convolution of q and k.

    Fused single op on half spectra; equals :func:`spectral_product_composed`.
    """
    if q.shape != k.shape:
        raise ParameterError(f"spectral product shape mismatch: {q.shape} vs {k.shape}")
    if _FORWARD_SIGN > 0:
        return spectral_product_composed(q, k)
    s = q.shape[-2:]
    dt = q.dtype
    qf = np.fft.rfft2(q.data, axes=(-2, -1))
    kf = np.fft.rfft2(k.data, axes=(-2, -1))
    out = np.fft.irfft2(qf * kf, s=s, axes=(-2, -1)).astype(dt, copy=False)

    def backward(g):
        gf = np.fft.rfft2(g, axes=(-2, -1))
        gq = np.fft.irfft2(gf * np.conj(kf), s=s, axes=(-2, -1)).astype(dt, copy=False) if q.requires_grad else None
        gk = np.fft.irfft2(gf * np.conj(qf), s=s, axes=(-2, -1)).astype(dt, copy=False) if k.requires_grad else None
        return gq, gk

    return make_result(np.ascontiguousarray(out), (q, k), backward, "spectral_product")


def spectral_filter(x, weight):
    """Real part of ``ifft2(weight * fft2(x))`` for a real weight grid (broadcast)."""
    dt = x.dtype
    xf = _fwd(x.data)
    wd = weight.data
    out = np.real(np.fft.ifft2(wd * xf, axes=(-2, -1))).astype(dt)
    wshape = wd.shape

    def backward(g):
        gi = np.fft.ifft2(g, axes=(-2, -1))
        gx = np.real(np.fft.fft2(wd * gi, axes=(-2, -1))).astype(dt) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            full = np.real(xf * gi)
            while full.ndim > len(wshape):
                full = full.sum(axis=0)
            for axis, size in enumerate(wshape):
                if size == 1 and full.shape[axis] != 1:
                    full = full.sum(axis=axis, keepdims=True)
            gw = full.astype(dt)
        return gx, gw

    return make_result(np.ascontiguousarray(out), (x, weight), backward, "spectral_filter")
