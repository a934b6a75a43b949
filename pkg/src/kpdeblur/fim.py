"""Frequency Integration Module: fuses kernel-prior features into image features.

Queries come from the image features, keys and values from the kernel
features. Frequency attention multiplies the query and key spectra (circular
convolution), normalizes the result over channels and gates the values with
it; a 1x1 conv maps the result back and (optionally) adds it to the input.
"""

from dataclasses import dataclass

from kpdeblur.blur import PixelKernelField
from kpdeblur.errors import ParameterError
from kpdeblur.numerics import Tensor, as_tensor, avg_pool2, layer_norm, spectral_product
from kpdeblur.numerics.nn import Conv2d, DWConv2d, LayerNorm, Module

DEFAULT_KERNEL_CHANNELS = 32


def kernel_channels(field):
    """Flatten a ``[B,H,W,k,k]`` field to a ``[B,k*k,H,W]`` feature map."""
    w = field.weights if isinstance(field, PixelKernelField) else as_tensor(field)
    b, h, wd, k, _ = w.shape
    return w.reshape(b, h, wd, k * k).transpose(0, 3, 1, 2)


class KernelEmbedding(Module):
    """1x1 conv from the ``k*k`` tap channels to ``D`` kernel-feature channels."""

    def __init__(self, k, channels=DEFAULT_KERNEL_CHANNELS):
        self.k = k
        self.proj = Conv2d(k * k, channels, 1)

    def __call__(self, taps):
        return self.proj(taps)


def embed_kernel_features(embedding, field):
    return embedding(kernel_channels(field))


@dataclass
class KernelPyramid:
    b1: Tensor
    b2: Tensor
    b3: Tensor

    def __getitem__(self, scale):
        return (self.b1, self.b2, self.b3)[scale]

    def __iter__(self):
        return iter((self.b1, self.b2, self.b3))


def build_pyramid(feat):
    """Full, half and quarter resolution copies of the kernel features."""
    h, w = feat.shape[-2:]
    if h % 4 or w % 4:
        raise ParameterError(f"kernel features need H, W divisible by 4, got {h}x{w}")
    b2 = avg_pool2(feat)
    return KernelPyramid(feat, b2, avg_pool2(b2))


class FIMBlock(Module):
    """Q from ``x_channels`` features, K/V from ``kv_channels`` features.

    The output conv starts at zero, so a fresh residual block is the identity.
    """

    def __init__(self, x_channels, kv_channels, latent=None, residual=True, zero_init=True):
        latent = latent or x_channels
        self.residual = residual
        self.conv_q = Conv2d(x_channels, latent, 1)
        self.dw_q = DWConv2d(latent, 3)
        self.conv_k = Conv2d(kv_channels, latent, 1)
        self.dw_k = DWConv2d(latent, 3)
        self.conv_v = Conv2d(kv_channels, latent, 1)
        self.dw_v = DWConv2d(latent, 3)
        self.norm = LayerNorm(latent)
        self.out = Conv2d(latent, x_channels, 1, zero_init=zero_init)


def project_qkv(block, x, kv):
    if x.shape[2:] != kv.shape[2:]:
        raise ParameterError(f"spatial mismatch between features {x.shape[2:]} and kernel features {kv.shape[2:]}")
    q = block.dw_q(block.conv_q(x))
    k = block.dw_k(block.conv_k(kv))
    v = block.dw_v(block.conv_v(kv))
    return q, k, v


def fa_intermediate(q, k):
    """Real part of ``F^-1(F(q) * F(k))`` per (batch, channel) plane."""
    if q.shape != k.shape:
        raise ParameterError(f"Q/K shape mismatch: {q.shape} vs {k.shape}")
    return spectral_product(q, k)


def frequency_attention(q, k, v, norm=None, eps=1e-5):
    """``layernorm(F^-1(F(q) * F(k))) * v``; ``norm`` is a LayerNorm module or None."""
    if not (q.shape == k.shape == v.shape):
        raise ParameterError(f"Q/K/V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    p = fa_intermediate(q, k)
    p = norm(p) if norm is not None else layer_norm(p, eps=eps)
    return p * v


def fim_forward(block, x, kv):
    q, k, v = project_qkv(block, x, kv)
    out = block.out(frequency_attention(q, k, v, block.norm))
    return out + x if block.residual else out
