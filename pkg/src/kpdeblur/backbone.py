"""Encoder-decoder deblurring network built from frequency transformer blocks.

Three scales (full, half, quarter). Each encoder scale runs
``[FIM] -> FTB x n`` then downsamples; the quarter scale is the bottleneck and
carries both an encoder and a decoder group. Decoder scales upsample, add the
encoder skip, then run ``[FIM] -> FTB x n``. The output is ``y + refinement``.
"""

from dataclasses import asdict, dataclass, fields

from kpdeblur.errors import ParameterError
from kpdeblur.fim import FIMBlock, KernelEmbedding, build_pyramid, fim_forward, kernel_channels
from kpdeblur.numerics import crop2d, leaky_relu, pad_to_multiple, upsample_nearest2
from kpdeblur.numerics.fft import spectral_filter
from kpdeblur.numerics.nn import Conv2d, Module, parameter

SCALES = 3


@dataclass
class DeblurNetConfig:
    in_channels: int = 3
    channels: tuple = (32, 64, 128)
    enc_blocks: int = 2
    dec_blocks: int = 2
    kernel_prior: bool = True
    use_fim_encoder: bool = True
    use_fim_decoder: bool = True
    fim_residual: bool = True
    multiscale: bool = True
    k: int = 13
    kernel_channels: int = 32
    spectral_patch: int = 4
    zero_init: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != SCALES:
            raise ParameterError(f"expected {SCALES} channel widths, got {self.channels}")
        if self.k % 2 == 0:
            raise ParameterError(f"kernel size must be odd, got {self.k}")

    def fim_scales(self):
        return list(range(SCALES)) if self.multiscale else [0]

    def to_text(self):
        lines = []
        for key, val in asdict(self).items():
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key}={val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ParameterError(f"unknown config key {key!r}")
            kw[key] = _parse_value(val, types[key])
        return cls(**kw)


def _parse_value(val, typ):
    if typ in (bool, "bool"):
        if val.lower() not in ("true", "false", "1", "0"):
            raise ParameterError(f"not a boolean: {val!r}")
        return val.lower() in ("true", "1")
    if typ in (int, "int"):
        return int(val)
    if typ in (float, "float"):
        return float(val)
    if typ in (tuple, "tuple"):
        return tuple(int(v) for v in val.split(","))
    return val


class FTBlock(Module):
    """Frequency self-attention sub-layer, then a patch-spectral feed-forward.

    ``x1 = x + out(FA(q, k, v))`` with q, k, v all projected from x;
    ``x2 = x1 + out(ifft(W * fft(act(in(x1)))))`` on non-overlapping patches.
    """

    def __init__(self, channels, spectral_patch=4, zero_init=True, slope=0.1):
        self.patch = spectral_patch
        self.slope = slope
        self.attn = FIMBlock(channels, channels, residual=True, zero_init=zero_init)
        self.ffn_in = Conv2d(channels, channels, 1)
        self.ffn_spec = parameter((channels, 1, 1, spectral_patch, spectral_patch), "ones")
        self.ffn_out = Conv2d(channels, channels, 1, zero_init=zero_init)


def patch_spectral_filter(x, weight, p):
    """Multiply every ``p x p`` patch spectrum by ``weight`` [C,1,1,p,p]; real part back."""
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ParameterError(f"spatial dims {h}x{w} not divisible by spectral patch {p}")
    t = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 1, 2, 4, 3, 5)
    t = spectral_filter(t, weight)
    return t.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def ftb_forward(block, x):
    x1 = fim_forward(block.attn, x, x)
    h = leaky_relu(block.ffn_in(x1), block.slope)
    h = patch_spectral_filter(h, block.ffn_spec, block.patch)
    return x1 + block.ffn_out(h)


class Backbone(Module):
    def __init__(self, cfg):
        c = cfg.channels
        n_e, n_d = cfg.enc_blocks, cfg.dec_blocks
        ftb = lambda ch: FTBlock(ch, cfg.spectral_patch, cfg.zero_init)  # noqa: E731
        self.shallow = Conv2d(cfg.in_channels, c[0], 3)
        self.enc = [[ftb(c[s]) for _ in range(n_e)] for s in range(SCALES)]
        self.down = [Conv2d(c[s], c[s + 1], 3, stride=2) for s in range(SCALES - 1)]
        self.up = [Conv2d(c[s + 1], c[s], 3) for s in range(SCALES - 1)]
        self.dec = [[ftb(c[s]) for _ in range(n_d)] for s in range(SCALES)]
        self.out = Conv2d(c[0], cfg.in_channels, 3, zero_init=cfg.zero_init)

    def named_parameters(self, prefix=""):
        # nested block lists: backbone.<enc|dec><scale>.<block>.<name>
        for key, val in vars(self).items():
            if key in ("enc", "dec"):
                for s, group in enumerate(val):
                    for i, blk in enumerate(group):
                        yield from blk.named_parameters(f"{prefix}{key}{s}.{i}.")
        yield from Module.named_parameters(self, prefix)


class FIMSet(Module):
    """Kernel embedding plus one FIM per active insertion site."""

    def __init__(self, cfg):
        scales = cfg.fim_scales()
        d = cfg.kernel_channels
        self.embed = KernelEmbedding(cfg.k, d)
        self.enc = {f"enc{s}": FIMBlock(cfg.channels[s], d, residual=cfg.fim_residual, zero_init=cfg.zero_init)
                    for s in scales if cfg.use_fim_encoder}
        self.dec = {f"dec{s}": FIMBlock(cfg.channels[s], d, residual=cfg.fim_residual, zero_init=cfg.zero_init)
                    for s in scales if cfg.use_fim_decoder}

    def named_parameters(self, prefix=""):
        yield from self.embed.named_parameters(prefix + "embed.")
        for site, blk in list(self.enc.items()) + list(self.dec.items()):
            yield from blk.named_parameters(f"{prefix}{site}.")

    def site(self, name):
        return self.enc.get(name) or self.dec.get(name)


class DeblurNet(Module):
    def __init__(self, cfg=None):
        self.cfg = cfg or DeblurNetConfig()
        self.backbone = Backbone(self.cfg)
        self.fim = FIMSet(self.cfg) if self.cfg.kernel_prior else None

    @property
    def multiple(self):
        return 4 * self.cfg.spectral_patch

    def named_parameters(self, prefix=""):
        yield from self.backbone.named_parameters(prefix + "backbone.")
        if self.fim is not None:
            yield from self.fim.named_parameters(prefix + "fim.")

    def kernel_pyramid(self, field):
        """Embed a kernel field and build the three-scale pyramid (pads like the image)."""
        feat = self.fim.embed(kernel_channels(field))
        return build_pyramid(feat)

    def __call__(self, y, field=None):
        """Restore ``y`` [B,C,H,W] of any size, padding and cropping as needed."""
        if self.cfg.kernel_prior and field is None:
            raise ParameterError("kernel prior enabled but no kernel field given")
        y_p, (h, w) = pad_to_multiple(y, self.multiple)
        pyramid = None
        if self.cfg.kernel_prior:
            taps, _ = pad_to_multiple(kernel_channels(field), self.multiple)
            pyramid = build_pyramid(self.fim.embed(taps))
        return crop2d(deblur_forward(self, y_p, pyramid), h, w)


def deblur_forward(net, y, pyramid=None):
    cfg = net.cfg
    if cfg.kernel_prior and pyramid is None:
        raise ParameterError("kernel prior enabled but no kernel pyramid given")
    h, w = y.shape[-2:]
    if h % net.multiple or w % net.multiple:
        raise ParameterError(f"input {h}x{w} must be divisible by {net.multiple}; pad first")
    bb = net.backbone
    fims = net.fim if cfg.kernel_prior else None
    x = bb.shallow(y)
    skips = []
    for s in range(SCALES):
        if fims is not None and f"enc{s}" in fims.enc:
            x = fim_forward(fims.enc[f"enc{s}"], x, pyramid[s])
        for blk in bb.enc[s]:
            x = ftb_forward(blk, x)
        if s < SCALES - 1:
            skips.append(x)
            x = bb.down[s](x)
    for s in reversed(range(SCALES)):
        if s < SCALES - 1:
            x = bb.up[s](upsample_nearest2(x)) + skips[s]
        if fims is not None and f"dec{s}" in fims.dec:
            x = fim_forward(fims.dec[f"dec{s}"], x, pyramid[s])
        for blk in bb.dec[s]:
            x = ftb_forward(blk, x)
    return y + bb.out(x)
