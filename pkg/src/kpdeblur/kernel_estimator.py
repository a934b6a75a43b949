"""Blind per-pixel kernel prediction with a small U-Net and the reblur loss."""

from kpdeblur.blur import PixelKernelField, normalize_kernels, reblur
from kpdeblur.errors import InternalError, ParameterError
from kpdeblur.numerics import as_tensor, concat, crop2d, leaky_relu, pad_to_multiple, tabs, upsample_nearest2
from kpdeblur.numerics.nn import Conv2d, Module


class KernelEstimatorNet(Module):
    """U-Net mapping a blurry image to ``k*k`` kernel logits per pixel.

    Stride-2 convs go down, nearest-neighbour upsampling plus a conv goes up,
    skips are concatenated; every hidden conv is followed by a leaky ReLU.
    """

    def __init__(self, k=13, in_channels=3, width=32, levels=3, slope=0.1):
        if k % 2 == 0:
            raise ParameterError(f"kernel size must be odd, got {k}")
        if levels < 1:
            raise ParameterError("need at least one level")
        self.k = k
        self.levels = levels
        self.slope = slope
        widths = [width * 2 ** i for i in range(levels)]
        self.stem = Conv2d(in_channels, width)
        self.enc = [Conv2d(c, c) for c in widths]
        self.down = [Conv2d(widths[i], widths[i + 1], stride=2) for i in range(levels - 1)]
        self.up = [Conv2d(widths[i + 1], widths[i]) for i in range(levels - 1)]
        self.fuse = [Conv2d(2 * widths[i], widths[i]) for i in range(levels - 1)]
        self.head = Conv2d(width, k * k)

    @property
    def multiple(self):
        return 2 ** (self.levels - 1)

    def __call__(self, y):
        act = lambda t: leaky_relu(t, self.slope)  # noqa: E731
        h = act(self.stem(y))
        skips = []
        for i in range(self.levels):
            h = act(self.enc[i](h))
            if i < self.levels - 1:
                skips.append(h)
                h = act(self.down[i](h))
        for i in reversed(range(self.levels - 1)):
            h = act(self.up[i](upsample_nearest2(h)))
            h = act(self.fuse[i](concat([h, skips[i]], axis=1)))
        return self.head(h)


def estimate_kernels(net, y):
    """Predict a normalized kernel field for every image in the batch ``y``."""
    y = as_tensor(y)
    if y.ndim == 3:
        y = y.reshape((1,) + y.shape)
    padded, (h, w) = pad_to_multiple(y, net.multiple)
    if padded.shape[2] % net.multiple or padded.shape[3] % net.multiple:
        raise InternalError("padding failed to reach the U-Net size multiple")
    logits = crop2d(net(padded), h, w)  # [B, k*k, H, W]
    b = logits.shape[0]
    k = net.k
    raw = logits.transpose(0, 2, 3, 1).reshape(b, h, w, k, k)
    return normalize_kernels(raw)


def l1(a, b):
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    return tabs(a - b).mean()


def loss_ke(field, x, y):
    """Mean absolute error between ``reblur(x, field)`` and the observed blur ``y``."""
    x, y = as_tensor(x), as_tensor(y)
    if not isinstance(field, PixelKernelField):
        field = PixelKernelField(as_tensor(field))
    if x.shape != y.shape:
        raise ParameterError(f"shape mismatch: {x.shape} vs {y.shape}")
    return l1(reblur(x, field, validate=False), y)
