"""Tensor engine: autodiff, conv/norm/pool primitives, FFT, file formats."""

from kpdeblur.numerics.fft import (
    ComplexGrid,
    cmul,
    cscale,
    fft2,
    ifft2,
    ifft2_complex,
    spectral_filter,
    spectral_product,
    spectral_product_composed,
)
from kpdeblur.numerics.gradcheck import grad_check
from kpdeblur.numerics.ops import (
    avg_pool2,
    conv2d,
    crop2d,
    dwconv2d,
    layer_norm,
    pad2d,
    pad_to_multiple,
    upsample_nearest2,
)
from kpdeblur.numerics.tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    concat,
    exp,
    get_dtype,
    get_precision,
    leaky_relu,
    mean,
    no_grad,
    precision,
    set_debug,
    set_precision,
    softmax,
    sqrt,
    tabs,
    tsum,
)
