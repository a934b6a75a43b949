"""Parameter containers and the small set of layers the networks are built from."""

import zlib

import numpy as np

from kpdeblur.errors import ParameterError
from kpdeblur.numerics.ops import conv2d, dwconv2d, layer_norm
from kpdeblur.numerics.tensor import Tensor, get_dtype


def parameter(shape, init="fan_in", fan_in=None):
    t = Tensor(np.zeros(shape), requires_grad=True)
    t.init = init
    t.fan_in = fan_in
    return t


class Module:
    """Attribute-walking parameter store.

    Parameters are Tensors flagged ``requires_grad``; child Modules and lists of
    Modules are walked in attribute order, which fixes checkpoint names.
    """

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise ParameterError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ParameterError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def initialize(self, seed, prefix=""):
        """Fill every parameter from a generator keyed on (seed, parameter name).

        Keying on the name keeps a parameter's initial value independent of
        which other modules exist, so ablation variants share their common
        weights exactly.
        """
        for name, p in self.named_parameters(prefix):
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            p.data = init_array(p, rng)
        return self

    def to_precision(self):
        """Recast parameters to the current default dtype."""
        dt = get_dtype()
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data, dtype=dt)
        return self

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def init_array(p, rng):
    dt = p.dtype
    if p.init == "zeros":
        return np.zeros(p.shape, dtype=dt)
    if p.init == "ones":
        return np.ones(p.shape, dtype=dt)
    if p.init == "fan_in":
        fan = p.fan_in or int(np.prod(p.shape[1:])) or 1
        bound = 1.0 / np.sqrt(fan)
        return rng.uniform(-bound, bound, size=p.shape).astype(dt)
    raise ParameterError(f"unknown init rule {p.init!r}")


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, zero_init=False):
        if k % 2 == 0:
            raise ParameterError(f"kernel size must be odd, got {k}")
        self.stride = stride
        self.padding = (k - 1) // 2
        rule = "zeros" if zero_init else "fan_in"
        fan = cin * k * k
        self.weight = parameter((cout, cin, k, k), rule, fan)
        self.bias = parameter((cout,), rule, fan)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DWConv2d(Module):
    def __init__(self, channels, k=3):
        self.weight = parameter((channels, 1, k, k), "fan_in", k * k)
        self.bias = parameter((channels,), "fan_in", k * k)

    def __call__(self, x):
        return dwconv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-5):
        self.eps = eps
        self.gamma = parameter((channels,), "ones")
        self.beta = parameter((channels,), "zeros")

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)
