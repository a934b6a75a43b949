"""Numerical self-checks against slow reference implementations.

Each check returns a :class:`CheckResult`; :func:`run_suite` runs them all at
64-bit precision. Used by the ``oracle`` command and by the acceptance tests.
"""

import time
import zlib
from dataclasses import dataclass

import numpy as np

from kpdeblur import oracles
from kpdeblur.backbone import DeblurNet, DeblurNetConfig, FTBlock, deblur_forward, ftb_forward
from kpdeblur.blur import _apply_field, normalize_kernels, reblur
from kpdeblur.fim import FIMBlock, build_pyramid, fa_intermediate, fim_forward
from kpdeblur.kernel_estimator import loss_ke
from kpdeblur.metrics import ssim
from kpdeblur.numerics import (
    ComplexGrid,
    Tensor,
    avg_pool2,
    cmul,
    concat,
    conv2d,
    dwconv2d,
    exp,
    fft2,
    grad_check,
    ifft2,
    ifft2_complex,
    layer_norm,
    leaky_relu,
    pad2d,
    precision,
    softmax,
    spectral_filter,
    spectral_product,
    sqrt,
    tabs,
    upsample_nearest2,
)
from kpdeblur.training import loss_phase2, loss_phase3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float = 0.0
    detail: str = ""

    @property
    def ok(self):
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self):
        status = "ok  " if self.ok else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status} {self.name:<28} max error {self.error:.3e} (tol {self.tol:.0e}, {self.seconds:.2f}s){extra}"


def _timed(name, tol, fn):
    t = time.perf_counter()
    with precision(64):
        err, detail = fn()
    return CheckResult(name, float(err), tol, time.perf_counter() - t, detail)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- forward oracles ----------------------------------------------------------
def convolution_theorem(seeds=50, max_size=16):
    """ifft2(fft2(a) * fft2(b)) against direct circular convolution."""
    def run():
        worst = 0.0
        for seed in range(seeds):
            r = np.random.default_rng(seed)
            h, w = r.integers(1, max_size + 1, 2)
            a, b = r.normal(size=(h, w)), r.normal(size=(h, w))
            ref = oracles.circular_conv_direct(a, b)
            composed = ifft2(cmul(fft2(T(a)), fft2(T(b)))).data
            fused = spectral_product(T(a[None, None]), T(b[None, None])).data[0, 0]
            worst = max(worst, np.max(np.abs(composed - ref)), np.max(np.abs(fused - ref)))
        return worst, f"{seeds} seeds, planes up to {max_size}x{max_size}"
    return _timed("convolution_theorem", 1e-10, run)


def dft_naive(cases=6):
    def run():
        worst = 0.0
        r = np.random.default_rng(101)
        for _ in range(cases):
            h, w = r.integers(1, 9, 2)
            a = r.normal(size=(h, w))
            spec = fft2(T(a))
            worst = max(worst, np.max(np.abs(spec.numpy() - oracles.dft2_naive(a))))
        return worst, ""
    return _timed("fft_vs_naive_dft", 1e-10, run)


def conv_loops():
    def run():
        r = np.random.default_rng(202)
        worst = 0.0
        for stride, pad, ksz in ((1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 2, 5)):
            x, w, b = r.normal(size=(2, 3, 7, 6)), r.normal(size=(4, 3, ksz, ksz)), r.normal(size=4)
            out = conv2d(T(x), T(w), T(b), stride, pad).data
            worst = max(worst, np.max(np.abs(out - oracles.conv2d_loop(x, w, b, stride, pad))))
        x, w, b = r.normal(size=(2, 3, 6, 5)), r.normal(size=(3, 1, 3, 3)), r.normal(size=3)
        worst = max(worst, np.max(np.abs(dwconv2d(T(x), T(w), T(b)).data - oracles.dwconv2d_loop(x, w, b))))
        x = r.normal(size=(1, 2, 6, 4))
        worst = max(worst, np.max(np.abs(avg_pool2(T(x)).data - oracles.avg_pool2_loop(x))))
        return worst, "conv2d, depthwise, pooling"
    return _timed("convolution_loops", 1e-10, run)


def reblur_cases(cases=20, size=12):
    def run():
        worst = 0.0
        for i in range(cases):
            r = np.random.default_rng(1000 + i)
            k = (3, 5)[i % 2]
            x = r.random((3, size, size))
            field = normalize_kernels(T(r.normal(size=(size, size, k, k)) * 2))
            out = reblur(T(x[None]), field).data[0]
            worst = max(worst, np.max(np.abs(out - oracles.reblur_loop(x, field.numpy()[0]))))
        return worst, f"{cases} cases, {size}x{size}, k in (3, 5)"
    return _timed("reblur_loop", 1e-10, run)


def fa_delta_identity():
    def run():
        r = np.random.default_rng(303)
        q = np.zeros((2, 3, 8, 8))
        q[:, :, 0, 0] = 1.0
        k = r.normal(size=q.shape)
        return np.max(np.abs(fa_intermediate(T(q), T(k)).data - k)), ""
    return _timed("fa_delta_identity", 1e-10, run)


def ssim_pairs(pairs=10):
    def run():
        worst = 0.0
        for i in range(pairs):
            r = np.random.default_rng(400 + i)
            a = r.random((3, 14, 13))
            b = np.clip(a + 0.3 * r.normal(size=a.shape), 0, 1)
            worst = max(worst, abs(ssim(a, b) - oracles.ssim_direct(a, b)))
        return worst, f"{pairs} random pairs"
    return _timed("ssim_direct", 1e-6, run)


# -- gradients ----------------------------------------------------------------
def _weighted(out, r):
    return (out * T(r.normal(size=out.shape))).sum()


def _field_logits(r, b, h, w, k):
    return T(r.normal(size=(b, h, w, k, k)), True)


def _tiny_deblur(r):
    cfg = DeblurNetConfig(channels=(4, 8, 16), enc_blocks=1, dec_blocks=1, k=3, kernel_channels=4, zero_init=False)
    net = DeblurNet(cfg).initialize(int(r.integers(1 << 30)))
    y = T(r.random((1, 3, 16, 16)), True)
    taps = T(r.normal(size=(1, 9, 16, 16)))
    weights = r.normal(size=(1, 3, 16, 16))

    def f(_):
        pyr = build_pyramid(net.fim.embed(taps))
        return (deblur_forward(net, y, pyr) * T(weights)).sum()
    return [y] + net.parameters(), f


def _fim(r):
    blk = FIMBlock(4, 3, zero_init=False).initialize(int(r.integers(1 << 30)))
    x, kv = T(r.normal(size=(1, 4, 4, 4)), True), T(r.normal(size=(1, 3, 4, 4)), True)
    w = r.normal(size=(1, 4, 4, 4))
    return [x, kv] + blk.parameters(), lambda _: (fim_forward(blk, x, kv) * T(w)).sum()


def _ftb(r):
    blk = FTBlock(4, zero_init=False).initialize(int(r.integers(1 << 30)))
    blk.ffn_spec.data = r.normal(size=blk.ffn_spec.shape)
    x = T(r.normal(size=(1, 4, 8, 8)), True)
    w = r.normal(size=(1, 4, 8, 8))
    return [x] + blk.parameters(), lambda _: (ftb_forward(blk, x) * T(w)).sum()


def _loss_ke(r):
    logits, x, y = _field_logits(r, 1, 6, 6, 3), T(r.random((1, 3, 6, 6)), True), T(r.random((1, 3, 6, 6)))
    return [logits, x], lambda _: loss_ke(normalize_kernels(logits), x, y)


def _loss_phase2(r):
    xh, x = T(r.random((1, 3, 6, 6)), True), T(r.random((1, 3, 6, 6)))
    return [xh], lambda _: loss_phase2(xh, x, 0.1)


def _loss_phase3(r):
    xh, x, y = T(r.random((1, 3, 6, 6)), True), T(r.random((1, 3, 6, 6))), T(r.random((1, 3, 6, 6)))
    logits = _field_logits(r, 1, 6, 6, 3)
    return [xh, logits], lambda _: loss_phase3(xh, x, y, normalize_kernels(logits), 0.1, 0.1)


def _prim(shapes, fn, positive=False):
    def build(r):
        ins = [T(np.abs(r.normal(size=s)) + 0.5 if positive else r.normal(size=s), True) for s in shapes]
        w = r.normal(size=fn(ins).shape)
        return ins, lambda i: (fn(i) * T(w)).sum()
    return build


GRADIENT_CASES = {
    "add": _prim([(3, 4), (4,)], lambda i: i[0] + i[1]),
    "sub": _prim([(3, 4), (3, 1)], lambda i: i[0] - i[1]),
    "mul": _prim([(3, 4), (3, 4)], lambda i: i[0] * i[1]),
    "div": _prim([(3, 4), (3, 4)], lambda i: i[0] / i[1], positive=True),
    "pow": _prim([(3, 4)], lambda i: i[0] ** 3),
    "sqrt": _prim([(3, 4)], lambda i: sqrt(i[0]), positive=True),
    "exp": _prim([(3, 4)], lambda i: exp(i[0])),
    "abs": _prim([(3, 4)], lambda i: tabs(i[0])),
    "leaky_relu": _prim([(3, 4)], lambda i: leaky_relu(i[0], 0.1)),
    "sum_mean": _prim([(2, 3, 4)], lambda i: i[0].sum(axis=1) + i[0].mean(axis=1)),
    "reshape_transpose": _prim([(2, 3, 4)], lambda i: i[0].reshape(6, 4).transpose(1, 0)),
    "getitem": _prim([(4, 5)], lambda i: i[0][1:3, ::2]),
    "concat": _prim([(2, 3), (2, 2)], lambda i: concat([i[0], i[1]], axis=1)),
    "softmax": _prim([(3, 5)], lambda i: softmax(i[0], -1)),
    "conv2d": _prim([(1, 3, 5, 5), (2, 3, 3, 3), (2,)], lambda i: conv2d(i[0], i[1], i[2], 1, 1)),
    "conv2d_stride2": _prim([(1, 2, 6, 6), (3, 2, 3, 3), (3,)], lambda i: conv2d(i[0], i[1], i[2], 2, 1)),
    "dwconv2d": _prim([(1, 3, 5, 5), (3, 1, 3, 3), (3,)], lambda i: dwconv2d(i[0], i[1], i[2])),
    "layer_norm": _prim([(1, 4, 3, 3), (4,), (4,)], lambda i: layer_norm(i[0], i[1], i[2])),
    "avg_pool2": _prim([(1, 2, 4, 4)], lambda i: avg_pool2(i[0])),
    "upsample_nearest2": _prim([(1, 2, 3, 3)], lambda i: upsample_nearest2(i[0])),
    "pad_replicate": _prim([(1, 2, 3, 4)], lambda i: pad2d(i[0], 2, 1, 0, 2, mode="replicate")),
    "pad_zero": _prim([(1, 2, 3, 4)], lambda i: pad2d(i[0], 1, mode="zero")),
    "fft2": _prim([(1, 2, 4, 5)], lambda i: (lambda s: s.real * 0.7 + s.imag * 1.3)(fft2(i[0]))),
    "ifft2_complex": _prim([(2, 4, 4), (2, 4, 4)],
                           lambda i: (lambda z: z.real + 2.0 * z.imag)(ifft2_complex(ComplexGrid(i[0], i[1])))),
    "cmul": _prim([(4, 4)] * 4, lambda i: (lambda z: z.real - z.imag)(cmul(ComplexGrid(i[0], i[1]),
                                                                         ComplexGrid(i[2], i[3])))),
    "spectral_product": _prim([(1, 2, 4, 5), (1, 2, 4, 5)], lambda i: spectral_product(i[0], i[1])),
    "spectral_filter": _prim([(1, 2, 2, 2, 4, 4), (2, 1, 1, 4, 4)], lambda i: spectral_filter(i[0], i[1])),
    "reblur_apply": _prim([(1, 2, 6, 7), (1, 4, 5, 3, 3)], lambda i: _apply_field(i[0], i[1])),
    "fim_forward": _fim,
    "ftb_forward": _ftb,
    "deblur_forward": _tiny_deblur,
    "loss_ke": _loss_ke,
    "loss_phase2": _loss_phase2,
    "loss_phase3": _loss_phase3,
}

# large parameter sets are spot-checked on a few random coordinates per tensor
_MAX_COORDS = {"deblur_forward": 4, "ftb_forward": 12}


def gradient_check(name):
    def run():
        r = np.random.default_rng(zlib.crc32(name.encode()))
        inputs, fn = GRADIENT_CASES[name](r)
        return grad_check(fn, inputs, max_coords=_MAX_COORDS.get(name)), ""
    return _timed(f"grad:{name}", 1e-4, run)


def gradient_suite():
    return [gradient_check(name) for name in GRADIENT_CASES]


def run_suite(gradients=True):
    results = [convolution_theorem(), dft_naive(), conv_loops(), reblur_cases(), fa_delta_identity(), ssim_pairs()]
    if gradients:
        results += gradient_suite()
    return results
