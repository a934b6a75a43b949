import io
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpdeblur.errors import InternalError, ParameterError, ParseError
from kpdeblur.numerics import (
    Tape,
    Tensor,
    avg_pool2,
    backward,
    cmul,
    conv2d,
    cscale,
    dwconv2d,
    fft2,
    grad_check,
    ifft2,
    ifft2_complex,
    layer_norm,
    pad2d,
    precision,
    softmax,
    spectral_filter,
    spectral_product,
    spectral_product_composed,
    upsample_nearest2,
)
from kpdeblur.numerics.fft import ComplexGrid
from kpdeblur.numerics.io import archive_to_bytes, read_archive, read_tensor, tensor_to_bytes

from kpdeblur import oracles


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


# -- conv2d ---------------------------------------------------------------
def test_conv2d_all_ones_corners():
    out = conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), T([0.0]), 1, 1).data[0, 0]
    assert out[1, 1] == 9
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_delta_is_identity(rng, k):
    x = rng.normal(size=(2, 3, 7, 6))
    w = np.zeros((3, 3, k, k))
    for c in range(3):
        w[c, c, k // 2, k // 2] = 1
    out = conv2d(T(x), T(w), T(np.zeros(3)), 1, k // 2)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv2d_matches_loop(rng, stride, pad):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = conv2d(T(x), T(w), T(b), stride, pad)
    np.testing.assert_allclose(out.data, oracles.conv2d_loop(x, w, b, stride, pad), atol=1e-10)


def test_conv2d_matches_loop_f32(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    with precision(32):
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(4)), 1, 1)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.data, oracles.conv2d_loop(x, w, np.zeros(4), 1, 1), atol=1e-5)


def test_conv2d_errors():
    x = T(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ParameterError):
        conv2d(x, T(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ParameterError):
        conv2d(x, T(np.zeros((1, 2, 2, 2))))


# -- dwconv2d -------------------------------------------------------------
def test_dwconv_delta_identity(rng):
    x = rng.normal(size=(1, 4, 6, 6))
    w = np.zeros((4, 1, 3, 3))
    w[:, 0, 1, 1] = 1
    np.testing.assert_array_equal(dwconv2d(T(x), T(w), T(np.zeros(4))).data, x)


def test_dwconv_channel_independence(rng):
    x = np.zeros((1, 2, 5, 5))
    x[0, 0] = rng.normal(size=(5, 5))
    w = rng.normal(size=(2, 1, 3, 3))
    out = dwconv2d(T(x), T(w), T([0.3, -0.7])).data
    np.testing.assert_array_equal(out[0, 1], np.full((5, 5), -0.7))


def test_dwconv_matches_loop(rng):
    x = rng.normal(size=(1, 4, 6, 6))
    w = rng.normal(size=(4, 1, 3, 3))
    b = rng.normal(size=4)
    np.testing.assert_allclose(dwconv2d(T(x), T(w), T(b)).data, oracles.dwconv2d_loop(x, w, b), atol=1e-10)


def test_dwconv_filter_count_error():
    with pytest.raises(ParameterError):
        dwconv2d(T(np.zeros((1, 3, 4, 4))), T(np.zeros((2, 1, 3, 3))))


# -- layer_norm -----------------------------------------------------------
def test_layer_norm_constant_channels():
    x = np.broadcast_to(np.arange(12.0).reshape(1, 1, 3, 4), (1, 5, 3, 4))
    out = layer_norm(T(x), T(np.ones(5)), T(np.zeros(5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_plus_minus_one():
    x = np.zeros((1, 2, 3, 3))
    x[0, 0], x[0, 1] = 1, -1
    out = layer_norm(T(x), T(np.ones(2)), T(np.zeros(2)), eps=1e-6)
    np.testing.assert_allclose(out.data, x, atol=1e-5)


def test_layer_norm_zero_mean_unit_var(rng):
    x = rng.normal(3, 2, size=(2, 6, 4, 5))
    out = layer_norm(T(x), T(np.ones(6)), T(np.zeros(6))).data
    for n in range(2):
        for i in range(4):
            for j in range(5):
                col = [out[n, c, i, j] for c in range(6)]
                m = sum(col) / 6
                assert abs(m) < 1e-6
                v = sum((c - m) ** 2 for c in col) / 6
                assert abs(v - 1) < 1e-4


def test_layer_norm_eps_guard():
    with pytest.raises(ParameterError):
        layer_norm(T(np.zeros((1, 1, 2, 2))), eps=0.0)


# -- FFT ------------------------------------------------------------------
def test_fft_delta_and_constant():
    d = np.zeros((1, 1, 4, 6))
    d[..., 0, 0] = 1
    X = fft2(T(d))
    np.testing.assert_allclose(X.real.data, 1)
    np.testing.assert_allclose(X.imag.data, 0)
    C = fft2(T(np.full((1, 1, 4, 6), 2.5)))
    expected = np.zeros((4, 6))
    expected[0, 0] = 2.5 * 24
    np.testing.assert_allclose(C.real.data[0, 0], expected, atol=1e-12)
    np.testing.assert_allclose(C.imag.data[0, 0], 0, atol=1e-12)


def test_fft_matches_naive_dft_f32(rng):
    x = rng.normal(size=(4, 4))
    ref = oracles.dft2_naive(x)
    with precision(32):
        X = fft2(Tensor(x[None, None]))
    np.testing.assert_allclose(X.real.data[0, 0], ref.real, atol=1e-4)
    np.testing.assert_allclose(X.imag.data[0, 0], ref.imag, atol=1e-4)


def test_fft_round_trip_and_symmetry(rng):
    x = rng.normal(size=(2, 3, 5, 8))
    X = fft2(T(x))
    np.testing.assert_allclose(ifft2(X).data, x, atol=1e-12)
    z = X.numpy()
    # conjugate symmetry: X[-p,-q] = conj(X[p,q])
    flipped = np.roll(z[..., ::-1, ::-1], (1, 1), axis=(-2, -1))
    np.testing.assert_allclose(flipped, np.conj(z), atol=1e-10)


def test_parseval(rng):
    x = rng.normal(size=(1, 2, 6, 7))
    X = fft2(T(x))
    lhs = (x ** 2).sum() * 42
    assert abs(lhs - X.abs2().sum()) / lhs < 1e-5


def test_cmul_identities(rng):
    z = ComplexGrid(T(rng.normal(size=(2, 3, 3))), T(rng.normal(size=(2, 3, 3))))
    one = ComplexGrid(T(np.ones((2, 3, 3))), T(np.zeros((2, 3, 3))))
    out = cmul(one, z)
    np.testing.assert_array_equal(out.real.data, z.real.data)
    np.testing.assert_array_equal(out.imag.data, z.imag.data)
    i = ComplexGrid(T(np.zeros((1, 1))), T(np.ones((1, 1))))
    sq = cmul(i, i)
    assert sq.real.data[0, 0] == -1 and sq.imag.data[0, 0] == 0


def test_cmul_matches_loop(rng):
    a = rng.normal(size=(2, 4, 4)) + 1j * rng.normal(size=(2, 4, 4))
    b = rng.normal(size=(2, 4, 4)) + 1j * rng.normal(size=(2, 4, 4))
    out = cmul(ComplexGrid(T(a.real), T(a.imag)), ComplexGrid(T(b.real), T(b.imag)))
    for idx in np.ndindex(a.shape):
        p = complex(a[idx]) * complex(b[idx])
        assert out.real.data[idx] == p.real
        assert out.imag.data[idx] == p.imag


def test_cmul_shape_mismatch():
    z = ComplexGrid(T(np.zeros((2, 2))), T(np.zeros((2, 2))))
    w = ComplexGrid(T(np.zeros((3, 2))), T(np.zeros((3, 2))))
    with pytest.raises(ParameterError):
        cmul(z, w)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_convolution_theorem(h, w, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(h, w)), r.normal(size=(h, w))
    out = spectral_product(T(a[None, None]), T(b[None, None])).data[0, 0]
    assert np.max(np.abs(out - oracles.circular_conv_loop(a, b))) < 1e-10


def test_fused_spectral_ops_match_composition(rng):
    q, k = T(rng.normal(size=(2, 3, 6, 7))), T(rng.normal(size=(2, 3, 6, 7)))
    np.testing.assert_allclose(spectral_product(q, k).data, spectral_product_composed(q, k).data, atol=1e-12)
    x, w = T(rng.normal(size=(2, 3, 2, 2, 4, 4))), T(rng.normal(size=(3, 1, 1, 4, 4)))
    composed = ifft2(cscale(fft2(x), w))
    np.testing.assert_allclose(spectral_filter(x, w).data, composed.data, atol=1e-12)


def test_convolution_theorem_f32(rng):
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    with precision(32):
        out = spectral_product(Tensor(a[None, None]), Tensor(b[None, None])).data[0, 0]
    assert np.max(np.abs(out - oracles.circular_conv_loop(a, b))) < 1e-5


# -- pooling / padding ------------------------------------------------------
def test_avg_pool2(rng):
    np.testing.assert_array_equal(avg_pool2(T(np.full((1, 1, 4, 4), 0.7))).data, 0.7)
    assert avg_pool2(T([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 2.5
    x = rng.normal(size=(1, 3, 8, 8))
    np.testing.assert_allclose(avg_pool2(T(x)).data, oracles.avg_pool2_loop(x), rtol=0, atol=1e-15)
    with pytest.raises(ParameterError):
        avg_pool2(T(np.zeros((1, 1, 3, 4))))


@pytest.mark.parametrize("op", ["conv", "dw", "fft", "pool"])
def test_linearity(rng, op):
    x = rng.normal(size=(1, 2, 4, 4))
    alpha = -1.7
    w = rng.normal(size=(3, 2, 3, 3))
    wd = rng.normal(size=(2, 1, 3, 3))
    f = {
        "conv": lambda a: conv2d(T(a), T(w), None, 1, 1).data,
        "dw": lambda a: dwconv2d(T(a), T(wd)).data,
        "fft": lambda a: fft2(T(a)).numpy(),
        "pool": lambda a: avg_pool2(T(a)).data,
    }[op]
    np.testing.assert_allclose(f(alpha * x), alpha * f(x), atol=1e-12)


# -- autodiff ---------------------------------------------------------------
def test_backward_sum_and_square(rng):
    x = T(rng.normal(size=(3, 4)), grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, 1)
    y = T(rng.normal(size=(3, 4)), grad=True)
    backward((y * y).sum())
    np.testing.assert_allclose(y.grad, 2 * y.data)


def test_backward_fan_out_accumulates():
    x = T([1.0, 2.0], grad=True)
    backward((x * 3 + x * x + x).sum())
    np.testing.assert_allclose(x.grad, [3 + 2 + 1, 3 + 4 + 1])


def test_backward_rejects_non_scalar():
    x = T([1.0, 2.0], grad=True)
    with pytest.raises(ParameterError):
        backward(x * 2)


def test_tape_is_topological(rng):
    x = T(rng.normal(size=(2, 2)), grad=True)
    y = x * x
    z = (y + x).sum()
    tape = Tape.from_loss(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_tape_cycle_detection():
    a = T([1.0], grad=True)
    b = a * 2
    c = b * 2
    b._parents = (c,)  # forge a cycle
    with pytest.raises(InternalError):
        Tape.from_loss(c.sum())


def test_grad_check_sum_is_exact(rng):
    x = T(rng.normal(size=(2, 3)), grad=True)
    assert grad_check(lambda ins: ins[0].sum(), [x]) < 1e-10


def test_grad_check_layer_norm_sum_squares(rng):
    x = T(rng.normal(size=(1, 4, 3, 3)), grad=True)
    g = T(rng.normal(size=4), grad=True)
    b = T(rng.normal(size=4), grad=True)
    err = grad_check(lambda ins: (layer_norm(*ins) ** 2).sum(), [x, g, b])
    assert err < 1e-6


def _weighted(t, r):
    return (t * T(r)).sum()


PRIMITIVES = {
    "conv2d": lambda r: ([T(r.normal(size=(1, 3, 4, 4)), 1), T(r.normal(size=(2, 3, 3, 3)), 1), T(r.normal(size=2), 1)],
                         lambda i: conv2d(i[0], i[1], i[2], 1, 1)),
    "conv2d_s2": lambda r: ([T(r.normal(size=(1, 2, 4, 4)), 1), T(r.normal(size=(2, 2, 3, 3)), 1), T(r.normal(size=2), 1)],
                            lambda i: conv2d(i[0], i[1], i[2], 2, 1)),
    "conv1x1": lambda r: ([T(r.normal(size=(1, 3, 4, 4)), 1), T(r.normal(size=(2, 3, 1, 1)), 1), T(r.normal(size=2), 1)],
                          lambda i: conv2d(i[0], i[1], i[2], 1, 0)),
    "dwconv2d": lambda r: ([T(r.normal(size=(1, 4, 4, 4)), 1), T(r.normal(size=(4, 1, 3, 3)), 1), T(r.normal(size=4), 1)],
                           lambda i: dwconv2d(*i)),
    "layer_norm": lambda r: ([T(r.normal(size=(1, 4, 4, 4)), 1), T(r.normal(size=4), 1), T(r.normal(size=4), 1)],
                             lambda i: layer_norm(*i)),
    "avg_pool2": lambda r: ([T(r.normal(size=(1, 4, 4, 4)), 1)], lambda i: avg_pool2(i[0])),
    "upsample": lambda r: ([T(r.normal(size=(1, 2, 2, 2)), 1)], lambda i: upsample_nearest2(i[0])),
    "fft2_real": lambda r: ([T(r.normal(size=(1, 4, 4, 4)), 1)], lambda i: fft2(i[0]).real),
    "fft2_imag": lambda r: ([T(r.normal(size=(1, 4, 4, 4)), 1)], lambda i: fft2(i[0]).imag),
    "ifft2": lambda r: ([T(r.normal(size=(1, 4, 4, 4)), 1), T(r.normal(size=(1, 4, 4, 4)), 1)],
                        lambda i: ifft2(ComplexGrid(i[0], i[1]))),
    "ifft2_imag": lambda r: ([T(r.normal(size=(1, 4, 4, 4)), 1), T(r.normal(size=(1, 4, 4, 4)), 1)],
                             lambda i: ifft2_complex(ComplexGrid(i[0], i[1])).imag),
    "cmul": lambda r: ([T(r.normal(size=(4, 4)), 1) for _ in range(4)],
                       lambda i: cmul(ComplexGrid(i[0], i[1]), ComplexGrid(i[2], i[3])).imag),
    "spectral_product": lambda r: ([T(r.normal(size=(2, 2, 4, 5)), 1), T(r.normal(size=(2, 2, 4, 5)), 1)],
                                   lambda i: spectral_product(i[0], i[1])),
    "spectral_filter": lambda r: ([T(r.normal(size=(1, 3, 2, 2, 4, 4)), 1), T(r.normal(size=(3, 1, 1, 4, 4)), 1)],
                                  lambda i: spectral_filter(i[0], i[1])),
    "softmax": lambda r: ([T(r.normal(size=(3, 5)), 1)], lambda i: softmax(i[0], -1)),
    "pad_replicate": lambda r: ([T(r.normal(size=(1, 2, 3, 4)), 1)], lambda i: pad2d(i[0], 2, mode="replicate")),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    r = np.random.default_rng(zlib.crc32(name.encode()))
    inputs, fn = PRIMITIVES[name](r)
    weights = r.normal(size=fn(inputs).shape)
    assert grad_check(lambda i: _weighted(fn(i), weights), inputs) < 1e-4


def test_determinism(rng):
    x = rng.normal(size=(1, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    with precision(32):
        a = conv2d(Tensor(x), Tensor(w), None, 1, 1).data
        b = conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    assert a.tobytes() == b.tobytes()


# -- file format ------------------------------------------------------------
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_file_round_trip(rng, dtype):
    a = rng.normal(size=(2, 3, 4)).astype(dtype)
    raw = tensor_to_bytes(a)
    assert raw[:4] == b"FDT1"
    assert raw[4:8] == (3).to_bytes(4, "little")
    assert raw[20] == np.dtype(dtype).itemsize
    b = read_tensor(io.BytesIO(raw))
    assert b.dtype == dtype
    np.testing.assert_array_equal(a, b)


def test_tensor_file_errors():
    with pytest.raises(ParseError) as exc:
        read_tensor(io.BytesIO(b"XXXX"))
    assert exc.value.offset == 0
    raw = tensor_to_bytes(np.zeros((2, 2)))
    with pytest.raises(ParseError):
        read_tensor(io.BytesIO(raw[:-3]))


def test_archive_round_trip(rng):
    named = {"a.weight": rng.normal(size=(2, 2)), "ünï": np.zeros(3, dtype=np.float32)}
    back = read_archive(io.BytesIO(archive_to_bytes(named)))
    assert list(back) == list(named)
    for k in named:
        np.testing.assert_array_equal(back[k], named[k])
