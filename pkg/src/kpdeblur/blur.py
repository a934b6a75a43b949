"""Spatially-variant blur: per-pixel kernel fields and the reblur operator.

A kernel field stores one ``k x k`` kernel per output pixel, batched as a
Tensor of shape ``[B, H, W, k, k]``. Images are ``[B, C, H, W]`` Tensors (or
``[C, H, W]`` arrays at file boundaries).
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter
from scipy.special import ndtr

from kpdeblur.errors import ParameterError, ParseError, ValidationError
from kpdeblur.numerics import Tensor, as_tensor, pad2d, softmax
from kpdeblur.numerics.io import load_tensor, save_tensor
from kpdeblur.numerics.tensor import make_result

DEFAULT_K = 13


@dataclass
class PixelKernelField:
    weights: Tensor  # [B, H, W, k, k]

    def __post_init__(self):
        w = self.weights
        if not isinstance(w, Tensor):
            self.weights = w = Tensor(w)
        if w.ndim == 4:
            self.weights = w = w.reshape((1,) + w.shape)
        if w.ndim != 5 or w.shape[-1] != w.shape[-2]:
            raise ParameterError(f"kernel field must be [B,H,W,k,k], got {w.shape}")
        if w.shape[-1] % 2 == 0:
            raise ParameterError(f"kernel size must be odd, got {w.shape[-1]}")

    @classmethod
    def from_array(cls, arr):
        return cls(Tensor(np.asarray(arr)))

    @property
    def k(self):
        return self.weights.shape[-1]

    @property
    def H(self):
        return self.weights.shape[1]

    @property
    def W(self):
        return self.weights.shape[2]

    @property
    def batch(self):
        return self.weights.shape[0]

    def numpy(self):
        return self.weights.data

    def check_normalized(self, tol=1e-5):
        w = self.weights.data
        if np.any(w < -tol):
            raise ValidationError("kernel field has negative entries")
        s = w.sum(axis=(-2, -1))
        if np.max(np.abs(s - 1)) > tol:
            raise ValidationError(f"kernels do not sum to 1 (max deviation {np.max(np.abs(s - 1)):.2e})")

    def __getitem__(self, idx):
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return PixelKernelField(self.weights[idx])


def delta_field(H, W, k, batch=1):
    w = np.zeros((batch, H, W, k, k))
    w[..., k // 2, k // 2] = 1
    return PixelKernelField(Tensor(w))


def uniform_field(H, W, k, batch=1):
    return PixelKernelField(Tensor(np.full((batch, H, W, k, k), 1.0 / (k * k))))


def normalize_kernels(raw):
    """Softmax over the ``k*k`` taps of every pixel -> valid kernel field."""
    raw = as_tensor(raw)
    if raw.ndim == 4:
        raw = raw.reshape((1,) + raw.shape)
    b, h, w, k, _ = raw.shape
    flat = raw.reshape(b, h, w, k * k)
    return PixelKernelField(softmax(flat, axis=-1).reshape(b, h, w, k, k))


def _apply_field(xp, w):
    """out[b,c,i,j] = sum_uv w[b,i,j,u,v] * xp[b,c,i+u,j+v]."""
    k = w.shape[-1]
    b, h, wd = w.shape[:3]
    win = sliding_window_view(xp.data, (k, k), axis=(2, 3))
    wdat = w.data
    if wdat.shape[0] != win.shape[0]:
        wdat = np.broadcast_to(wdat, (win.shape[0],) + wdat.shape[1:])
    out = np.einsum("bchwuv,bhwuv->bchw", win, wdat, optimize=True)

    def backward(g):
        gx = gw = None
        if xp.requires_grad:
            gx = np.zeros_like(xp.data)
            for u in range(k):
                for v in range(k):
                    gx[:, :, u : u + h, v : v + wd] += g * wdat[:, None, :, :, u, v]
        if w.requires_grad:
            gw = np.einsum("bchw,bchwuv->bhwuv", g, win, optimize=True)
            if gw.shape[0] != w.shape[0]:
                gw = gw.sum(axis=0, keepdims=True)
        return gx, gw

    return make_result(np.ascontiguousarray(out), (xp, w), backward, "reblur")


def reblur(x, field, validate=True):
    """Blur ``x`` [B,C,H,W] with a per-pixel kernel field (replicate borders)."""
    x = as_tensor(x)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise ParameterError(f"image must be [B,C,H,W], got {x.shape}")
    if not isinstance(field, PixelKernelField):
        field = PixelKernelField(as_tensor(field))
    if (field.H, field.W) != x.shape[2:]:
        raise ParameterError(f"field dims {field.H}x{field.W} do not match image {x.shape[2:]}")
    if field.batch not in (1, x.shape[0]):
        raise ParameterError(f"field batch {field.batch} incompatible with image batch {x.shape[0]}")
    if validate:
        field.check_normalized()
    weights = field.weights
    if weights.dtype != x.dtype and not weights.requires_grad:
        weights = Tensor(weights.data, dtype=x.dtype)
    r = field.k // 2
    xp = pad2d(x, r, mode="replicate")
    return _apply_field(xp, weights)


# -- synthetic motion fields --------------------------------------------------
def _smooth_unit_field(rng, H, W, smoothness):
    z = rng.standard_normal((H, W))
    if smoothness > 0:
        z = gaussian_filter(z, sigma=smoothness, mode="reflect")
    sd = z.std()
    return (z - z.mean()) / sd if sd > 0 else z * 0


def motion_maps(H, W, seed, max_len, smoothness):
    """Per-pixel (angle, half-length) maps of a smooth linear-motion field."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, np.pi)
    angle = base + (np.pi / 3) * _smooth_unit_field(rng, H, W, smoothness)
    length = max_len * (0.5 + 0.5 * ndtr(_smooth_unit_field(rng, H, W, smoothness)))
    return angle, length


def rasterize_lines(angle, length, k, samples=None):
    """Bilinear rasterization of centered segments ``[-L, L]`` along ``angle``."""
    H, W = angle.shape
    r = k // 2
    n = samples or (4 * k + 1)
    t = np.linspace(-1.0, 1.0, n)
    off = length[..., None] * t  # [H,W,n]
    cy = r + off * np.sin(angle)[..., None]
    cx = r + off * np.cos(angle)[..., None]
    y0 = np.floor(cy).astype(int)
    x0 = np.floor(cx).astype(int)
    fy = cy - y0
    fx = cx - x0
    out = np.zeros((H * W, k * k))
    pix = np.broadcast_to(np.arange(H * W).reshape(H, W, 1), y0.shape)
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (1, 0, fy * (1 - fx)),
                       (0, 1, (1 - fy) * fx), (1, 1, fy * fx)):
        yy = np.clip(y0 + dy, 0, k - 1)
        xx = np.clip(x0 + dx, 0, k - 1)
        np.add.at(out, (pix.ravel(), (yy * k + xx).ravel()), wt.ravel())
    out /= out.sum(axis=1, keepdims=True)
    return out.reshape(H, W, k, k)


def synth_kernel_field(H, W, k=DEFAULT_K, seed=0, max_len=3.0, smoothness=8.0):
    """Smoothly varying linear-motion kernels, deterministic per seed."""
    if k % 2 == 0 or k < 1:
        raise ParameterError(f"kernel size must be odd, got {k}")
    if max_len < 0 or max_len > (k - 1) / 2:
        raise ParameterError(f"max_len {max_len} must lie in [0, {(k - 1) / 2}] for k={k}")
    angle, length = motion_maps(H, W, seed, max_len, smoothness)
    return PixelKernelField(Tensor(rasterize_lines(angle, length, k)[None], dtype=np.float64))


def angle_total_variation(angle):
    return np.abs(np.diff(angle, axis=0)).sum() + np.abs(np.diff(angle, axis=1)).sum()


def flip_field(field, axis="h"):
    """Mirror a field so reblur commutes with mirroring the image."""
    w = field.weights.data if isinstance(field, PixelKernelField) else np.asarray(field)
    if axis == "h":
        out = w[..., :, ::-1, :, ::-1]
    elif axis == "v":
        out = w[..., ::-1, :, ::-1, :]
    else:
        raise ParameterError(f"axis must be 'h' or 'v', got {axis!r}")
    return PixelKernelField(Tensor(np.ascontiguousarray(out), dtype=w.dtype))


# -- kernel-field files -------------------------------------------------------
def save_field(path, field, seed=None):
    """Write ``[H,W,k,k]`` as a tensor file plus a ``.txt`` sidecar header."""
    path = Path(path)
    w = field.weights.data if isinstance(field, PixelKernelField) else np.asarray(field)
    if w.ndim == 5:
        if w.shape[0] != 1:
            raise ParameterError("save_field stores one field at a time")
        w = w[0]
    save_tensor(path, w)
    H, W, k, _ = w.shape
    header = f"H={H}\nW={W}\nk={k}\nseed={'' if seed is None else seed}\n"
    path.with_name(path.name + ".txt").write_text(header)


def read_field_header(path):
    path = Path(path)
    side = path.with_name(path.name + ".txt")
    meta = {}
    for n, line in enumerate(side.read_text().splitlines()):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError(f"bad sidecar line {n + 1}: {line!r}")
        key, val = line.split("=", 1)
        meta[key.strip()] = val.strip()
    return meta


def load_field(path):
    arr = load_tensor(path)
    if arr.ndim != 4:
        raise ParseError(f"kernel field file must hold a 4-d tensor, got rank {arr.ndim}")
    meta = read_field_header(path)
    if (str(arr.shape[0]), str(arr.shape[1]), str(arr.shape[2])) != (meta.get("H"), meta.get("W"), meta.get("k")):
        raise ParseError(f"sidecar header {meta} disagrees with tensor shape {arr.shape}")
    return PixelKernelField(Tensor(arr[None], dtype=arr.dtype))
