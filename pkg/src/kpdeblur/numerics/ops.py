"""Convolution, normalization, pooling and padding primitives (NCHW layout)."""

import numpy as np

from kpdeblur.errors import ParameterError
from kpdeblur.numerics.tensor import as_tensor, make_result


def _check_4d(x, what="input"):
    if x.ndim != 4:
        raise ParameterError(f"{what} must be 4-d [B,C,H,W], got shape {x.shape}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation with zero padding, like every deep-learning conv layer."""
    _check_4d(x)
    if weight.ndim != 4:
        raise ParameterError(f"weight must be 4-d, got shape {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError(f"kernel size must be odd, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ParameterError(f"input has {x.shape[1]} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ParameterError(f"bias shape {bias.shape} does not match {cout} filters")
    if stride < 1 or padding < 0:
        raise ParameterError("stride must be >= 1 and padding >= 0")
    b, _, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ParameterError("input too small for kernel")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weight.data
    # channel-major im2col: rows (c, u, v), columns (b, i, j)
    cols = np.empty((cin, kh, kw, b, ho, wo), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xp[:, :, u : u + ho * stride : stride, v : v + wo * stride : stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(cin * kh * kw, b * ho * wo)
    wmat = wd.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = gb = None
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(cin, kh, kw, b, ho, wo)
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u : u + ho * stride : stride, v : v + wo * stride : stride] += dcols[:, u, v].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, backward, "conv2d")


def dwconv2d(x, weight, bias=None, padding=None):
    """Depthwise convolution: one ``kh x kw`` filter per channel, size preserving."""
    _check_4d(x)
    c = x.shape[1]
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise ParameterError(f"depthwise weight must be [{c},1,kh,kw], got {weight.shape}")
    _, _, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError(f"kernel size must be odd, got {kh}x{kw}")
    if padding is None:
        padding = (kh - 1) // 2
    if padding != (kh - 1) // 2 or kh != kw:
        raise ParameterError("depthwise conv requires square kernels with pad (k-1)/2")
    if bias is not None and bias.shape != (c,):
        raise ParameterError(f"bias shape {bias.shape} does not match {c} channels")
    _, _, h, w = x.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    wd = weight.data[:, 0]
    out = np.zeros_like(x.data)
    for u in range(kh):
        for v in range(kw):
            out += wd[None, :, u, v, None, None] * xp[:, :, u : u + h, v : v + w]
    if bias is not None:
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u : u + h, v : v + w] += wd[None, :, u, v, None, None] * g
            gx = gxp[:, :, p : p + h, p : p + w]
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for u in range(kh):
                for v in range(kw):
                    gw[:, 0, u, v] = (g * xp[:, :, u : u + h, v : v + w]).sum(axis=(0, 2, 3))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, backward, "dwconv2d")


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize over the channel axis at every spatial location."""
    _check_4d(x)
    if not eps > 0:
        raise ParameterError("layer_norm needs eps > 0")
    c = x.shape[1]
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None] if gamma is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        out = out + beta.data[None, :, None, None]

    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)

    def backward(g):
        grads = []
        gh = g * gd if gd is not None else g
        if x.requires_grad:
            gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        else:
            gx = None
        grads.append(gx)
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    if c < 1:
        raise ParameterError("layer_norm needs at least one channel")
    return make_result(out, tuple(parents), backward, "layer_norm")


def avg_pool2(x):
    """Mean over non-overlapping 2x2 blocks."""
    _check_4d(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ParameterError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return make_result(out, (x,), backward, "avg_pool2")


def upsample_nearest2(x):
    """Nearest-neighbour x2 upsampling."""
    _check_4d(x)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample_nearest2")


def _edge_index(n, before, after):
    return np.clip(np.arange(-before, n + after), 0, n - 1)


def pad2d(x, before_h, after_h=None, before_w=None, after_w=None, mode="zero"):
    """Pad the last two axes; ``mode`` is ``"zero"`` or ``"replicate"``."""
    after_h = before_h if after_h is None else after_h
    before_w = before_h if before_w is None else before_w
    after_w = before_w if after_w is None else after_w
    h, w = x.shape[-2:]
    lead = ((0, 0),) * (x.ndim - 2)
    if mode == "zero":
        out = np.pad(x.data, lead + ((before_h, after_h), (before_w, after_w)))

        def backward(g):
            return (g[..., before_h : before_h + h, before_w : before_w + w],)

    elif mode == "replicate":
        ih = _edge_index(h, before_h, after_h)
        iw = _edge_index(w, before_w, after_w)
        out = x.data[..., ih, :][..., iw]

        def backward(g):
            gw = np.zeros(g.shape[:-1] + (w,), dtype=g.dtype)
            np.add.at(gw, (Ellipsis, iw), g)
            gh = np.zeros(g.shape[:-2] + (h, w), dtype=g.dtype)
            np.add.at(gh, (Ellipsis, ih, slice(None)), gw)
            return (gh,)

    else:
        raise ParameterError(f"unknown padding mode {mode!r}")
    return make_result(np.ascontiguousarray(out), (x,), backward, "pad2d")


def crop2d(x, h, w):
    """Keep the top-left ``h x w`` window of the last two axes."""
    return x[..., :h, :w]


def pad_to_multiple(x, multiple):
    """Replicate-pad bottom/right so H and W divide ``multiple``; returns (padded, (H, W))."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    return pad2d(as_tensor(x), 0, ph, 0, pw, mode="replicate"), (h, w)
