"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_ckernels`` module. All
volumetric arrays are channels-last, ``(B, D, H, W, C)``; convolution
kernels are ``(kd, kh, kw, Cin, Cout)``. Convolutions here are *valid*
cross-correlations over an already padded input; padding is the caller's job.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MODE_PRODUCT = 0
MODE_INVERSE_LOGISTIC = 1


def _out_size(padded, k, s):
    return tuple((p - kk) // ss + 1 for p, kk, ss in zip(padded, k, s))


def conv3d_forward(xp, w, stride, num_threads=1):
    B, Dp, Hp, Wp, _ = xp.shape
    kd, kh, kw, _, co = w.shape
    sd, sh, sw = stride
    Do, Ho, Wo = _out_size((Dp, Hp, Wp), (kd, kh, kw), stride)
    out = np.zeros((B, Do, Ho, Wo, co), dtype=xp.dtype)
    for a, b, c in itertools.product(range(kd), range(kh), range(kw)):
        view = xp[:, a:a + sd * (Do - 1) + 1:sd,
                  b:b + sh * (Ho - 1) + 1:sh,
                  c:c + sw * (Wo - 1) + 1:sw, :]
        out += view @ w[a, b, c]
    return out


def conv3d_backward_input(g, w, stride, padded_shape, num_threads=1):
    """Adjoint of :func:`conv3d_forward` with respect to its input."""
    B, Do, Ho, Wo, _ = g.shape
    kd, kh, kw, ci, _ = w.shape
    sd, sh, sw = stride
    Dp, Hp, Wp = padded_shape
    dx = np.zeros((B, Dp, Hp, Wp, ci), dtype=g.dtype)
    for a, b, c in itertools.product(range(kd), range(kh), range(kw)):
        dx[:, a:a + sd * (Do - 1) + 1:sd,
           b:b + sh * (Ho - 1) + 1:sh,
           c:c + sw * (Wo - 1) + 1:sw, :] += g @ w[a, b, c].T
    return dx


def conv3d_backward_weight(xp, g, ksize, stride, num_threads=1):
    B, Do, Ho, Wo, co = g.shape
    ci = xp.shape[-1]
    kd, kh, kw = ksize
    sd, sh, sw = stride
    dw = np.zeros((kd, kh, kw, ci, co), dtype=g.dtype)
    g2 = g.reshape(-1, co)
    for a, b, c in itertools.product(range(kd), range(kh), range(kw)):
        view = xp[:, a:a + sd * (Do - 1) + 1:sd,
                  b:b + sh * (Ho - 1) + 1:sh,
                  c:c + sw * (Wo - 1) + 1:sw, :]
        dw[a, b, c] = view.reshape(-1, ci).T @ g2
    return dw


def maxpool3d_forward(x, window, stride):
    """Returns the pooled array and flat ``d*H*W + h*W + w`` argmax indices."""
    B, D, H, W, C = x.shape
    wd, wh, ww = window
    sd, sh, sw = stride
    Do, Ho, Wo = _out_size((D, H, W), window, stride)
    win = sliding_window_view(x, (wd, wh, ww), axis=(1, 2, 3))
    win = win[:, ::sd, ::sh, ::sw][:, :Do, :Ho, :Wo]
    flat = win.reshape(B, Do, Ho, Wo, C, wd * wh * ww)
    local = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    la, lb, lc = np.unravel_index(local, (wd, wh, ww))
    od = np.arange(Do)[None, :, None, None, None] * sd
    oh = np.arange(Ho)[None, None, :, None, None] * sh
    ow = np.arange(Wo)[None, None, None, :, None] * sw
    argmax = ((od + la) * H + (oh + lb)) * W + (ow + lc)
    return np.ascontiguousarray(out), argmax.astype(np.int64)


def maxpool3d_backward(g, argmax, input_shape):
    B, D, H, W, C = input_shape
    dx = np.zeros((B, C, D * H * W), dtype=g.dtype)
    gb = np.moveaxis(g, 4, 1).reshape(B, C, -1)
    ab = np.moveaxis(argmax, 4, 1).reshape(B, C, -1)
    bi = np.arange(B)[:, None, None]
    ci = np.arange(C)[None, :, None]
    np.add.at(dx, (bi, ci, ab), gb)
    return np.moveaxis(dx.reshape(B, C, D, H, W), 1, 4)


def bilinear_sample(matte, width, height, x, y):
    """Edge-clamped bilinear lookup; zero outside ``[-0.5, size - 0.5)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (x >= -0.5) & (x < width - 0.5) & (y >= -0.5) & (y < height - 0.5)
    xc = np.clip(np.nan_to_num(x), 0.0, width - 1)
    yc = np.clip(np.nan_to_num(y), 0.0, height - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    tx = xc - x0
    ty = yc - y0
    top = matte[y0, x0] * (1.0 - tx) + matte[y0, x1] * tx
    bot = matte[y1, x0] * (1.0 - tx) + matte[y1, x1] * tx
    val = top * (1.0 - ty) + bot * ty
    return np.where(inside, val, 0.0)


def pvh_occupancy(centers, proj, mattes, sizes, mode, num_threads=1):
    n = centers.shape[0]
    homo = np.concatenate([centers, np.ones((n, 1))], axis=1)
    occ = np.ones(n)
    for c in range(proj.shape[0]):
        cam = homo @ proj[c].T
        depth = cam[:, 2]
        front = depth > 0
        safe = np.where(front, depth, 1.0)
        width, height = int(sizes[c, 0]), int(sizes[c, 1])
        p = bilinear_sample(mattes[c], width, height, cam[:, 0] / safe, cam[:, 1] / safe)
        p = np.where(front, p, 0.0)
        if mode == MODE_PRODUCT:
            occ *= p
        else:
            occ *= 1.0 / (1.0 + np.exp(p))
    return np.clip(occ, 0.0, 1.0)
