"""Independent reference implementations used as test oracles.

These deliberately avoid the package's vectorised code paths: projection is
done with explicit scalar arithmetic and mattes are read pixel by pixel.
"""

from __future__ import annotations

import math

import numpy as np


def project_point(point, focal, principal, rotation, centre):
    """Scalar pinhole projection; returns (x, y, depth) or None behind the camera."""
    d = [point[k] - centre[k] for k in range(3)]
    # camera frame = R^T (p - T), written out as explicit dot products
    cam = [sum(rotation[r][k] * d[r] for r in range(3)) for k in range(3)]
    if cam[2] <= 0:
        return None
    return focal * cam[0] / cam[2] + principal[0], focal * cam[1] / cam[2] + principal[1], cam[2]


def bilinear(matte, x, y):
    h, w = len(matte), len(matte[0])
    if not (-0.5 <= x < w - 0.5 and -0.5 <= y < h - 0.5):
        return 0.0
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    tx, ty = x - x0, y - y0
    top = matte[y0][x0] * (1 - tx) + matte[y0][x1] * tx
    bot = matte[y1][x0] * (1 - tx) + matte[y1][x1] * tx
    return top * (1 - ty) + bot * ty


def brute_force_pvh(cameras, mattes, bbox_min, bbox_max, res, inverse_logistic=False):
    """Loop over voxels and cameras; ``cameras`` is a list of (f, (ox, oy), R, T)."""
    out = np.zeros((res, res, res))
    size = [(bbox_max[k] - bbox_min[k]) / res for k in range(3)]
    mats = [m.tolist() for m in mattes]
    rots = [np.asarray(r).tolist() for _, _, r, _ in cameras]
    for ix in range(res):
        for iy in range(res):
            for iz in range(res):
                p = (bbox_min[0] + (ix + 0.5) * size[0],
                     bbox_min[1] + (iy + 0.5) * size[1],
                     bbox_min[2] + (iz + 0.5) * size[2])
                occ = 1.0
                for (f, pp, _, t), rot, m in zip(cameras, rots, mats):
                    proj = project_point(p, f, pp, rot, t)
                    v = 0.0 if proj is None else bilinear(m, proj[0], proj[1])
                    occ *= 1.0 / (1.0 + math.exp(v)) if inverse_logistic else v
                out[ix, iy, iz] = min(max(occ, 0.0), 1.0)
    return out


def sphere_matte(focal, principal, size, rotation, centre, sphere_c, radius, supersample=4):
    """Antialiased matte of a sphere by per-subpixel ray distance tests."""
    w, h = size
    rt = np.asarray(rotation).T
    c = rt @ (np.asarray(sphere_c, dtype=float) - np.asarray(centre, dtype=float))
    out = np.zeros((h, w))
    offs = [(k + 0.5) / supersample - 0.5 for k in range(supersample)]
    for y in range(h):
        for x in range(w):
            hits = 0
            for dy in offs:
                for dx in offs:
                    d = np.array([(x + dx - principal[0]) / focal, (y + dy - principal[1]) / focal, 1.0])
                    d /= np.linalg.norm(d)
                    t = max(float(d @ c), 0.0)
                    if np.sum((d * t - c) ** 2) <= radius * radius:
                        hits += 1
            out[y, x] = hits / supersample ** 2
    return out


def conv3d_loops(x, w, b, stride=1, pad_lo=(0, 0, 0), out_shape=None):
    """Direct cross-correlation on channels-last (D, H, W, Cin) single samples."""
    k = w.shape[0]
    d, hh, ww, cin = x.shape
    cout = w.shape[4]
    od, oh, ow = out_shape
    out = np.zeros((od, oh, ow, cout))
    for i in range(od):
        for j in range(oh):
            for l in range(ow):
                for a in range(k):
                    for bb in range(k):
                        for c in range(k):
                            z, y, xx = i * stride + a - pad_lo[0], j * stride + bb - pad_lo[1], l * stride + c - pad_lo[2]
                            if 0 <= z < d and 0 <= y < hh and 0 <= xx < ww:
                                out[i, j, l] += x[z, y, xx] @ w[a, bb, c]
    return out + b
