# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; mirror of :mod:`pvhnet._pykernels`.

Parallel loops only partition over independent outputs (batch, depth slice
or kernel offset) so results do not depend on the thread count.
"""

import numpy as np
from cython.parallel cimport prange
from cython.parallel cimport threadid
from libc.math cimport exp, floor
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef inline void _gemm(char* ta, char* tb, int m, int n, int k, real alpha, real* a, int lda,
                       real* b, int ldb, real beta, real* c, int ldc) noexcept nogil:
    if real is float:
        sgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef inline void _im2col_slice(real[:, :, :, :, ::1] xp, Py_ssize_t b, Py_ssize_t od,
                               Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                               Py_ssize_t kd, Py_ssize_t kh, Py_ssize_t kw,
                               Py_ssize_t Ho, Py_ssize_t Wo, real* patch) noexcept nogil:
    # patch row r = oh*Wo + ow; columns ordered (a, bb, c, ci) to match w.reshape(K, co)
    cdef Py_ssize_t ci = xp.shape[4], seg = kw * ci, K = kd * kh * kw * ci
    cdef Py_ssize_t oh, ow, a, bb
    for oh in range(Ho):
        for ow in range(Wo):
            for a in range(kd):
                for bb in range(kh):
                    memcpy(patch + (oh * Wo + ow) * K + (a * kh + bb) * seg,
                           &xp[b, od * sd + a, oh * sh + bb, ow * sw, 0],
                           seg * sizeof(real))


cdef inline void _col2im_slice(real[:, :, :, :, ::1] dx, Py_ssize_t b, Py_ssize_t od,
                               Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                               Py_ssize_t kd, Py_ssize_t kh, Py_ssize_t kw,
                               Py_ssize_t Ho, Py_ssize_t Wo, real* patch) noexcept nogil:
    cdef Py_ssize_t ci = dx.shape[4], seg = kw * ci, K = kd * kh * kw * ci
    cdef Py_ssize_t oh, ow, a, bb, t
    cdef real* src
    cdef real* dst
    for oh in range(Ho):
        for ow in range(Wo):
            for a in range(kd):
                for bb in range(kh):
                    src = patch + (oh * Wo + ow) * K + (a * kh + bb) * seg
                    dst = &dx[b, od * sd + a, oh * sh + bb, ow * sw, 0]
                    for t in range(seg):
                        dst[t] = dst[t] + src[t]


def conv3d_forward(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] w, stride,
                   int num_threads=1):
    """Valid strided cross-correlation, one im2col slice + gemm per (batch, depth)."""
    cdef Py_ssize_t B = xp.shape[0], ci = xp.shape[4]
    cdef Py_ssize_t kd = w.shape[0], kh = w.shape[1], kw = w.shape[2], co = w.shape[4]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t Do = (xp.shape[1] - kd) // sd + 1
    cdef Py_ssize_t Ho = (xp.shape[2] - kh) // sh + 1
    cdef Py_ssize_t Wo = (xp.shape[3] - kw) // sw + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, max(Do, 0), max(Ho, 0), max(Wo, 0), co), dtype=dtype)
    if Do <= 0 or Ho <= 0 or Wo <= 0:
        return out
    cdef int nt = max(1, num_threads)
    cdef Py_ssize_t M = Ho * Wo, K = kd * kh * kw * ci
    buf = np.empty((nt, M * K), dtype=dtype)
    cdef real[:, ::1] patches = buf
    cdef real[:, :, :, :, ::1] o = out
    cdef Py_ssize_t bd, b, od
    cdef int tid
    cdef real* patch
    for bd in prange(B * Do, nogil=True, num_threads=nt, schedule="static"):
        tid = threadid()
        b = bd // Do
        od = bd % Do
        patch = &patches[tid, 0]
        _im2col_slice(xp, b, od, sd, sh, sw, kd, kh, kw, Ho, Wo, patch)
        # row-major out(M x co) = patch(M x K) @ w(K x co)
        _gemm(b"N", b"N", <int>co, <int>M, <int>K, <real>1.0, &w[0, 0, 0, 0, 0], <int>co,
              patch, <int>K, <real>0.0, &o[b, od, 0, 0, 0], <int>co)
    return out


def conv3d_backward_input(real[:, :, :, :, ::1] g, real[:, :, :, :, ::1] w, stride,
                          padded_shape, int num_threads=1):
    """Adjoint of :func:`conv3d_forward`: gemm into a patch, then col2im scatter."""
    cdef Py_ssize_t B = g.shape[0], Do = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t co = g.shape[4]
    cdef Py_ssize_t kd = w.shape[0], kh = w.shape[1], kw = w.shape[2], ci = w.shape[3]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    dtype = np.float32 if real is float else np.float64
    dx = np.zeros((B, padded_shape[0], padded_shape[1], padded_shape[2], ci), dtype=dtype)
    if B == 0 or Do == 0 or Ho == 0 or Wo == 0:
        return dx
    cdef Py_ssize_t M = Ho * Wo, K = kd * kh * kw * ci
    cdef int nt = max(1, num_threads)
    buf = np.empty((nt, M * K), dtype=dtype)
    cdef real[:, ::1] patches = buf
    cdef real[:, :, :, :, ::1] d = dx
    cdef Py_ssize_t b, od
    cdef int tid
    cdef real* patch
    # neighbouring depth slices overlap in dx, so only the batch axis is split
    for b in prange(B, nogil=True, num_threads=nt, schedule="static"):
        tid = threadid()
        patch = &patches[tid, 0]
        for od in range(Do):
            # row-major patch(M x K) = g(M x co) @ w(K x co)^T
            _gemm(b"T", b"N", <int>K, <int>M, <int>co, <real>1.0, &w[0, 0, 0, 0, 0], <int>co,
                  &g[b, od, 0, 0, 0], <int>co, <real>0.0, patch, <int>K)
            _col2im_slice(d, b, od, sd, sh, sw, kd, kh, kw, Ho, Wo, patch)
    return dx


def conv3d_backward_weight(real[:, :, :, :, ::1] xp, real[:, :, :, :, ::1] g, ksize, stride,
                           int num_threads=1):
    cdef Py_ssize_t B = g.shape[0], Do = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t co = g.shape[4], ci = xp.shape[4]
    cdef Py_ssize_t kd = ksize[0], kh = ksize[1], kw = ksize[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    dtype = np.float32 if real is float else np.float64
    cdef Py_ssize_t M = Ho * Wo, K = kd * kh * kw * ci
    cdef int nt = max(1, num_threads)
    # one accumulator per thread, summed in a fixed order afterwards
    acc_arr = np.zeros((nt, K, co), dtype=dtype)
    if B == 0 or Do == 0 or M == 0:
        return acc_arr[0].reshape(kd, kh, kw, ci, co)
    buf = np.empty((nt, M * K), dtype=dtype)
    cdef real[:, ::1] patches = buf
    cdef real[:, :, ::1] acc = acc_arr
    cdef Py_ssize_t bd, b, od
    cdef int tid
    cdef real* patch
    for bd in prange(B * Do, nogil=True, num_threads=nt, schedule="static"):
        tid = threadid()
        b = bd // Do
        od = bd % Do
        patch = &patches[tid, 0]
        _im2col_slice(xp, b, od, sd, sh, sw, kd, kh, kw, Ho, Wo, patch)
        # row-major acc(K x co) += patch(M x K)^T @ g(M x co)
        _gemm(b"N", b"T", <int>co, <int>K, <int>M, <real>1.0, &g[b, od, 0, 0, 0], <int>co,
              patch, <int>K, <real>1.0, &acc[tid, 0, 0], <int>co)
    total = acc_arr[0].copy()
    for t in range(1, nt):
        total += acc_arr[t]
    return total.reshape(kd, kh, kw, ci, co)


def maxpool3d_forward(real[:, :, :, :, ::1] x, window, stride):
    cdef Py_ssize_t B = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3], C = x.shape[4]
    cdef Py_ssize_t wd = window[0], wh = window[1], ww = window[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t Do = (D - wd) // sd + 1, Ho = (H - wh) // sh + 1, Wo = (W - ww) // sw + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, Do, Ho, Wo, C), dtype=dtype)
    arg = np.empty((B, Do, Ho, Wo, C), dtype=np.int64)
    cdef real[:, :, :, :, ::1] o = out
    cdef long long[:, :, :, :, ::1] am = arg
    cdef Py_ssize_t b, od, oh, ow, ch, a, bb, c, best_idx, idx
    cdef real best, v
    with nogil:
        for b in range(B):
            for od in range(Do):
                for oh in range(Ho):
                    for ow in range(Wo):
                        for ch in range(C):
                            best_idx = -1
                            best = 0
                            for a in range(wd):
                                for bb in range(wh):
                                    for c in range(ww):
                                        v = x[b, od * sd + a, oh * sh + bb, ow * sw + c, ch]
                                        if best_idx < 0 or v > best:
                                            best = v
                                            best_idx = ((od * sd + a) * H + oh * sh + bb) * W + ow * sw + c
                            o[b, od, oh, ow, ch] = best
                            am[b, od, oh, ow, ch] = best_idx
    return out, arg


def maxpool3d_backward(real[:, :, :, :, ::1] g, long long[:, :, :, :, ::1] argmax, input_shape):
    cdef Py_ssize_t B = g.shape[0], Do = g.shape[1], Ho = g.shape[2], Wo = g.shape[3], C = g.shape[4]
    cdef Py_ssize_t H = input_shape[2], W = input_shape[3]
    dtype = np.float32 if real is float else np.float64
    dx = np.zeros(tuple(input_shape), dtype=dtype)
    cdef real[:, :, :, :, ::1] d = dx
    cdef Py_ssize_t b, od, oh, ow, ch, idx
    with nogil:
        for b in range(B):
            for od in range(Do):
                for oh in range(Ho):
                    for ow in range(Wo):
                        for ch in range(C):
                            idx = argmax[b, od, oh, ow, ch]
                            d[b, idx // (H * W), (idx // W) % H, idx % W, ch] += g[b, od, oh, ow, ch]
    return dx


cdef inline double _bilinear(double[:, :, ::1] mattes, Py_ssize_t cam, Py_ssize_t width,
                             Py_ssize_t height, double x, double y) noexcept nogil:
    cdef double xc, yc, tx, ty, top, bot
    cdef Py_ssize_t x0, y0, x1, y1
    if not (x >= -0.5 and x < width - 0.5 and y >= -0.5 and y < height - 0.5):
        return 0.0
    xc = x if x > 0.0 else 0.0
    if xc > width - 1:
        xc = width - 1
    yc = y if y > 0.0 else 0.0
    if yc > height - 1:
        yc = height - 1
    x0 = <Py_ssize_t> floor(xc)
    y0 = <Py_ssize_t> floor(yc)
    x1 = x0 + 1 if x0 + 1 < width else width - 1
    y1 = y0 + 1 if y0 + 1 < height else height - 1
    tx = xc - x0
    ty = yc - y0
    top = mattes[cam, y0, x0] * (1.0 - tx) + mattes[cam, y0, x1] * tx
    bot = mattes[cam, y1, x0] * (1.0 - tx) + mattes[cam, y1, x1] * tx
    return top * (1.0 - ty) + bot * ty


def pvh_occupancy(double[:, ::1] centers, double[:, :, ::1] proj, double[:, :, ::1] mattes,
                  long long[:, ::1] sizes, int mode, int num_threads=1):
    cdef Py_ssize_t n = centers.shape[0], ncam = proj.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] occ = out
    cdef Py_ssize_t i, c
    cdef double X, Y, Z, u, v, depth, p, acc
    for i in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        X = centers[i, 0]
        Y = centers[i, 1]
        Z = centers[i, 2]
        acc = 1.0
        for c in range(ncam):
            u = proj[c, 0, 0] * X + proj[c, 0, 1] * Y + proj[c, 0, 2] * Z + proj[c, 0, 3]
            v = proj[c, 1, 0] * X + proj[c, 1, 1] * Y + proj[c, 1, 2] * Z + proj[c, 1, 3]
            depth = proj[c, 2, 0] * X + proj[c, 2, 1] * Y + proj[c, 2, 2] * Z + proj[c, 2, 3]
            if depth > 0:
                p = _bilinear(mattes, c, sizes[c, 0], sizes[c, 1], u / depth, v / depth)
            else:
                p = 0.0
            if mode == 0:
                acc = acc * p
            else:
                acc = acc / (1.0 + exp(p))
        if acc < 0.0:
            acc = 0.0
        elif acc > 1.0:
            acc = 1.0
        occ[i] = acc
    return out
