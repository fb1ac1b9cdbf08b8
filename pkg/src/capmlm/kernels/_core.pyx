# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_fallback.py`` (same signatures)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport erf, exp, sqrt, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double SQRT1_2 = 0.70710678118654752440
cdef double INV_SQRT_2PI = 0.39894228040143267794


def wordpiece(str word, dict initial, dict cont, int unk_id, int max_len):
    cdef list out = []
    cdef Py_ssize_t n = len(word), i = 0, j
    cdef object tid
    while i < n:
        j = min(n, i + max_len)
        while j > i:
            if i == 0:
                tid = initial.get(word[i:j])
            else:
                tid = cont.get("##" + word[i:j])
            if tid is not None:
                out.append(tid)
                break
            j -= 1
        if j == i:
            out.append(unk_id)
            j = i + 1
        i = j
    return out


cdef void _gelu(real[::1] x, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = <real>(0.5 * v * (1.0 + erf(v * SQRT1_2)))


cdef void _gelu_grad(real[::1] x, real[::1] dy, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, cdf, pdf
    for i in range(n):
        v = x[i]
        cdf = 0.5 * (1.0 + erf(v * SQRT1_2))
        pdf = INV_SQRT_2PI * exp(-0.5 * v * v)
        out[i] = <real>(dy[i] * (cdf + v * pdf))


def gelu(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _gelu[float](x.reshape(-1), out.reshape(-1))
    else:
        x = x.astype(np.float64, copy=False)
        out = np.empty_like(x)
        _gelu[double](x.reshape(-1), out.reshape(-1))
    return out


def gelu_grad(x, dy):
    x = np.ascontiguousarray(x)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _gelu_grad[float](x.reshape(-1), dy.reshape(-1), out.reshape(-1))
    else:
        _gelu_grad[double](x.reshape(-1), dy.reshape(-1), out.reshape(-1))
    return out


cdef void _layernorm(real[:, ::1] x, real[::1] g, real[::1] b, double eps,
                     real[:, ::1] y, real[:, ::1] xhat, real[::1] rstd) noexcept nogil:
    cdef Py_ssize_t r, j, n = x.shape[0], d = x.shape[1]
    cdef double mu, var, t, rs, h
    for r in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            t = x[r, j] - mu
            var += t * t
        var /= d
        rs = 1.0 / sqrt(var + eps)
        rstd[r] = <real>rs
        for j in range(d):
            h = <real>((x[r, j] - mu) * rs)
            xhat[r, j] = <real>h
            y[r, j] = <real>(h * g[j] + b[j])


def layernorm(x, gamma, beta, double eps):
    x = np.ascontiguousarray(x)
    shape = x.shape
    d = shape[len(shape) - 1]
    x2 = x.reshape(-1, d)
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    rstd = np.empty(x2.shape[0], dtype=x.dtype)
    g = np.ascontiguousarray(gamma, dtype=x.dtype)
    b = np.ascontiguousarray(beta, dtype=x.dtype)
    if x.dtype == np.float32:
        _layernorm[float](x2, g, b, eps, y, xhat, rstd)
    else:
        _layernorm[double](x2, g, b, eps, y, xhat, rstd)
    return y.reshape(shape), xhat.reshape(shape), rstd.reshape(shape[:len(shape) - 1] + (1,))


cdef void _layernorm_grad(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd, real[::1] g,
                          real[:, ::1] dx, double[::1] dg, double[::1] db) noexcept nogil:
    cdef Py_ssize_t r, j, n = dy.shape[0], d = dy.shape[1]
    cdef double mg, mgx, gj
    for r in range(n):
        mg = 0.0
        mgx = 0.0
        for j in range(d):
            gj = dy[r, j] * g[j]
            mg += gj
            mgx += gj * xhat[r, j]
            dg[j] += dy[r, j] * xhat[r, j]
            db[j] += dy[r, j]
        mg /= d
        mgx /= d
        for j in range(d):
            dx[r, j] = <real>(rstd[r] * (dy[r, j] * g[j] - mg - xhat[r, j] * mgx))


def layernorm_grad(dy, xhat, rstd, gamma):
    dy = np.ascontiguousarray(dy)
    shape = dy.shape
    d = shape[len(shape) - 1]
    dy2 = dy.reshape(-1, d)
    xh2 = np.ascontiguousarray(xhat, dtype=dy.dtype).reshape(-1, d)
    rs = np.ascontiguousarray(rstd, dtype=dy.dtype).reshape(-1)
    g = np.ascontiguousarray(gamma, dtype=dy.dtype)
    dx = np.empty_like(dy2)
    dg = np.zeros(d, dtype=np.float64)
    db = np.zeros(d, dtype=np.float64)
    if dy.dtype == np.float32:
        _layernorm_grad[float](dy2, xh2, rs, g, dx, dg, db)
    else:
        _layernorm_grad[double](dy2, xh2, rs, g, dx, dg, db)
    return dx.reshape(shape), dg.astype(dy.dtype), db.astype(dy.dtype)


cdef void _masked_softmax(real[:, :, :, ::1] s, cnp.uint8_t[:, ::1] valid,
                          double[:, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t B = s.shape[0], H = s.shape[1], Q = s.shape[2], K = s.shape[3]
    cdef Py_ssize_t bi, h, q, k
    cdef double m, tot, e
    for bi in range(B):
        for h in range(H):
            for q in range(Q):
                m = -INFINITY
                for k in range(K):
                    if valid[bi, k] and s[bi, h, q, k] > m:
                        m = s[bi, h, q, k]
                tot = 0.0
                for k in range(K):
                    if valid[bi, k]:
                        e = exp(s[bi, h, q, k] - m)
                        out[bi, h, q, k] = e
                        tot += e
                    else:
                        out[bi, h, q, k] = 0.0
                for k in range(K):
                    out[bi, h, q, k] /= tot


def masked_softmax(scores, key_valid):
    s = np.ascontiguousarray(scores)
    v = np.ascontiguousarray(key_valid, dtype=np.uint8)
    out = np.empty(s.shape, dtype=np.float64)
    if s.dtype == np.float32:
        _masked_softmax[float](s, v, out)
    else:
        _masked_softmax[double](s.astype(np.float64, copy=False), v, out)
    return out
