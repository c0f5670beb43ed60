# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused kernels: single pass loops, no temporaries."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, erf, sqrt

cnp.import_array()

cdef double SQRT1_2 = 0.70710678118654752440
cdef double INV_SQRT_2PI = 0.39894228040143267794


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    cdef double m, s
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, cols):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(cols):
            out[i, j] = exp(x[i, j] - m)
            s += out[i, j]
        for j in range(cols):
            out[i, j] /= s
    return out_arr


def softmax_backward(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1], i, j
    cdef double dot
    out_arr = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(rows):
        dot = 0.0
        for j in range(cols):
            dot += g[i, j] * y[i, j]
        for j in range(cols):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out_arr


def gelu_forward(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = x[i] * 0.5 * (1.0 + erf(x[i] * SQRT1_2))
    return out_arr


def gelu_backward(const double[::1] x, const double[::1] g):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        v = x[i]
        out[i] = g[i] * (0.5 * (1.0 + erf(v * SQRT1_2)) + v * INV_SQRT_2PI * exp(-0.5 * v * v))
    return out_arr


def batchnorm_train_forward(const double[:, :, ::1] x, const double[::1] gamma,
                            const double[::1] beta, double eps):
    cdef Py_ssize_t B = x.shape[0], D = x.shape[1], N = x.shape[2], b, d, t
    cdef double n = <double>(B * N), acc, c
    out_arr = np.empty((B, D, N), dtype=np.float64)
    xhat_arr = np.empty((B, D, N), dtype=np.float64)
    mean_arr = np.zeros(D, dtype=np.float64)
    var_arr = np.zeros(D, dtype=np.float64)
    invstd_arr = np.empty(D, dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] xhat = xhat_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    cdef double[::1] invstd = invstd_arr
    for b in range(B):
        for d in range(D):
            acc = 0.0
            for t in range(N):
                acc += x[b, d, t]
            mean[d] += acc
    for d in range(D):
        mean[d] /= n
    for b in range(B):
        for d in range(D):
            acc = 0.0
            for t in range(N):
                c = x[b, d, t] - mean[d]
                acc += c * c
            var[d] += acc
    for d in range(D):
        var[d] /= n
        invstd[d] = 1.0 / sqrt(var[d] + eps)
    for b in range(B):
        for d in range(D):
            for t in range(N):
                c = (x[b, d, t] - mean[d]) * invstd[d]
                xhat[b, d, t] = c
                out[b, d, t] = c * gamma[d] + beta[d]
    return out_arr, xhat_arr, mean_arr, var_arr, invstd_arr


def batchnorm_train_backward(const double[:, :, ::1] xhat, const double[::1] invstd,
                             const double[::1] gamma, const double[:, :, ::1] g):
    cdef Py_ssize_t B = xhat.shape[0], D = xhat.shape[1], N = xhat.shape[2], b, d, t
    cdef double n = <double>(B * N), a1, a2, s1, s2
    dx_arr = np.empty((B, D, N), dtype=np.float64)
    dgamma_arr = np.zeros(D, dtype=np.float64)
    dbeta_arr = np.zeros(D, dtype=np.float64)
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    for b in range(B):
        for d in range(D):
            a1 = 0.0
            a2 = 0.0
            for t in range(N):
                a1 += g[b, d, t]
                a2 += g[b, d, t] * xhat[b, d, t]
            dbeta[d] += a1
            dgamma[d] += a2
    for b in range(B):
        for d in range(D):
            s1 = gamma[d] * dbeta[d]
            s2 = gamma[d] * dgamma[d]
            for t in range(N):
                dx[b, d, t] = (invstd[d] / n) * (n * gamma[d] * g[b, d, t] - s1 - xhat[b, d, t] * s2)
    return dx_arr, dgamma_arr, dbeta_arr


def patchify_padded(const double[:, ::1] x, Py_ssize_t patch_len, Py_ssize_t stride):
    cdef Py_ssize_t R = x.shape[0], L = x.shape[1], r, p, j, src
    cdef Py_ssize_t n = (L - patch_len) // stride + 2
    out_arr = np.empty((R, patch_len, n), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for r in range(R):
        for p in range(patch_len):
            for j in range(n):
                src = j * stride + p
                if src >= L:
                    src = L - 1
                out[r, p, j] = x[r, src]
    return out_arr
