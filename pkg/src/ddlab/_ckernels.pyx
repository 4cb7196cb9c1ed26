# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused float64 kernels for the autodiff hot path.

Mirrors ``ddlab._kernels_py`` one-for-one. Inputs must be C-contiguous
float64; row-wise kernels take 2-D arrays and reduce over axis 1.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma,
                   const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d))
    xhat_arr = np.empty((n, d))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mean, var, r, c
    for i in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mean
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            c = (x[i, j] - mean) * r
            xhat[i, j] = c
            out[i, j] = c * gamma[j] + beta[j]
    return out_arr, xhat_arr, rstd_arr


def layer_norm_bwd(const double[:, ::1] g, const double[:, ::1] xhat,
                   const double[::1] gamma, const double[::1] rstd):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    dx_arr = np.empty((n, d))
    dgamma_arr = np.zeros(d)
    dbeta_arr = np.zeros(d)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double a, b, gh
    for i in range(n):
        a = 0.0
        b = 0.0
        for j in range(d):
            gh = g[i, j] * gamma[j]
            a += gh
            b += gh * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        a /= d
        b /= d
        for j in range(d):
            dx[i, j] = (g[i, j] * gamma[j] - a - xhat[i, j] * b) * rstd[i]
    return dx_arr, dgamma_arr, dbeta_arr


def softmax_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d))
    cdef double[:, ::1] out = out_arr
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        for j in range(d):
            out[i, j] = x[i, j] - m
    np.exp(out_arr, out=out_arr)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += out[i, j]
        s = 1.0 / s
        for j in range(d):
            out[i, j] = out[i, j] * s
    return out_arr


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    out_arr = np.empty((n, d))
    cdef double[:, ::1] out = out_arr
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += g[i, j] * y[i, j]
        for j in range(d):
            out[i, j] = y[i, j] * (g[i, j] - s)
    return out_arr


def log_softmax_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d))
    tmp_arr = np.empty((n, d))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] tmp = tmp_arr
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        for j in range(d):
            out[i, j] = x[i, j] - m
    np.exp(out_arr, out=tmp_arr)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += tmp[i, j]
        s = log(s)
        for j in range(d):
            out[i, j] = out[i, j] - s
    return out_arr


def log_softmax_bwd(const double[:, ::1] out, const double[:, ::1] g):
    cdef Py_ssize_t n = out.shape[0], d = out.shape[1], i, j
    dx_arr = np.exp(out)
    cdef double[:, ::1] dx = dx_arr
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += g[i, j]
        for j in range(d):
            dx[i, j] = g[i, j] - dx[i, j] * s
    return dx_arr


def gelu_fwd(x_in):
    """Returns (gelu(x), t) where t = tanh(c (x + a x^3)) is reused by the backward."""
    cdef const double[::1] x = x_in.reshape(-1)
    cdef Py_ssize_t n = x.shape[0], i
    t_arr = np.empty(x_in.shape)
    out_arr = np.empty(x_in.shape)
    cdef double[::1] t = t_arr.reshape(-1)
    cdef double[::1] out = out_arr.reshape(-1)
    cdef double v
    for i in range(n):
        v = x[i]
        t[i] = GELU_C * (v + GELU_A * v * v * v)
    np.tanh(t_arr, out=t_arr)
    for i in range(n):
        out[i] = 0.5 * x[i] * (1.0 + t[i])
    return out_arr, t_arr


def gelu_bwd(x_in, t_in, g_in):
    cdef const double[::1] x = x_in.reshape(-1)
    cdef const double[::1] t = t_in.reshape(-1)
    cdef const double[::1] g = g_in.reshape(-1)
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(x_in.shape)
    cdef double[::1] out = out_arr.reshape(-1)
    cdef double v, dt
    for i in range(n):
        v = x[i]
        dt = (1.0 - t[i] * t[i]) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        out[i] = g[i] * (0.5 * (1.0 + t[i]) + 0.5 * v * dt)
    return out_arr


def linf_step(x_in, delta_in, direction_in, double alpha, double eps):
    cdef const double[::1] x = x_in.reshape(-1)
    cdef const double[::1] delta = delta_in.reshape(-1)
    cdef const double[::1] direction = direction_in.reshape(-1)
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(x_in.shape)
    cdef double[::1] out = out_arr.reshape(-1)
    cdef double d, s
    for i in range(n):
        s = direction[i]
        if s > 0:
            d = delta[i] + alpha
        elif s < 0:
            d = delta[i] - alpha
        else:
            d = delta[i]
        if d > eps:
            d = eps
        if d < -eps:
            d = -eps
        if d < -x[i]:
            d = -x[i]
        if d > 1.0 - x[i]:
            d = 1.0 - x[i]
        out[i] = d
    return out_arr
