# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels: masked softmax, layer norm, GELU and softmax cross-entropy.

All arrays are C-contiguous float64. Shapes are 2-D row views prepared by the caller.
"""
import numpy as np

from libc.math cimport exp, log, sqrt, tanh, isfinite

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715


cdef inline Py_ssize_t _limit(Py_ssize_t r, Py_ssize_t rows, bint causal,
                              Py_ssize_t offset, Py_ssize_t n) nogil:
    cdef Py_ssize_t lim
    if not causal:
        return n
    lim = (r % rows) + offset + 1
    if lim > n:
        lim = n
    return lim


def softmax_fwd(double[:, ::1] x, Py_ssize_t rows, bint causal, Py_ssize_t offset):
    cdef Py_ssize_t R = x.shape[0], n = x.shape[1], r, j, lim
    out = np.zeros((R, n))
    cdef double[:, ::1] y = out
    cdef double m, s, v
    cdef int bad = 0
    with nogil:
        for r in range(R):
            lim = _limit(r, rows, causal, offset, n)
            m = x[r, 0]
            for j in range(lim):
                v = x[r, j]
                if not isfinite(v):
                    bad = 1
                if v > m:
                    m = v
            s = 0.0
            for j in range(lim):
                v = exp(x[r, j] - m)
                y[r, j] = v
                s += v
            for j in range(lim):
                y[r, j] = y[r, j] / s
    if bad:
        raise FloatingPointError("non-finite value entering softmax")
    return out


def softmax_bwd(double[:, ::1] y, double[:, ::1] gy, Py_ssize_t rows, bint causal,
                Py_ssize_t offset):
    cdef Py_ssize_t R = y.shape[0], n = y.shape[1], r, j, lim
    out = np.zeros((R, n))
    cdef double[:, ::1] gx = out
    cdef double dot
    with nogil:
        for r in range(R):
            lim = _limit(r, rows, causal, offset, n)
            dot = 0.0
            for j in range(lim):
                dot += gy[r, j] * y[r, j]
            for j in range(lim):
                gx[r, j] = y[r, j] * (gy[r, j] - dot)
    return out


def layer_norm_fwd(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t R = x.shape[0], d = x.shape[1], r, j
    out = np.empty((R, d))
    xhat_arr = np.empty((R, d))
    rstd_arr = np.empty(R)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xh = xhat_arr
    cdef double[::1] rs = rstd_arr
    cdef double mu, var, t, inv
    cdef int bad = 0
    with nogil:
        for r in range(R):
            mu = 0.0
            for j in range(d):
                t = x[r, j]
                if not isfinite(t):
                    bad = 1
                mu += t
            mu = mu / d
            var = 0.0
            for j in range(d):
                t = x[r, j] - mu
                var += t * t
            var = var / d
            inv = 1.0 / sqrt(var + eps)
            rs[r] = inv
            for j in range(d):
                t = (x[r, j] - mu) * inv
                xh[r, j] = t
                y[r, j] = t * gain[j] + bias[j]
    if bad:
        raise FloatingPointError("non-finite value entering layer_norm")
    return out, xhat_arr, rstd_arr


def layer_norm_bwd(double[:, ::1] gy, double[:, ::1] xhat, double[::1] rstd,
                   double[::1] gain):
    cdef Py_ssize_t R = gy.shape[0], d = gy.shape[1], r, j
    gx_arr = np.empty((R, d))
    gg_arr = np.zeros(d)
    gb_arr = np.zeros(d)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double a, b, t
    with nogil:
        for r in range(R):
            a = 0.0
            b = 0.0
            for j in range(d):
                t = gy[r, j] * gain[j]
                a += t
                b += t * xhat[r, j]
                gg[j] += gy[r, j] * xhat[r, j]
                gb[j] += gy[r, j]
            a = a / d
            b = b / d
            for j in range(d):
                gx[r, j] = rstd[r] * (gy[r, j] * gain[j] - a - xhat[r, j] * b)
    return gx_arr, gg_arr, gb_arr


def gelu_fwd(double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n)
    cdef double[::1] y = out
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            y[i] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out


def gelu_bwd(double[::1] x, double[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n)
    cdef double[::1] gx = out
    cdef double v, t
    with nogil:
        for i in range(n):
            v = x[i]
            t = tanh(GELU_C * (v + GELU_A * v * v * v))
            gx[i] = gy[i] * (0.5 * (1.0 + t)
                             + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v))
    return out


def xent_fwd(double[:, ::1] logits, long long[::1] targets, long long ignore_index):
    """Returns (summed nll, counted rows, probabilities)."""
    cdef Py_ssize_t R = logits.shape[0], V = logits.shape[1], r, j
    probs_arr = np.zeros((R, V))
    cdef double[:, ::1] p = probs_arr
    cdef double m, s, lse, total = 0.0, v
    cdef Py_ssize_t count = 0
    cdef long long t
    cdef int bad = 0
    with nogil:
        for r in range(R):
            t = targets[r]
            if t == ignore_index:
                continue
            m = logits[r, 0]
            for j in range(V):
                v = logits[r, j]
                if not isfinite(v):
                    bad = 1
                if v > m:
                    m = v
            s = 0.0
            for j in range(V):
                v = exp(logits[r, j] - m)
                p[r, j] = v
                s += v
            lse = m + log(s)
            for j in range(V):
                p[r, j] = p[r, j] / s
            total += lse - logits[r, t]
            count += 1
    if bad:
        raise FloatingPointError("non-finite logits entering cross_entropy")
    return total, count, probs_arr
