# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core: fused attention, layer norm, and row softmax.

Same contracts as numpy_backend; callers guarantee at least one allowed
position per row and C-contiguous float32/float64 inputs.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline object _dtype_of(real x):
    if real is float:
        return np.float32
    return np.float64


def sdpa_forward(real[:, ::1] q, real[:, ::1] k, real[:, ::1] v,
                 int num_heads, double scale, object mask, int top_k):
    cdef Py_ssize_t tq = q.shape[0], d = q.shape[1], tk = k.shape[0]
    cdef Py_ssize_t dh = d // num_heads
    cdef const unsigned char[:, ::1] m = np.ascontiguousarray(mask).view(np.uint8)
    dtype = _dtype_of(<real> 0)
    out_arr = np.empty((tq, d), dtype=dtype)
    w_arr = np.empty((num_heads, tq, tk), dtype=dtype)
    scores_arr = np.empty(tk, dtype=dtype)
    keep_arr = np.empty(tk, dtype=np.uint8)
    cdef real[:, ::1] out = out_arr
    cdef real[:, :, ::1] w = w_arr
    cdef real[::1] scores = scores_arr
    cdef unsigned char[::1] keep = keep_arr
    cdef real scale_r = <real> scale
    cdef Py_ssize_t hi, i, j, c, off, best, t, allowed
    cdef real s, mx, esum, inv, acc

    for hi in range(num_heads):
        off = hi * dh
        for i in range(tq):
            allowed = 0
            for j in range(tk):
                keep[j] = m[i, j]
                if keep[j]:
                    allowed += 1
                    s = 0
                    for c in range(dh):
                        s += q[i, off + c] * k[j, off + c]
                    scores[j] = s * scale_r
            if top_k > 0 and top_k < allowed:
                # stable selection: ties keep the lower index
                for j in range(tk):
                    if keep[j]:
                        keep[j] = 2  # candidate, not yet selected
                for t in range(top_k):
                    best = -1
                    for j in range(tk):
                        if keep[j] == 2 and (best < 0 or scores[j] > scores[best]):
                            best = j
                    keep[best] = 1
                for j in range(tk):
                    if keep[j] == 2:
                        keep[j] = 0
            mx = 0
            best = -1
            for j in range(tk):
                if keep[j] and (best < 0 or scores[j] > mx):
                    mx = scores[j]
                    best = j
            esum = 0
            for j in range(tk):
                if keep[j]:
                    s = <real> exp(scores[j] - mx)
                    w[hi, i, j] = s
                    esum += s
                else:
                    w[hi, i, j] = 0
            inv = 1 / esum
            for j in range(tk):
                w[hi, i, j] *= inv
            for c in range(dh):
                acc = 0
                for j in range(tk):
                    acc += w[hi, i, j] * v[j, off + c]
                out[i, off + c] = acc
    return out_arr, w_arr


def sdpa_backward(real[:, ::1] q, real[:, ::1] k, real[:, ::1] v,
                  int num_heads, double scale, real[:, :, ::1] weights,
                  real[:, ::1] d_out):
    cdef Py_ssize_t tq = q.shape[0], d = q.shape[1], tk = k.shape[0]
    cdef Py_ssize_t dh = d // num_heads
    dtype = _dtype_of(<real> 0)
    dq_arr = np.zeros((tq, d), dtype=dtype)
    dk_arr = np.zeros((tk, d), dtype=dtype)
    dv_arr = np.zeros((tk, d), dtype=dtype)
    dw_arr = np.empty(tk, dtype=dtype)
    cdef real[:, ::1] dq = dq_arr
    cdef real[:, ::1] dk = dk_arr
    cdef real[:, ::1] dv = dv_arr
    cdef real[::1] dw = dw_arr
    cdef real scale_r = <real> scale
    cdef Py_ssize_t hi, i, j, c, off
    cdef real inner, ds, acc

    for hi in range(num_heads):
        off = hi * dh
        for i in range(tq):
            inner = 0
            for j in range(tk):
                acc = 0
                for c in range(dh):
                    acc += d_out[i, off + c] * v[j, off + c]
                dw[j] = acc
                inner += acc * weights[hi, i, j]
            for j in range(tk):
                ds = weights[hi, i, j] * (dw[j] - inner)
                if ds != 0 or weights[hi, i, j] != 0:
                    for c in range(dh):
                        dq[i, off + c] += scale_r * ds * k[j, off + c]
                        dk[j, off + c] += scale_r * ds * q[i, off + c]
                        dv[j, off + c] += weights[hi, i, j] * d_out[i, off + c]
    return dq_arr, dk_arr, dv_arr


def layer_norm_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t t = x.shape[0], d = x.shape[1]
    dtype = _dtype_of(<real> 0)
    y_arr = np.empty((t, d), dtype=dtype)
    mean_arr = np.empty(t, dtype=dtype)
    rstd_arr = np.empty(t, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] mean = mean_arr
    cdef real[::1] rstd = rstd_arr
    cdef real eps_r = <real> eps
    cdef Py_ssize_t i, j
    cdef real mu, var, dev, r

    for i in range(t):
        mu = 0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0
        for j in range(d):
            dev = x[i, j] - mu
            var += dev * dev
        var /= d
        r = <real> (1.0 / sqrt(var + eps_r))
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * r * gamma[j] + beta[j]
    return y_arr, mean_arr, rstd_arr


def layer_norm_backward(real[:, ::1] x, real[::1] gamma, real[::1] mean,
                        real[::1] rstd, real[:, ::1] dy):
    cdef Py_ssize_t t = x.shape[0], d = x.shape[1]
    dtype = _dtype_of(<real> 0)
    dx_arr = np.empty((t, d), dtype=dtype)
    dgamma_arr = np.zeros(d, dtype=dtype)
    dbeta_arr = np.zeros(d, dtype=dtype)
    xhat_arr = np.empty(d, dtype=dtype)
    dyg_arr = np.empty(d, dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef real[::1] dgamma = dgamma_arr
    cdef real[::1] dbeta = dbeta_arr
    cdef real[::1] xhat = xhat_arr
    cdef real[::1] dyg = dyg_arr
    cdef Py_ssize_t i, j
    cdef real m1, m2

    for i in range(t):
        m1 = 0
        m2 = 0
        for j in range(d):
            xhat[j] = (x[i, j] - mean[i]) * rstd[i]
            dyg[j] = dy[i, j] * gamma[j]
            dgamma[j] += dy[i, j] * xhat[j]
            dbeta[j] += dy[i, j]
            m1 += dyg[j]
            m2 += dyg[j] * xhat[j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[i, j] = rstd[i] * (dyg[j] - m1 - xhat[j] * m2)
    return dx_arr, dgamma_arr, dbeta_arr


def softmax_rows_forward(real[:, ::1] x, object mask):
    cdef Py_ssize_t r = x.shape[0], n = x.shape[1]
    cdef const unsigned char[:, ::1] m = np.ascontiguousarray(mask).view(np.uint8)
    dtype = _dtype_of(<real> 0)
    y_arr = np.empty((r, n), dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef Py_ssize_t i, j, first
    cdef real mx, esum, inv

    for i in range(r):
        mx = 0
        first = -1
        for j in range(n):
            if m[i, j] and (first < 0 or x[i, j] > mx):
                mx = x[i, j]
                first = j
        esum = 0
        for j in range(n):
            if m[i, j]:
                y[i, j] = <real> exp(x[i, j] - mx)
                esum += y[i, j]
            else:
                y[i, j] = 0
        inv = 1 / esum
        for j in range(n):
            y[i, j] *= inv
    return y_arr


def softmax_rows_backward(real[:, ::1] y, real[:, ::1] dy):
    cdef Py_ssize_t r = y.shape[0], n = y.shape[1]
    dtype = _dtype_of(<real> 0)
    dx_arr = np.empty((r, n), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef Py_ssize_t i, j
    cdef real inner

    for i in range(r):
        inner = 0
        for j in range(n):
            inner += dy[i, j] * y[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (dy[i, j] - inner)
    return dx_arr
