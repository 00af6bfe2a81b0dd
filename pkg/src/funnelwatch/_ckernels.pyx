# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels.py``.

The arithmetic mirrors the Python versions operation for operation; the
build disables FP contraction so results are bit-identical.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, log1p, exp, sqrt, fabs

cnp.import_array()

OK = 0
CORRECTED = 1
BAD_POPULATION = -1
INCONSISTENT = -2
BOUNDARY = -3


cdef double _nsum(const double[::1] x) noexcept nogil:
    cdef double total = 0.0, comp = 0.0, t, v
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        v = x[i]
        t = total + v
        if fabs(total) >= fabs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
    return total + comp


def neumaier_sum(x):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    return _nsum(xv)


def excess_log_odds(o, n, e, bint correct):
    cdef const double[::1] ov = np.ascontiguousarray(o, dtype=np.float64)
    cdef const double[::1] nv = np.ascontiguousarray(n, dtype=np.float64)
    cdef const double[::1] ev = np.ascontiguousarray(e, dtype=np.float64)
    cdef Py_ssize_t k = ov.shape[0], i
    y_arr = np.full(k, np.nan)
    s_arr = np.full(k, np.nan)
    st_arr = np.zeros(k, dtype=np.int8)
    cdef double[::1] y = y_arr
    cdef double[::1] s = s_arr
    cdef cnp.int8_t[::1] status = st_arr
    cdef double oi, ni, ei, no, ne
    cdef int code
    with nogil:
        for i in range(k):
            oi = ov[i]
            ni = nv[i]
            ei = ev[i]
            if not ni > 0.0:
                status[i] = -1
                continue
            if oi < 0.0 or ei < 0.0:
                status[i] = -2
                continue
            no = ni
            ne = ni
            code = 0
            if oi == 0.0 or oi >= ni:
                if not correct:
                    status[i] = -3
                    continue
                oi = oi + 0.5
                no = ni + 1.0
                code = 1
            if ei == 0.0 or ei >= ni:
                if not correct:
                    status[i] = -3
                    continue
                ei = ei + 0.5
                ne = ni + 1.0
                code = 1
            if oi >= no or ei >= ne:
                status[i] = -2
                continue
            y[i] = (log(oi) - log(no - oi)) - (log(ei) - log(ne - ei))
            s[i] = sqrt(1.0 / oi + 1.0 / (no - oi))
            status[i] = code
    return y_arr, s_arr, st_arr


def dl_fit(y_in, s_in):
    cdef const double[::1] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef const double[::1] s = np.ascontiguousarray(s_in, dtype=np.float64)
    cdef Py_ssize_t k = y.shape[0], i
    w_arr = np.empty(k)
    wy_arr = np.empty(k)
    w2_arr = np.empty(k)
    dev_arr = np.empty(k)
    ws_arr = np.empty(k)
    wsy_arr = np.empty(k)
    sh_arr = np.empty(k)
    cdef double[::1] w = w_arr, wy = wy_arr, w2 = w2_arr, dev = dev_arr
    cdef double[::1] ws = ws_arr, wsy = wsy_arr, shrunk = sh_arr
    cdef double wi, sw, ybar, d, q, c, tau2, mu, si, yi, b, t, lo, hi
    with nogil:
        for i in range(k):
            wi = 1.0 / (s[i] * s[i])
            w[i] = wi
            wy[i] = wi * y[i]
            w2[i] = wi * wi
        sw = _nsum(w)
        ybar = _nsum(wy) / sw
        for i in range(k):
            d = y[i] - ybar
            dev[i] = w[i] * d * d
        q = _nsum(dev)
        c = sw - _nsum(w2) / sw
        tau2 = 0.0
        if q > k - 1 and c > 0.0:
            tau2 = (q - (k - 1)) / c
        for i in range(k):
            si = s[i]
            wi = 1.0 / (si * si + tau2)
            ws[i] = wi
            wsy[i] = wi * y[i]
        mu = _nsum(wsy) / _nsum(ws)
        for i in range(k):
            yi = y[i]
            if tau2 > 0.0:
                si = s[i]
                b = tau2 / (si * si + tau2)
                t = mu + b * (yi - mu)
                lo = yi if yi < mu else mu
                hi = mu if yi < mu else yi
                if t < lo:
                    t = lo
                elif t > hi:
                    t = hi
                shrunk[i] = t
            else:
                shrunk[i] = mu
    return mu, tau2, q, ws_arr, sh_arr


def flag(y_in, s_in, double mu, double tau2, double c):
    cdef const double[::1] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef const double[::1] s = np.ascontiguousarray(s_in, dtype=np.float64)
    cdef Py_ssize_t k = y.shape[0], i
    out_arr = np.zeros(k, dtype=np.int8)
    cdef cnp.int8_t[::1] out = out_arr
    cdef double half
    with nogil:
        for i in range(k):
            half = c * sqrt(s[i] * s[i] + tau2)
            if y[i] > mu + half:
                out[i] = 1
            elif y[i] < mu - half:
                out[i] = -1
    return out_arr


def binomial_inversion(n_in, p_in, chunk_in, uniforms_in):
    cdef const cnp.int64_t[::1] n = np.ascontiguousarray(n_in, dtype=np.int64)
    cdef const double[::1] p = np.ascontiguousarray(p_in, dtype=np.float64)
    cdef const cnp.int64_t[::1] chunk = np.ascontiguousarray(chunk_in, dtype=np.int64)
    cdef const double[::1] uniforms = np.ascontiguousarray(uniforms_in, dtype=np.float64)
    cdef Py_ssize_t cells = n.shape[0], i, pos = 0
    out_arr = np.zeros(cells, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef cnp.int64_t ni, total, remaining, m, t, x
    cdef double pi, q, r, lq, u, pmf, cdf
    cdef bint flip
    with nogil:
        for i in range(cells):
            ni = n[i]
            pi = p[i]
            flip = pi > 0.5
            q = 1.0 - pi if flip else pi
            total = 0
            remaining = ni
            if q > 0.0:
                m = chunk[i]
                r = q / (1.0 - q)
                lq = log1p(-q)
                while remaining > 0:
                    t = m if remaining > m else remaining
                    u = uniforms[pos]
                    pos += 1
                    pmf = exp(<double>t * lq)
                    cdf = pmf
                    x = 0
                    while u > cdf and x < t:
                        pmf = pmf * ((<double>(t - x) / (<double>x + 1.0)) * r)
                        x += 1
                        cdf = cdf + pmf
                        if pmf == 0.0 and <double>x > <double>t * q:
                            break
                    total += x
                    remaining -= t
            out[i] = ni - total if flip else total
    return out_arr
