"""Pure-Python kernels, the fallback when the compiled extension is unavailable.

Every function here has a twin in ``_ckernels.pyx`` performing the same
floating-point operations in the same order, so both backends give
bit-identical results. Keep them in sync.
"""

import math

import numpy as np

# status codes shared with the compiled kernels
OK = 0
CORRECTED = 1
BAD_POPULATION = -1
INCONSISTENT = -2
BOUNDARY = -3


def neumaier_sum(x):
    """Compensated sum of a 1-d float sequence, in index order."""
    total = 0.0
    comp = 0.0
    for v in x:
        v = float(v)
        t = total + v
        if abs(total) >= abs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
    return total + comp


def excess_log_odds(o, n, e, correct):
    """Excess log-odds and standard error for arrays of (observed, population, expected).

    Returns ``(y, s, status)``; ``status`` holds one of the module's status
    codes per element and ``y``/``s`` are NaN where it is negative.
    """
    o = np.asarray(o, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    k = o.shape[0]
    y = np.full(k, np.nan)
    s = np.full(k, np.nan)
    status = np.zeros(k, dtype=np.int8)
    for i in range(k):
        oi, ni, ei = float(o[i]), float(n[i]), float(e[i])
        if not ni > 0.0:
            status[i] = BAD_POPULATION
            continue
        if oi < 0.0 or ei < 0.0:
            status[i] = INCONSISTENT
            continue
        no = ni
        ne = ni
        code = OK
        if oi == 0.0 or oi >= ni:
            if not correct:
                status[i] = BOUNDARY
                continue
            oi = oi + 0.5
            no = ni + 1.0
            code = CORRECTED
        if ei == 0.0 or ei >= ni:
            if not correct:
                status[i] = BOUNDARY
                continue
            ei = ei + 0.5
            ne = ni + 1.0
            code = CORRECTED
        if oi >= no or ei >= ne:
            status[i] = INCONSISTENT
            continue
        y[i] = (math.log(oi) - math.log(no - oi)) - (math.log(ei) - math.log(ne - ei))
        s[i] = math.sqrt(1.0 / oi + 1.0 / (no - oi))
        status[i] = code
    return y, s, status


def dl_fit(y, s):
    """Method-of-moments random-effects fit.

    Returns ``(mu_hat, tau2_hat, q, weights, shrunken)`` where ``weights``
    are the random-effects weights ``1 / (s_i**2 + tau2_hat)``.
    """
    y = np.asarray(y, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    k = y.shape[0]
    w = np.empty(k)
    wy = np.empty(k)
    w2 = np.empty(k)
    for i in range(k):
        wi = 1.0 / (float(s[i]) * float(s[i]))
        w[i] = wi
        wy[i] = wi * float(y[i])
        w2[i] = wi * wi
    sw = neumaier_sum(w)
    ybar = neumaier_sum(wy) / sw
    dev = np.empty(k)
    for i in range(k):
        d = float(y[i]) - ybar
        dev[i] = float(w[i]) * d * d
    q = neumaier_sum(dev)
    c = sw - neumaier_sum(w2) / sw
    tau2 = 0.0
    if q > k - 1 and c > 0.0:
        tau2 = (q - (k - 1)) / c
    ws = np.empty(k)
    wsy = np.empty(k)
    for i in range(k):
        si = float(s[i])
        wi = 1.0 / (si * si + tau2)
        ws[i] = wi
        wsy[i] = wi * float(y[i])
    mu = neumaier_sum(wsy) / neumaier_sum(ws)
    shrunk = np.empty(k)
    for i in range(k):
        yi = float(y[i])
        if tau2 > 0.0:
            si = float(s[i])
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
    return mu, tau2, q, ws, shrunk


def flag(y, s, mu, tau2, c):
    """+1 above, -1 below, 0 within ``mu +/- c*sqrt(s**2 + tau2)``."""
    y = np.asarray(y, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    k = y.shape[0]
    out = np.zeros(k, dtype=np.int8)
    for i in range(k):
        si = float(s[i])
        half = c * math.sqrt(si * si + tau2)
        yi = float(y[i])
        if yi > mu + half:
            out[i] = 1
        elif yi < mu - half:
            out[i] = -1
    return out


def binomial_inversion(n, p, chunk, uniforms):
    """Binomial draws by CDF inversion, one uniform per chunk of trials.

    Cell ``i`` draws ``Binomial(n[i], p[i])`` as a sum of chunks of at most
    ``chunk[i]`` trials each (so the zero-term probability never underflows),
    consuming uniforms in order. Probabilities above one half are drawn via
    the complement.
    """
    n = np.asarray(n, dtype=np.int64)
    p = np.asarray(p, dtype=np.float64)
    chunk = np.asarray(chunk, dtype=np.int64)
    cells = n.shape[0]
    out = np.zeros(cells, dtype=np.int64)
    pos = 0
    for i in range(cells):
        ni = int(n[i])
        pi = float(p[i])
        flip = pi > 0.5
        q = 1.0 - pi if flip else pi
        total = 0
        remaining = ni
        if q > 0.0:
            m = int(chunk[i])
            r = q / (1.0 - q)
            lq = math.log1p(-q)
            while remaining > 0:
                t = m if remaining > m else remaining
                u = float(uniforms[pos])
                pos += 1
                pmf = math.exp(t * lq)
                cdf = pmf
                x = 0
                while u > cdf and x < t:
                    pmf = pmf * (((t - x) / (x + 1.0)) * r)
                    x += 1
                    cdf = cdf + pmf
                    if pmf == 0.0 and x > t * q:
                        break
                total += x
                remaining -= t
        out[i] = ni - total if flip else total
    return out
