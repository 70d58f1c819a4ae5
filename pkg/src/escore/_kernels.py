"""Fused Gaussian-kernel inner loops (numba).

Training abscissas must be sorted ascending before calling; the window
[x - CUTOFF*h, x + CUTOFF*h] then bounds the points whose kernel weight is
nonzero in float64 (exp underflows to 0.0 beyond |t| ~ 38.6). Each output
element is accumulated independently, so results do not depend on the numba
thread count.
"""

import numpy as np
from numba import njit, prange

# exp(-0.5 t^2) == 0.0 in float64 for |t| >= sqrt(2*745.2)
CUTOFF = 38.7


@njit(cache=True, fastmath=True, parallel=True)
def nw_sums(x_train, y_train, w_train, h, x_eval):
    """Weighted kernel numerator/denominator sums at each evaluation point."""
    m = x_eval.shape[0]
    n = x_train.shape[0]
    num = np.empty(m)
    den = np.empty(m)
    inv_h = 1.0 / h
    cut = CUTOFF * h
    for j in prange(m):
        ej = x_eval[j]
        lo = np.searchsorted(x_train, ej - cut)
        hi = np.searchsorted(x_train, ej + cut)
        s_num = 0.0
        s_den = 0.0
        for i in range(lo, hi):
            t = (x_train[i] - ej) * inv_h
            wk = w_train[i] * np.exp(-0.5 * t * t)
            s_den += wk
            s_num += wk * y_train[i]
        num[j] = s_num
        den[j] = s_den
    return num, den


@njit(cache=True, fastmath=True, parallel=True)
def loo_sq_err(x_train, y_train, w_train, h, den_floor, excl_radius):
    """Leave-out weighted squared errors at each positive-weight point.

    With ``excl_radius <= 0`` only the point itself is held out, and a point
    whose remaining kernel denominator drops below ``den_floor`` falls back
    to the leave-one-out weighted global mean (flagged in the second return
    value). With ``excl_radius > 0`` every training point within that
    distance of the evaluation point is held out as well and the global-mean
    prediction is an ordinary outcome rather than a flagged degeneracy.
    """
    n = x_train.shape[0]
    inv_h = 1.0 / h
    cut = CUTOFF * h
    sw = 0.0
    swy = 0.0
    for i in range(n):
        sw += w_train[i]
        swy += w_train[i] * y_train[i]
    err = np.zeros(n)
    fell_back = np.zeros(n, dtype=np.uint8)
    for j in prange(n):
        if w_train[j] <= 0.0:
            continue
        ej = x_train[j]
        lo = np.searchsorted(x_train, ej - cut)
        hi = np.searchsorted(x_train, ej + cut)
        s_num = 0.0
        s_den = 0.0
        # skipping held-out indices directly keeps the tiny remaining sums
        # exact at small bandwidths (subtracting afterwards cancels them)
        for i in range(lo, hi):
            if i == j:
                continue
            if excl_radius > 0.0 and abs(x_train[i] - ej) <= excl_radius:
                continue
            t = (x_train[i] - ej) * inv_h
            wk = w_train[i] * np.exp(-0.5 * t * t)
            s_den += wk
            s_num += wk * y_train[i]
        if s_den > den_floor:
            pred = s_num / s_den
        else:
            if excl_radius <= 0.0:
                fell_back[j] = 1
            rest = sw - w_train[j]
            if rest > 0.0:
                pred = (swy - w_train[j] * y_train[j]) / rest
            else:
                pred = y_train[j]
        r = y_train[j] - pred
        err[j] = w_train[j] * r * r
    return err, fell_back
