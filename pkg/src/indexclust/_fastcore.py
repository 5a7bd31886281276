"""Fused numerical core for the subject-coefficient score assembly.

One jitted pass computes, per observation row: kernel weights and their
derivatives, the smoothed-CDF row via sorted cumulative sums, residuals,
the evaluation-point factor, the per-observation score and information
scalars (including the cross terms each observation's weight contributes
to every other smoother), and the shared-block score and information.
Equivalent to the numpy path but without any (n, n) temporaries beyond the
precomputed indicator matrix, and roughly three times faster single-core.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:              # pragma: no cover - numba is an install extra
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap(args[0]) if args and callable(args[0]) else wrap


@njit(cache=True)
def _tri0(u):
    if u <= -1.0 or u >= 1.0:
        return 0.0
    t = 1.0 - u * u
    return 1.09375 * t * t * t


@njit(cache=True)
def _tri1(u):
    if u <= -1.0 or u >= 1.0:
        return 0.0
    t = 1.0 - u * u
    return -6.5625 * u * t * t


@njit(cache=True)
def beta_score_core(v, order, cnt_right, cnt_left, leq, z2, h, floor):
    """Per-observation and shared-block score pieces at index values ``v``.

    Returns ``(ok, own_cross, i_scalar, s2, i2)`` where ``ok`` flags a
    denominator underflow (position of the first bad row in own_cross[0]
    when not ok), ``own_cross`` is the specific-block score scalar per
    observation (evaluation-point term minus cross terms), ``i_scalar`` the
    per-observation information scalar, and ``s2``/``i2`` the shared-block
    score and Gauss-Newton information.
    """
    n = v.shape[0]
    p2 = z2.shape[1]
    own = np.zeros(n)
    i_scalar = np.zeros(n)
    cross = np.zeros(n)
    s2 = np.zeros(p2)
    i2 = np.zeros((p2, p2))

    w = np.empty(n)
    cderiv = np.empty(n)
    cumw = np.empty(n)
    cumc = np.empty(n)
    grow = np.empty(n)
    tcrow = np.empty(n)
    suffix = np.empty(n + 1)
    cumcz = np.empty((p2, n))
    gr = np.empty((p2, n))

    inv_h = 1.0 / h
    for i in range(n):
        vi = v[i]
        for j in range(n):
            u = (v[j] - vi) * inv_h
            w[j] = _tri0(u) * inv_h
            cderiv[j] = _tri1(u) * inv_h * inv_h
        w[i] = 0.0
        cderiv[i] = 0.0
        acc_w = 0.0
        acc_c = 0.0
        for r in range(n):
            j = order[r]
            acc_w += w[j]
            acc_c += cderiv[j]
            cumw[r] = acc_w
            cumc[r] = acc_c
        d = cumw[n - 1]
        if d < floor:
            own[0] = float(i)
            return False, own, i_scalar, s2, i2
        sum_c = acc_c
        # Smoothed CDF row, residual factors, and the suffix sums that feed
        # the cross terms, all in response-sorted coordinates.
        for m in range(n):
            r = cnt_right[m] - 1
            g = cumw[r] / d
            grow[m] = g
            tcrow[m] = (cumc[r] - g * sum_c) / d
        own_i = 0.0
        isc = 0.0
        rg = 0.0
        for m in range(n):
            resid = leq[i, m] - grow[m]
            own_i += resid * tcrow[m]
            isc += tcrow[m] * tcrow[m]
            rg += resid * grow[m]
        own[i] = own_i / n
        i_scalar[i] = isc / n
        suffix[n] = 0.0
        for r in range(n - 1, -1, -1):
            suffix[r] = suffix[r + 1] + grow[order[r]]
        li = cnt_left[i]
        for j in range(n):
            lj = cnt_left[j]
            lmax = li if li > lj else lj
            aa = float(n - lmax)
            e = (aa - suffix[lj] - rg) / n
            cross[j] += e * cderiv[j] / d
        # Shared invariant block: gradients carry both the source path of
        # every weight and the evaluation-point path.
        if p2 > 0:
            for t in range(p2):
                acc = 0.0
                for r in range(n):
                    j = order[r]
                    acc += cderiv[j] * z2[j, t]
                    cumcz[t, r] = acc
            for t in range(p2):
                sum_cz = cumcz[t, n - 1]
                zit = z2[i, t]
                for m in range(n):
                    r = cnt_right[m] - 1
                    gr[t, m] = (cumcz[t, r] - grow[m] * sum_cz) / d \
                        - tcrow[m] * zit
            for t in range(p2):
                acc_s = 0.0
                for m in range(n):
                    acc_s += (leq[i, m] - grow[m]) * gr[t, m]
                s2[t] -= acc_s / n
                for tt in range(t, p2):
                    acc_i = 0.0
                    for m in range(n):
                        acc_i += gr[t, m] * gr[tt, m]
                    i2[t, tt] += acc_i / n
    for t in range(p2):
        for tt in range(t + 1, p2):
            i2[tt, t] = i2[t, tt]
    for i in range(n):
        own[i] -= cross[i]
    return True, own, i_scalar, s2, i2
