"""Kernel-weighted estimators of conditional CDFs, densities, and memberships.

All estimators share one construction: indicator or label responses averaged
with compactly supported kernel weights on an index scale. The conditional
CDF smoother is a weighted empirical CDF of the responses; the conditional
density is its ``y``-smoothed step-function; the membership smoother is a
Nadaraya-Watson ratio with cluster-indicator responses on a projected
covariate scale.

Scalar query functions (`smooth_cdf`, `smooth_cdf_gradient`,
`membership_probability`, ...) implement the public operation contracts.
The matrix helpers (`cdf_matrix`, `membership_matrix`) evaluate whole
leave-one-out grids at once and are what the fitting code calls.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .data import ClusterCoefficients, Dataset, Partition
from .kernels import KernelSpec, kernel_eval, scaled_kernel

__all__ = [
    "DenominatorUnderflow",
    "smooth_cdf",
    "smooth_cdf_gradient",
    "membership_probability",
    "smooth_density",
    "smooth_pmf",
    "select_density_bandwidths",
    "bandwidth_grid",
    "nw_mean",
    "cdf_matrix",
    "membership_matrix",
]

K2 = KernelSpec(2)

# Weight sums below FLOOR_FRACTION * (n * K(0) / h) raise DenominatorUnderflow:
# with compact support, an empty kernel neighbourhood is a real event and the
# caller should enlarge the bandwidth rather than divide by ~0.
FLOOR_FRACTION = 1e-12


class DenominatorUnderflow(ArithmeticError):
    """Kernel weight sum below the numerical floor at some query point."""

    def __init__(self, message, subject=None):
        super().__init__(message)
        self.subject = subject


def _floor(n: int, h: float, spec: KernelSpec, d: int = 1) -> float:
    return FLOOR_FRACTION * n * (spec.at_zero / h) ** d


def smooth_cdf(y: float, v: float, index_values, responses, h: float,
               spec: KernelSpec = K2, exclude: Optional[int] = None) -> float:
    """Kernel-weighted empirical CDF of the responses at (y, v).

    ``index_values`` places each observation on the index scale; weights are
    ``K((index_j - v)/h)/h``. With ``exclude`` set, observation i is removed
    from both sums (the leave-one-out variant).
    """
    idx = np.asarray(index_values, dtype=float)
    resp = np.asarray(responses, dtype=float)
    if exclude is not None:
        idx = np.delete(idx, exclude)
        resp = np.delete(resp, exclude)
    w = scaled_kernel(spec, h, 0, idx - v)
    denom = float(np.sum(w))
    if denom < _floor(idx.shape[0], h, spec):
        raise DenominatorUnderflow(
            f"weight sum {denom:.3e} under the floor at v={v:.4g}; enlarge h",
            subject=exclude)
    return float(np.sum(w * (resp <= y))) / denom


def cdf_matrix(data: Dataset, v_src, v_eval, h: float, spec: KernelSpec = K2,
               exclude_diag: bool = True, mask_underflow: bool = False):
    """Leave-one-out CDF smoother on the full response grid.

    Returns ``(W, D, G)`` where ``W[i, j]`` is the kernel weight of source
    observation j at evaluation point i, ``D`` the row sums, and
    ``G[i, m]`` the smoothed CDF at ``(Y_m, v_eval[i])``. With
    ``exclude_diag`` the diagonal weight is removed (requires the evaluation
    points to be one per observation). With ``mask_underflow`` the return
    gains a boolean vector flagging evaluation points whose weight sum
    underflows (their G rows are meaningless) instead of raising.
    """
    v_src = np.asarray(v_src, dtype=float)
    v_eval = np.asarray(v_eval, dtype=float)
    w = scaled_kernel(spec, h, 0, v_src[None, :] - v_eval[:, None])
    if exclude_diag:
        np.fill_diagonal(w, 0.0)
    cum = np.cumsum(w[:, data.response_order], axis=1)
    # Taking the denominator from the cumulative sum keeps G <= 1 exactly.
    d = cum[:, -1]
    bad = d < _floor(data.n, h, spec)
    if np.any(bad) and not mask_underflow:
        i = int(np.flatnonzero(bad)[0])
        raise DenominatorUnderflow(
            f"weight sum underflow at evaluation point {i}; enlarge h", subject=i)
    safe = np.where(bad, 1.0, d)
    g = cum[:, data.response_counts - 1] / safe[:, None]
    if mask_underflow:
        return w, d, g, bad
    return w, d, g


def _deriv_weights(v_src, v_eval, h, spec, exclude_diag):
    c = scaled_kernel(spec, h, 1, np.asarray(v_src)[None, :] - np.asarray(v_eval)[:, None])
    if exclude_diag:
        np.fill_diagonal(c, 0.0)
    return c


def smooth_cdf_gradient(y: float, i: int, beta, data: Dataset, h: float,
                        block: str = "specific", spec: KernelSpec = K2) -> np.ndarray:
    """Gradient of the leave-one-out CDF smoother at subject i's own point.

    The smoother is evaluated at ``(y, beta_i' z_i)``; the coefficients enter
    through the evaluation point, which moves every kernel weight, and (for
    the shared invariant block) through each source index as well.  Returns
    the gradient over the free coefficients of the requested block.
    """
    z = data.augmented
    v = beta.index_values(z)
    keep = np.arange(data.n) != i
    u = v[keep] - v[i]
    w = scaled_kernel(spec, h, 0, u)
    d = float(w.sum())
    if d < _floor(data.n, h, spec):
        raise DenominatorUnderflow("weight sum underflow", subject=i)
    c = scaled_kernel(spec, h, 1, u)
    a = (data.responses[keep] <= y).astype(float)
    g = float((w * a).sum()) / d
    resid_w = (a - g) * c
    if block == "specific":
        cols = list(beta.layout.subject_free_specific)
        # Only the evaluation point depends on subject i's own block.
        return -float(resid_w.sum()) / d * z[i, cols]
    if block == "invariant":
        cols = list(beta.layout.free_invariant)
        dz = z[keep][:, cols] - z[i, cols]
        return resid_w @ dz / d
    raise ValueError(f"unknown block {block!r}")


# -- membership smoother ---------------------------------------------------

def _product_weights(projected, u_eval, h_d: float, spec: KernelSpec,
                     exclude_diag: bool):
    pr = np.asarray(projected, dtype=float)
    ue = np.asarray(u_eval, dtype=float)
    if pr.ndim == 1:
        pr = pr[:, None]
    if ue.ndim == 1:
        ue = ue[:, None]
    diffs = pr[None, :, :] - ue[:, None, :]
    w = np.prod(kernel_eval(spec, 0, diffs / h_d), axis=2) / h_d ** pr.shape[1]
    if exclude_diag:
        np.fill_diagonal(w, 0.0)
    return w


def membership_matrix(projected, partition: Partition, h_d: float,
                      spec: KernelSpec, u_eval=None, loo: bool = True,
                      mask_underflow: bool = False):
    """Membership probabilities for every cluster at each evaluation point.

    Rows share one denominator, so they sum to exactly 1. ``u_eval``
    defaults to the projected observations themselves, in which case
    ``loo`` removes each observation from its own estimate. With
    ``mask_underflow``, rows whose weight sum underflows are zeroed and a
    bad-row mask is returned alongside, instead of raising.
    """
    if u_eval is None:
        u_eval = projected
        exclude = loo
    else:
        exclude = False
    w = _product_weights(projected, u_eval, h_d, spec, exclude)
    d = w.sum(axis=1)
    pr = np.asarray(projected)
    dim = 1 if pr.ndim == 1 else pr.shape[1]
    bad = d < _floor(partition.n, h_d, spec, d=dim)
    if np.any(bad) and not mask_underflow:
        i = int(np.flatnonzero(bad)[0])
        raise DenominatorUnderflow(
            f"membership weight sum underflow at point {i}; enlarge h_d", subject=i)
    onehot = np.zeros((partition.n, partition.k))
    onehot[np.arange(partition.n), partition.assignment] = 1.0
    pi = (w @ onehot) / np.where(bad, 1.0, d)[:, None]
    if mask_underflow:
        pi[bad] = 0.0
        return pi, bad
    return pi


def membership_probability(u, projected, partition: Partition, ell: int,
                           h_d: float, spec: KernelSpec = K2,
                           exclude: Optional[int] = None) -> float:
    """Nadaraya-Watson estimate of P(cluster = ell | projected covariates = u)."""
    pr = np.asarray(projected, dtype=float)
    if pr.ndim == 1:
        pr = pr[:, None]
    labels = partition.assignment
    if exclude is not None:
        keep = np.arange(pr.shape[0]) != exclude
        pr = pr[keep]
        labels = labels[keep]
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.prod(kernel_eval(spec, 0, (pr - u[None, :]) / h_d), axis=1) / h_d ** pr.shape[1]
    d = float(w.sum())
    if d < _floor(partition.n, h_d, spec, d=pr.shape[1]):
        raise DenominatorUnderflow("membership weight sum underflow", subject=exclude)
    return float((w * (labels == ell)).sum()) / d


# -- conditional density ----------------------------------------------------

def smooth_density(y: float, v: float, partition: Partition,
                   gamma: ClusterCoefficients, data: Dataset,
                   h1: float, h2: float, spec: KernelSpec = K2) -> float:
    """Conditional density at (y, v): the y-kernel integrated against the
    step-function jumps of the CDF smoother, which reduces to a weighted
    kernel density of the responses."""
    if data.response_kind != "continuous":
        raise ValueError("density smoother requires a continuous response")
    idx = gamma.index_values(data.augmented, partition)
    w = scaled_kernel(spec, h2, 0, idx - v)
    d = float(w.sum())
    if d < _floor(data.n, h2, spec):
        raise DenominatorUnderflow("weight sum underflow in the index direction")
    ky = scaled_kernel(spec, h1, 0, data.responses - y)
    return float((ky * w).sum()) / d


def smooth_pmf(y: float, v: float, partition: Partition,
               gamma: ClusterCoefficients, data: Dataset, h: float,
               spec: KernelSpec = K2) -> float:
    """Probability mass at a support point: the jump of the CDF smoother."""
    if data.response_kind != "discrete":
        raise ValueError("pmf smoother requires a discrete response")
    support = np.unique(data.responses)
    pos = np.searchsorted(support, y)
    if pos >= support.size or support[pos] != y:
        raise ValueError(f"{y} is not in the observed response support")
    idx = gamma.index_values(data.augmented, partition)
    upper = smooth_cdf(y, v, idx, data.responses, h, spec)
    if pos == 0:
        return upper
    lower = smooth_cdf(support[pos - 1], v, idx, data.responses, h, spec)
    return upper - lower


def bandwidth_grid(scale_values, n: int, num: int = 30) -> np.ndarray:
    """Log-spaced bandwidth grid over the admissible rate window.

    Spans ``[0.1 s n^(-1/5), 3 s n^(-1/8)]`` with ``s`` the standard
    deviation of the values the kernel will act on.
    """
    s = max(float(np.std(scale_values)), 1e-8)
    lo = 0.1 * s * n ** (-1 / 5)
    hi = 3.0 * s * n ** (-1 / 8)
    return np.geomspace(lo, hi, num)


def select_density_bandwidths(partition: Partition, gamma: ClusterCoefficients,
                              data: Dataset, spec: KernelSpec = K2,
                              num: int = 30):
    """Pick (h1, h2) maximizing the log pseudo-likelihood of the density
    smoother at the observations, over the default grid in each direction."""
    if data.response_kind != "continuous":
        raise ValueError("density bandwidths require a continuous response")
    idx = gamma.index_values(data.augmented, partition)
    y = data.responses
    n = data.n
    h1_grid = bandwidth_grid(y, n, num)
    h2_grid = bandwidth_grid(idx, n, num)
    du = idx[None, :] - idx[:, None]
    dy = y[None, :] - y[:, None]
    best = (-np.inf, None)
    for h2 in h2_grid:
        w = scaled_kernel(spec, h2, 0, du)
        d = w.sum(axis=1)
        if np.any(d < _floor(n, h2, spec)):
            continue
        p = w / d[:, None]
        for h1 in h1_grid:
            ky = scaled_kernel(spec, h1, 0, dy)
            dens = np.einsum("ij,ij->i", ky, p)
            if np.any(dens <= 0):
                continue
            value = float(np.log(dens).sum())
            if value > best[0]:
                best = (value, (float(h1), float(h2)))
    if best[1] is None:
        raise DenominatorUnderflow("every bandwidth pair was degenerate")
    return best[1]


def nw_mean(v_query, index_values, responses, h: float, spec: KernelSpec = K2,
            exclude: Optional[int] = None) -> float:
    """Smoothed conditional mean: responses integrated against the CDF
    smoother's jumps, i.e. the kernel-weighted response average."""
    idx = np.asarray(index_values, dtype=float)
    resp = np.asarray(responses, dtype=float)
    if exclude is not None:
        idx = np.delete(idx, exclude)
        resp = np.delete(resp, exclude)
    w = scaled_kernel(spec, h, 0, idx - v_query)
    d = float(w.sum())
    if d < _floor(idx.shape[0], h, spec):
        raise DenominatorUnderflow("weight sum underflow in nw_mean")
    return float((w * resp).sum()) / d
