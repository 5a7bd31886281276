"""Heuristic initialization: residual clustering plus greedy reassignment.

A single-index fit approximates the marginal conditional CDF; its residuals
(scalar mean residuals, or whole indicator-process residuals) are clustered
with a distribution-free method to seed each candidate cluster count. Each
candidate is then refined by reassigning observations to the cluster whose
coefficients give the smallest integrated squared deviation and refitting,
accepting a round only when the objective improves.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.cluster import AgglomerativeClustering, KMeans

from .data import ClusterCoefficients, Dataset, Partition, SubjectCoefficients
from .kernels import KernelSpec
from .objective import SingleIndexFit, cdf_loss, clusters_engaged, fit_coefficients
from .smoothers import DenominatorUnderflow, K2, cdf_matrix

__all__ = [
    "InitCandidate",
    "residual_features",
    "initial_partition",
    "deviation_scores",
    "refine_candidate",
    "initial_candidates",
    "default_max_clusters",
    "gamma_for_partition",
    "feasible_start",
]


@dataclass(frozen=True)
class InitCandidate:
    """A clustering candidate: partition, coefficients, and its objective
    at the estimation bandwidth. ``beta`` rows repeat the assigned cluster
    row exactly. ``h_fit`` records the bandwidth the candidate was fit at
    (the stage bandwidth, escalated when the layout required it)."""

    k: int
    partition: Partition
    gamma: ClusterCoefficients
    beta: SubjectCoefficients
    objective: float
    h_fit: float = 0.0


def default_max_clusters(n: int) -> int:
    """Largest candidate cluster count, floor(sqrt(n / log n))."""
    return int(np.floor(np.sqrt(n / np.log(n))))


def residual_features(data: Dataset, si: SingleIndexFit, mode: str = "scalar",
                      spec: KernelSpec = K2) -> np.ndarray:
    """Per-observation clustering features from the single-index fit.

    ``scalar`` returns the mean residual (response minus the mean of the
    leave-one-out smoothed CDF); ``process`` returns each observation's whole
    indicator-process residual as an n-vector.
    """
    part = Partition(np.zeros(data.n, dtype=int), 1)
    v = si.gamma.index_values(data.augmented, part)
    w, d, g = cdf_matrix(data, v, v, si.h_tilde, spec, exclude_diag=True)
    if mode == "scalar":
        means = (w @ data.responses) / d
        return (data.responses - means)[:, None]
    if mode == "process":
        return data.leq_matrix - g
    raise ValueError(f"unknown feature mode {mode!r}")


def initial_partition(features: np.ndarray, ell: int, method: str = "kmeans",
                      seed: int = 0) -> Partition:
    """Distribution-free clustering of the residual features."""
    n = features.shape[0]
    if ell > n:
        raise ValueError(f"cannot form {ell} clusters from {n} points")
    if ell == n:
        return Partition(np.arange(n), n)
    if method == "kmeans":
        km = KMeans(n_clusters=ell, n_init=10, random_state=seed)
        labels = km.fit_predict(features)
    elif method == "hierarchical":
        labels = AgglomerativeClustering(n_clusters=ell, linkage="ward").fit_predict(features)
    else:
        raise ValueError(f"unknown clustering method {method!r}")
    return Partition(labels, ell)


def _profile_intercepts(rows: np.ndarray, partition: Partition, data: Dataset,
                        h: float, spec: KernelSpec, grid_points: int = 41) -> np.ndarray:
    """Grid-profile each cluster's intercept against the integrated squared
    deviation of its own members, holding the other clusters fixed.

    The shift scale of the intercepts is not identified by any first-order
    residual heuristic (a mixture flattens the fitted mean curve), so a
    direct search over the observed index span is used to land every
    cluster in the right objective basin; Gauss-Newton refits then polish.
    """
    rows = np.array(rows)
    z = data.augmented
    k = partition.k
    base_idx = np.einsum("ij,ij->i", z, rows[partition.assignment])
    span = float(base_idx.max() - base_idx.min())
    offsets = np.linspace(-span, span, grid_points)
    for ell in range(1, k):
        members = partition.members(ell)
        if members.size == 0:
            continue
        best_t, best_score = 0.0, np.inf
        for t in offsets:
            v = np.array(base_idx)
            v[members] += t
            if not clusters_engaged(v, partition.assignment, k, h):
                continue
            _, _, g, bad = cdf_matrix(data, v, v, h, spec,
                                      exclude_diag=True, mask_underflow=True)
            # Stranded rows keep their raw indicators as residuals: a stiff
            # but finite penalty, so a placement is not vetoed outright by a
            # few isolated points (the fit bandwidth escalates later).
            resid = data.leq_matrix - g
            score = float(np.sum(resid * resid)) / data.n
            if score < best_score:
                best_t, best_score = float(t), score
        rows[ell, 0] += best_t
        base_idx[members] += best_t
    return rows


def _fixed_effects_direction(partition: Partition, data: Dataset):
    """Pooled within-cluster OLS slopes (cluster intercepts absorbed).

    Centering responses and covariates within clusters removes the
    between-cluster separation from the regression, so the slope direction
    is estimated without the dominant mixture noise.
    """
    x = np.array(data.covariates)
    y = np.array(data.responses, dtype=float)
    for ell in range(partition.k):
        members = partition.members(ell)
        if members.size:
            x[members] -= x[members].mean(axis=0)
            y[members] -= y[members].mean()
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    return coef


def gamma_for_partition(partition: Partition, data: Dataset,
                        si: SingleIndexFit, spec: KernelSpec = K2) -> ClusterCoefficients:
    """Starting coefficients for a partition.

    Slopes come from pooled within-cluster least squares, normalized to the
    scale pin (the single-index fit's slopes back them up when the pinned
    coordinate is too small to divide by). When the intercept is
    cluster-specific, each cluster's intercept is then placed by a profile
    search over the index span (relative to cluster 0, so the pin holds).
    """
    layout = si.gamma.layout
    k = partition.k
    rows = np.repeat(si.gamma.values, k, axis=0)
    scale_pin = next((p for p in layout.pins if p.value == 1.0), None)
    if k > 1 and scale_pin is not None:
        direction = _fixed_effects_direction(partition, data)
        pos = scale_pin.position - 1
        rms = float(np.sqrt(np.mean(direction ** 2)))
        if rms > 0 and abs(direction[pos]) >= 0.2 * rms:
            rows[:, 1:] = direction / direction[pos]
    if 0 in layout.specific and k > 1:
        rows = _profile_intercepts(rows, partition, data, si.h_hat, spec)
        rows[:, 0] -= rows[0, 0]
    return ClusterCoefficients(layout, rows)


def feasible_start(gamma0: ClusterCoefficients, partition: Partition,
                   data: Dataset, h: float, spec: KernelSpec = K2,
                   escalations: int = 6, tries: int = 12):
    """Make the starting configuration evaluable, returning ``(gamma, h)``.

    A stranded observation means the bandwidth is too small for this
    coefficient layout, so the bandwidth is enlarged first (keeping the
    starting point, and with it the objective basin). If escalation alone
    cannot help, cluster-specific offsets are contracted toward their mean
    as a last resort.
    """
    def feasible(gg, hh):
        try:
            cdf_loss(gg, hh, partition, data, spec)
            return True
        except DenominatorUnderflow:
            return False

    h_eff = h
    for _ in range(escalations + 1):
        if feasible(gamma0, h_eff):
            return gamma0, h_eff
        h_eff *= 1.3
    gamma = gamma0
    for _ in range(tries):
        values = np.array(gamma.values)
        for j in gamma.layout.specific:
            center = values[:, j].mean()
            values[:, j] = center + 0.5 * (values[:, j] - center)
        contracted = ClusterCoefficients(gamma.layout, values)
        if np.allclose(contracted.values, gamma.values):
            break
        gamma = contracted
        if feasible(gamma, h):
            return gamma, h
    # Last resort: identical rows (single-index start), feasible whenever
    # the single-index fit itself was.
    values = np.array(gamma.values)
    for j in gamma.layout.specific:
        values[:, j] = values[0, j]
    return ClusterCoefficients(gamma.layout, values), h


def deviation_scores(partition: Partition, gamma: ClusterCoefficients,
                     data: Dataset, h_tilde: float, spec: KernelSpec = K2) -> np.ndarray:
    """Integrated squared deviation of each observation against every
    cluster's smoothed CDF, shape (n, k). Row minima drive reassignment.

    An observation whose evaluation point at some candidate cluster has no
    kernel neighbours gets an infinite score there: an empty neighbourhood
    on a compact-support scale means that cluster cannot explain it.
    """
    z = data.augmented
    v_src = gamma.index_values(z, partition)
    scores = np.empty((data.n, gamma.k))
    for c in range(gamma.k):
        u = gamma.cluster_index(z, c)
        _, _, g, bad = cdf_matrix(data, v_src, u, h_tilde, spec,
                                  exclude_diag=True, mask_underflow=True)
        resid = data.leq_matrix - g
        scores[:, c] = np.einsum("im,im->i", resid, resid) / data.n
        scores[bad, c] = np.inf
    if not np.all(np.isfinite(scores.min(axis=1))):
        raise DenominatorUnderflow(
            "an observation has no kernel neighbours in any cluster; enlarge h")
    return scores


def _fill_empty(assign: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Reseed empty clusters with the worst-fitting points."""
    assign = np.array(assign)
    for c in range(k):
        if not np.any(assign == c):
            candidates = np.where(np.bincount(assign, minlength=k)[assign] > 1)[0]
            worst = candidates[np.argmax(scores[candidates].min(axis=1))]
            assign[worst] = c
    return assign


def refine_candidate(candidate: InitCandidate, data: Dataset, h_hat: float,
                     h_tilde: float, spec: KernelSpec = K2,
                     max_rounds: int = 50, rel_tol: float = 1e-6) -> InitCandidate:
    """Alternate deviation-score reassignment and coefficient refits,
    accepting rounds only while the objective at the estimation bandwidth
    strictly decreases."""
    best = candidate
    h_base = max(h_hat, candidate.h_fit or h_hat)
    anchor = candidate.gamma.pack()
    for _ in range(max_rounds):
        try:
            scores = deviation_scores(best.partition, best.gamma, data, h_tilde, spec)
        except DenominatorUnderflow:
            break
        assign = np.argmin(scores, axis=1)
        assign = _fill_empty(assign, scores, best.k)
        if np.array_equal(assign, best.partition.assignment):
            break
        part = Partition(assign, best.k)
        try:
            gamma0, h_fit = feasible_start(best.gamma, part, data, h_base, spec)
            gamma = fit_coefficients(part, data, gamma0, h_fit, spec,
                                     intercept_cap=h_fit, intercept_anchor=anchor)
            # Acceptance compares both configurations at a common bandwidth
            # (the larger one keeps both evaluable).
            h_cmp = max(h_base, h_fit)
            objective = cdf_loss(gamma, h_cmp, part, data, spec)
            incumbent = cdf_loss(best.gamma, h_cmp, best.partition, data, spec) \
                if h_cmp > h_base else best.objective
        except DenominatorUnderflow:
            break
        if objective >= incumbent:
            break
        improved = (incumbent - objective) / max(incumbent, 1e-300)
        best = InitCandidate(best.k, part, gamma,
                             SubjectCoefficients.from_assignment(gamma, part),
                             objective, h_fit)
        h_base = max(h_base, h_fit)
        if improved < rel_tol:
            break
    return best


def initial_candidates(data: Dataset, si: SingleIndexFit, k_bar: int = None,
                       mode: str = None, seed: int = 0, method: str = "kmeans",
                       spec: KernelSpec = K2) -> list:
    """Residual-clustering candidates, refit and refined, for each cluster
    count from 2 up to ``k_bar`` (default floor(sqrt(n / log n)))."""
    if k_bar is None:
        k_bar = max(2, default_max_clusters(data.n))
    if k_bar < 2:
        raise ValueError("k_bar must be at least 2")
    if mode is None:
        mode = "scalar" if data.response_kind == "continuous" else "process"
    features = residual_features(data, si, mode, spec)
    out = []
    for ell in range(2, k_bar + 1):
        try:
            part = initial_partition(features, ell, method, seed)
            gamma0, h_fit = feasible_start(gamma_for_partition(part, data, si, spec),
                                           part, data, si.h_hat, spec)
            gamma = fit_coefficients(part, data, gamma0, h_fit, spec,
                                     intercept_cap=h_fit)
            cand = InitCandidate(ell, part, gamma,
                                 SubjectCoefficients.from_assignment(gamma, part),
                                 cdf_loss(gamma, h_fit, part, data, spec), h_fit)
            out.append(refine_candidate(cand, data, si.h_hat, si.h_tilde, spec))
        except DenominatorUnderflow:
            # A candidate whose index layout cannot keep every observation
            # in reach at this bandwidth is dropped; downstream stages skip
            # missing cluster counts.
            continue
    return out
