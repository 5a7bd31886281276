"""End-to-end estimation: posterior reassignment, selection criteria, variance.

The refinement loop alternates four estimators that feed each other: the
membership model on the current partition, bandwidths for the conditional
density, posterior cluster probabilities combining density and membership,
and a coefficient refit on the reassigned partition. Iteration stops when
the partition is a fixed point of its own posterior rule (or on a detected
cycle, returning the member with the smallest loss).

Two information criteria select the cluster count: an integrated-squares
form with penalty ``k log n / (2 n^(4/5))`` and an integrated
log-pseudo-likelihood form with the doubled penalty ``k log n / n^(4/5)``
(the heavier penalty damps that criterion's tendency to add clusters).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .admm import PenalizedFit, fit_penalized
from .data import ClusterCoefficients, Dataset, Partition, SubjectCoefficients
from .initialize import initial_candidates
from .kernels import KernelSpec
from .membership import MembershipFit, fit_basis, select_dimension
from .objective import SingleIndexFit, cdf_loss, fit_coefficients, fit_single_index, gamma_score
from .smoothers import (DenominatorUnderflow, K2, bandwidth_grid, cdf_matrix,
                        membership_matrix, scaled_kernel, select_density_bandwidths)

__all__ = [
    "FitResult",
    "posterior_probs",
    "posterior_matrix",
    "optimal_reassign",
    "refine_fit",
    "ic_squared",
    "ic_loglik",
    "select_k",
    "coefficient_covariance",
    "run_pipeline",
]


@dataclass(frozen=True)
class FitResult:
    """A fully refined fit: everything later stages and reports consume."""

    k: int
    partition: Partition
    gamma: ClusterCoefficients
    beta: SubjectCoefficients
    h_hat: float
    h_tilde: float
    h1: Optional[float]
    h2: Optional[float]
    h_tilde_d: Optional[float]
    sdr: Optional[MembershipFit]
    ic_squared: float
    ic_loglik: float
    gamma_cov: Optional[np.ndarray]
    refinement_rounds: int
    converged: bool
    warnings: tuple = ()
    selection: tuple = ()


def _density_at(data: Dataset, gamma: ClusterCoefficients, partition: Partition,
                h1: float, h2: float, spec: KernelSpec):
    """Conditional density at every (observation, cluster) pair, (n, k)."""
    z = data.augmented
    v_src = gamma.index_values(z, partition)
    ky = scaled_kernel(spec, h1, 0, data.responses[None, :] - data.responses[:, None])
    out = np.empty((data.n, gamma.k))
    for ell in range(gamma.k):
        u = gamma.cluster_index(z, ell)
        w = scaled_kernel(spec, h2, 0, v_src[None, :] - u[:, None])
        d = w.sum(axis=1)
        bad = d <= 0
        out[:, ell] = np.einsum("ij,ij->i", ky, w) / np.where(bad, 1.0, d)
        out[bad, ell] = 0.0
    return out


def _pmf_at(data: Dataset, gamma: ClusterCoefficients, partition: Partition,
            h: float, spec: KernelSpec):
    """Probability mass at every (observation, cluster) pair for discrete
    responses: jumps of the full-sample CDF smoother at each response."""
    z = data.augmented
    v_src = gamma.index_values(z, partition)
    support, inverse = np.unique(data.responses, return_inverse=True)
    out = np.empty((data.n, gamma.k))
    for ell in range(gamma.k):
        u = gamma.cluster_index(z, ell)
        w = scaled_kernel(spec, h, 0, v_src[None, :] - u[:, None])
        d = w.sum(axis=1)
        bad = d <= 0
        d = np.where(bad, 1.0, d)
        cum = np.cumsum(w[:, data.response_order], axis=1)
        counts = np.searchsorted(data.responses[data.response_order], support, side="right")
        g_support = cum[:, counts - 1] / d[:, None]
        jumps = np.diff(np.hstack([np.zeros((data.n, 1)), g_support]), axis=1)
        out[:, ell] = jumps[np.arange(data.n), inverse]
        out[bad, ell] = 0.0
    return out


def posterior_matrix(data: Dataset, gamma: ClusterCoefficients, partition: Partition,
                     sdr: MembershipFit, h1, h2, h_tilde, spec: KernelSpec = K2):
    """Posterior cluster probabilities for every observation, (n, k).

    Densities weighted by membership probabilities, negatives clamped at
    zero before normalizing; all-zero rows fall back to uniform and are
    flagged.
    """
    if data.response_kind == "continuous":
        dens = _density_at(data, gamma, partition, h1, h2, spec)
    else:
        dens = _pmf_at(data, gamma, partition, h_tilde, spec)
    proj = sdr.basis.project(data.covariates)
    pi, bad = membership_matrix(proj, partition, sdr.h_tilde_d, sdr.spec,
                                loo=False, mask_underflow=True)
    shares = partition.sizes() / partition.n
    pi[bad] = shares
    num = np.clip(dens * np.clip(pi, 0.0, None), 0.0, None)
    total = num.sum(axis=1)
    zero = total <= 0
    num[zero] = 1.0 / gamma.k
    total = np.where(zero, 1.0, total)
    return num / total[:, None], bool(zero.any()) or bool(bad.any())


def posterior_probs(x, y, fit: FitResult, data: Dataset, spec: KernelSpec = K2):
    """Posterior cluster probabilities at one new point ``(x, y)``.

    Returns ``(probs, warned)``; an all-zero numerator yields the uniform
    vector with the warning flag set.
    """
    if fit.k == 1:
        return np.array([1.0]), False
    z = np.concatenate([[1.0], np.asarray(x, dtype=float)])
    gamma = fit.gamma
    dens = np.empty(fit.k)
    for ell in range(fit.k):
        v = float(z @ gamma.values[ell])
        if data.response_kind == "continuous":
            from .smoothers import smooth_density
            dens[ell] = smooth_density(y, v, fit.partition, gamma, data,
                                       fit.h1, fit.h2, spec)
        else:
            from .smoothers import smooth_pmf
            dens[ell] = smooth_pmf(y, v, fit.partition, gamma, data,
                                   fit.h_tilde, spec)
    proj = fit.sdr.basis.project(np.asarray(x, dtype=float)[None, :])
    pi, bad = membership_matrix(fit.sdr.basis.project(data.covariates),
                                fit.partition, fit.sdr.h_tilde_d, fit.sdr.spec,
                                u_eval=proj, mask_underflow=True)
    row = fit.partition.sizes() / fit.partition.n if bad[0] else pi[0]
    num = np.clip(dens * np.clip(row, 0.0, None), 0.0, None)
    if num.sum() <= 0:
        return np.full(fit.k, 1.0 / fit.k), True
    return num / num.sum(), False


def optimal_reassign(posterior: np.ndarray) -> np.ndarray:
    """Each observation to its highest-posterior cluster (lowest index wins
    ties); applying the rule to its own output changes nothing."""
    return np.argmax(posterior, axis=1)


def ic_squared(gamma: ClusterCoefficients, partition: Partition, data: Dataset,
               h_tilde: float, spec: KernelSpec = K2) -> float:
    """Integrated-squares criterion: 2/n times the CDF loss plus
    k log n / (2 n^(4/5))."""
    loss = cdf_loss(gamma, h_tilde, partition, data, spec)
    n = data.n
    return 2.0 / n * loss + partition.k * np.log(n) / (2.0 * n ** 0.8)


def ic_loglik(gamma: ClusterCoefficients, partition: Partition, data: Dataset,
              h_tilde: float, spec: KernelSpec = K2) -> float:
    """Integrated log-pseudo-likelihood criterion with penalty
    k log n / n^(4/5); exact 0/1 smoother values contribute log 1 = 0."""
    v = gamma.index_values(data.augmented, partition)
    _, _, g = cdf_matrix(data, v, v, h_tilde, spec, exclude_diag=True)
    a = data.leq_matrix
    g0 = g + (g == 0.0)
    g1 = g - (g == 1.0)
    n = data.n
    loglik = float(np.sum(a * np.log(g0) + (1.0 - a) * np.log1p(-g1))) / n ** 2
    return -loglik + partition.k * np.log(n) / n ** 0.8


def _select_h_tilde(gamma, partition, data, spec, num=30):
    from .objective import select_smoothing_bandwidth
    return select_smoothing_bandwidth(gamma, partition, data, spec, num)[0]


def coefficient_covariance(gamma: ClusterCoefficients, partition: Partition,
                           data: Dataset, h_tilde: float, spec: KernelSpec = K2):
    """Sandwich covariance of the free coefficients, scaled per observation.

    The middle matrix averages squared integrated score contributions; the
    bread averages integrated gradient outer products. Returns
    ``(cov, warned)`` with a pseudo-inverse fallback flagged on singularity.
    """
    _, _, info, subject_scores = gamma_score(gamma, partition, data, h_tilde,
                                             spec, with_subject_scores=True)
    n = data.n
    v1 = subject_scores @ subject_scores.T / n
    v2 = info / n
    warned = False
    try:
        bread = np.linalg.solve(v2, np.eye(v2.shape[0]))
    except np.linalg.LinAlgError:
        bread = np.linalg.pinv(v2)
        warned = True
    cov = bread @ v1 @ bread / n
    return 0.5 * (cov + cov.T), warned


def refine_fit(partition: Partition, gamma: ClusterCoefficients, data: Dataset,
               si: SingleIndexFit, max_rounds: int = 20,
               spec: KernelSpec = K2, h_hat: Optional[float] = None) -> FitResult:
    """Iterate posterior reassignment and refitting to a fixed point.

    Records the rounds used and whether the loop converged; on an
    assignment cycle the member with the smallest loss is returned and
    flagged. The returned fit carries the final membership model, density
    bandwidths, criteria values, and coefficient covariance.
    """
    warnings = []
    k = partition.k
    n = data.n
    h_hat = h_hat or si.h_hat
    anchor = gamma.pack()
    seen = {partition.assignment.tobytes(): 0}
    trail = [(partition, gamma)]
    sdr = None
    h1 = h2 = None
    rounds = 0
    converged = False
    for rounds in range(1, max_rounds + 1):
        if sdr is None:
            sdr = select_dimension(partition, data.covariates)
        else:
            basis, h_d, _ = fit_basis(partition, data.covariates, sdr.d_hat,
                                      sdr.spec, init=sdr.basis)
            sdr = MembershipFit(basis, h_d, sdr.pss_by_d, sdr.d_hat, sdr.spec)
        if data.response_kind == "continuous":
            h1, h2 = select_density_bandwidths(partition, gamma, data, spec)
        posterior, warned = posterior_matrix(data, gamma, partition, sdr,
                                             h1, h2, si.h_tilde, spec)
        if warned:
            warnings.append(f"round {rounds}: degenerate posterior rows")
        assign = optimal_reassign(posterior)
        if np.array_equal(assign, partition.assignment):
            converged = True
            break
        key = assign.tobytes()
        if key in seen:
            cycle = trail[seen[key]:]
            losses = [cdf_loss(g, h_hat, p, data, spec) for p, g in cycle]
            partition, gamma = cycle[int(np.argmin(losses))]
            warnings.append(f"assignment cycle of length {len(cycle)} broken by loss")
            break
        new_part = Partition(assign, k)
        try:
            from .initialize import feasible_start
            g0, h_fit = feasible_start(gamma, new_part, data, h_hat, spec)
            gamma = fit_coefficients(new_part, data, g0, h_fit, spec,
                                     intercept_cap=h_fit, intercept_anchor=anchor)
            h_hat = max(h_hat, h_fit)
        except DenominatorUnderflow:
            warnings.append(f"round {rounds}: reassignment left the bandwidth range; kept previous")
            converged = False
            break
        partition = new_part
        seen[key] = len(trail)
        trail.append((partition, gamma))
    else:
        warnings.append("refinement hit the round limit")

    if not converged:
        sdr_final = select_dimension(partition, data.covariates)
        sdr = sdr_final
        if data.response_kind == "continuous":
            h1, h2 = select_density_bandwidths(partition, gamma, data, spec)
    h_tilde = _select_h_tilde(gamma, partition, data, spec)
    cov, cov_warn = coefficient_covariance(gamma, partition, data, h_tilde, spec)
    if cov_warn:
        warnings.append("singular information in the covariance; pseudo-inverse used")
    return FitResult(
        k=k, partition=partition, gamma=gamma,
        beta=SubjectCoefficients.from_assignment(gamma, partition),
        h_hat=h_hat, h_tilde=h_tilde, h1=h1, h2=h2,
        h_tilde_d=sdr.h_tilde_d if sdr else None, sdr=sdr,
        ic_squared=ic_squared(gamma, partition, data, h_tilde, spec),
        ic_loglik=ic_loglik(gamma, partition, data, h_tilde, spec),
        gamma_cov=cov, refinement_rounds=rounds, converged=converged,
        warnings=tuple(warnings))


def _single_cluster_fit(data: Dataset, si: SingleIndexFit,
                        spec: KernelSpec = K2) -> FitResult:
    """The k = 1 fit: trivial partition, no membership stage."""
    partition = Partition(np.zeros(data.n, dtype=int), 1)
    gamma = si.gamma
    h_tilde = _select_h_tilde(gamma, partition, data, spec)
    cov, warned = coefficient_covariance(gamma, partition, data, h_tilde, spec)
    return FitResult(
        k=1, partition=partition, gamma=gamma,
        beta=SubjectCoefficients.from_assignment(gamma, partition),
        h_hat=si.h_hat, h_tilde=h_tilde, h1=None, h2=None, h_tilde_d=None,
        sdr=None, ic_squared=ic_squared(gamma, partition, data, h_tilde, spec),
        ic_loglik=ic_loglik(gamma, partition, data, h_tilde, spec),
        gamma_cov=cov, refinement_rounds=0, converged=True,
        warnings=("singular information; pseudo-inverse used",) if warned else ())


def run_pipeline(data: Dataset, layout, k: int, seed: int = 0,
                 spec: KernelSpec = K2, si: Optional[SingleIndexFit] = None,
                 candidates: Optional[list] = None, max_rounds: int = 20):
    """Fixed-k estimation, initialization through refinement.

    Returns ``(FitResult, stages)`` where ``stages`` keeps the intermediate
    single-index fit, candidates, and penalized fit for reporting.
    """
    if si is None:
        si = fit_single_index(data, layout, spec)
    if k == 1:
        fit = _single_cluster_fit(data, si, spec)
        return fit, {"single_index": si, "candidates": candidates or [],
                     "penalized": None}
    if candidates is None:
        from .initialize import default_max_clusters
        k_bar = max(k, default_max_clusters(data.n))
        candidates = initial_candidates(data, si, k_bar, seed=seed, spec=spec)
    cand = next((c for c in candidates if c.k == k), None)
    h_stage = max(si.h_hat, cand.h_fit or si.h_hat) if cand else si.h_hat
    sp = fit_penalized(data, k, candidates, h_stage, spec)
    fit = refine_fit(sp.partition, sp.gamma, data, si, max_rounds, spec, h_hat=h_stage)
    return fit, {"single_index": si, "candidates": candidates, "penalized": sp}


def select_k(data: Dataset, layout, k_min: int = 1, k_max: Optional[int] = None,
             criterion: str = "squared", seed: int = 0,
             spec: KernelSpec = K2) -> FitResult:
    """Run the full pipeline for each candidate cluster count and return
    the fit minimizing the chosen criterion; failed counts are skipped with
    a warning and excluded from the argmin."""
    if criterion not in ("squared", "loglik"):
        raise ValueError(f"unknown criterion {criterion!r}")
    from .initialize import default_max_clusters
    if k_max is None:
        k_max = max(2, default_max_clusters(data.n))
    if k_min < 1 or k_max < k_min:
        raise ValueError("need 1 <= k_min <= k_max")
    si = fit_single_index(data, layout, spec)
    candidates = None
    if k_max >= 2:
        k_bar = max(k_max, default_max_clusters(data.n))
        candidates = initial_candidates(data, si, k_bar, seed=seed, spec=spec)
    scan = []
    best = None
    for k in range(k_min, k_max + 1):
        try:
            fit, _ = run_pipeline(data, layout, k, seed, spec, si, candidates)
        except Exception as exc:           # noqa: BLE001 - per-k isolation
            scan.append({"k": k, "error": f"{type(exc).__name__}: {exc}"})
            continue
        value = fit.ic_squared if criterion == "squared" else fit.ic_loglik
        scan.append({"k": k, "ic_squared": fit.ic_squared,
                     "ic_loglik": fit.ic_loglik, "converged": fit.converged})
        if best is None or value < best[0]:
            best = (value, fit)
    if best is None:
        raise RuntimeError(f"every candidate k in {k_min}..{k_max} failed")
    from dataclasses import replace as _replace
    return _replace(best[1], selection=tuple(
        tuple(sorted(rec.items())) for rec in scan))
