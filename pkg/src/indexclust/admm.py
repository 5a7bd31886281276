"""Separation-penalty estimation by consensus ADMM.

The subjectwise CDF loss is penalized by ``lambda * sum_i min_l
||b_i - center_l||_1``, the L1 distance from each observation's
cluster-specific coefficient block to its nearest center. Splitting the
penalty onto consensus copies ``eta`` of the blocks gives an augmented
Lagrangian solved by alternating:

* a damped Gauss-Newton step on the subject coefficients (per-observation
  blocks for the specific part, a shared step for the invariant part),
* an ``(eta, centers)`` block-coordinate pass, where the nonconvex
  min-distance penalty is handled by a difference-of-convex linearization
  (the distance sum excluding each point's nearest center is linearized)
  and each eta subproblem is itself solved by a small inner ADMM with
  soft-thresholded slacks; centers move to coordinatewise lower medians,
* a dual update on the consensus gap.

A decreasing-objective acceptance test guards the consensus pass, and the
whole path is warm-started along an increasing penalty grid whose endpoint
collapses every block onto a center.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import ClusterCoefficients, Dataset, Partition, SubjectCoefficients
from .initialize import InitCandidate
from .kernels import KernelSpec, scaled_kernel
from .objective import cdf_loss, golden_section
from .smoothers import DenominatorUnderflow, K2, bandwidth_grid, cdf_matrix

__all__ = [
    "Tolerances",
    "AdmmState",
    "PenalizedFit",
    "separation_penalty",
    "penalized_loss",
    "soft_threshold",
    "beta_step",
    "consensus_step",
    "admm_fit",
    "assign_to_centers",
    "fit_penalized",
]


@dataclass(frozen=True)
class Tolerances:
    """Stopping rules for the three nested loops.

    The primal tolerance scales with sqrt(n q) and the inner consensus
    tolerance with n k, so the defaults are size-aware.
    """

    primal_factor: float = 1e-4
    beta_tol: float = 1e-6
    eta_factor: float = 1e-5
    max_outer: int = 500
    max_beta: int = 100
    max_eta: int = 200
    max_consensus: int = 50


@dataclass
class AdmmState:
    """Mutable solver state for one penalty value."""

    beta: SubjectCoefficients
    eta: np.ndarray        # (n, q_free) consensus copies of the specific blocks
    gamma1: np.ndarray     # (k, q_free) centers
    nu: np.ndarray         # (n, q_free) scaled duals
    lam: float
    iteration: int = 0
    converged: bool = False


@dataclass(frozen=True)
class PenalizedFit:
    """Selected-penalty fit: partition, coefficients, and diagnostics."""

    partition: Partition
    gamma: ClusterCoefficients
    beta: SubjectCoefficients
    lambda_hat: float
    h_tilde: float
    objective: float
    converged: bool
    path: tuple = field(default=())


def separation_penalty(block: np.ndarray, centers: np.ndarray) -> float:
    """sum_i min_l ||block_i - centers_l||_1."""
    dist = np.abs(block[:, None, :] - centers[None, :, :]).sum(axis=2)
    return float(dist.min(axis=1).sum())


def penalized_loss(beta: SubjectCoefficients, gamma1: np.ndarray, lam: float,
                   data: Dataset, h: float, spec: KernelSpec = K2) -> float:
    """Subjectwise CDF loss plus the separation penalty."""
    v = beta.index_values(data.augmented)
    _, _, g = cdf_matrix(data, v, v, h, spec, exclude_diag=True)
    resid = data.leq_matrix - g
    fit = 0.5 * float(np.sum(resid * resid)) / data.n
    return fit + lam * separation_penalty(beta.specific_block(), gamma1)


def soft_threshold(v: np.ndarray, lam: float) -> np.ndarray:
    """Componentwise shrinkage max(0, 1 - lam/|v|) v, with 0 kept at 0."""
    if lam < 0:
        raise ValueError("threshold must be nonnegative")
    v = np.asarray(v, dtype=float)
    mag = np.abs(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(mag > 0, np.maximum(0.0, 1.0 - lam / mag), 0.0)
    return factor * v


def _beta_pieces(beta: SubjectCoefficients, data: Dataset, h: float, spec: KernelSpec):
    """Residuals plus the score ingredients shared by both blocks."""
    v = beta.index_values(data.augmented)
    w, d, g = cdf_matrix(data, v, v, h, spec, exclude_diag=True)
    resid = data.leq_matrix - g
    c = scaled_kernel(spec, h, 1, v[None, :] - v[:, None])
    np.fill_diagonal(c, 0.0)
    order = data.response_order
    counts = data.response_counts - 1
    cum_c = np.cumsum(c[:, order], axis=1)[:, counts]
    tc = (cum_c - g * c.sum(axis=1)[:, None]) / d[:, None]
    return v, w, d, g, resid, c, tc


def _specific_scores(data: Dataset, d, g, resid, c, tc):
    """Exact per-observation specific-block score scalars and the
    per-observation information scalars (the block-diagonal structure).

    The score adds each observation's own evaluation-point term and the
    cross terms from its kernel weight inside every other observation's
    smoother, the latter assembled from suffix sums in O(n^2).
    """
    n = data.n
    own = np.einsum("im,im->i", resid, tc) / n
    left = data.response_counts_left
    aa = n - np.maximum(left[:, None], left[None, :])
    g_sorted = g[:, data.response_order]
    suffix = np.cumsum(g_sorted[:, ::-1], axis=1)[:, ::-1]
    pad = np.zeros((n, 1))
    suffix = np.hstack([suffix, pad])
    gat = suffix[:, left]
    rg = np.einsum("im,im->i", resid, g)
    e = (aa - gat - rg[:, None]) / n
    cross = ((e * c) / d[:, None]).sum(axis=0)
    info = np.einsum("im,im->i", tc, tc) / n
    return own - cross, info


def _invariant_scores(data: Dataset, z2, d, g, resid, c, tc):
    """Exact score and Gauss-Newton information for the shared block."""
    n = data.n
    order = data.response_order
    counts = data.response_counts - 1
    dim = z2.shape[1]
    score = np.zeros(dim)
    grads = np.empty((dim, n, n))
    for t in range(dim):
        cz = c * z2[None, :, t]
        cum = np.cumsum(cz[:, order], axis=1)[:, counts]
        grads[t] = (cum - g * cz.sum(axis=1)[:, None]) / d[:, None] - tc * z2[:, t][:, None]
    score = -np.einsum("tim,im->t", grads, resid) / n
    info = np.einsum("tim,sim->ts", grads, grads) / n
    return score, info


def beta_step(state: AdmmState, data: Dataset, h: float, spec: KernelSpec = K2,
              tolerances: Tolerances = Tolerances(),
              tie: Optional[Partition] = None) -> SubjectCoefficients:
    """Inner Gauss-Newton pass on the subject coefficients.

    Specific blocks take damped per-observation steps against the proximal
    pull toward ``eta``; the shared invariant block takes a joint step.
    With ``tie`` given, observations in a cluster move together (their
    scores and informations are pooled), which reduces the fixed point to
    the partition-based fit.

    The pass stops once its step norm is small against the current
    consensus gap: the subproblem only needs to be solved to the accuracy
    the outer loop can use.
    """
    from . import _fastcore
    from .smoothers import FLOOR_FRACTION

    beta = state.beta
    layout = beta.layout
    z = data.augmented
    spec_cols = list(layout.subject_free_specific)
    inv_cols = list(layout.free_invariant)
    z1 = z[:, spec_cols]
    z2 = np.ascontiguousarray(z[:, inv_cols]) if inv_cols else np.zeros((data.n, 0))
    qf = len(spec_cols)
    eye_q = np.eye(qf)
    use_fast = _fastcore.HAVE_NUMBA and spec.order == 2
    gap = float(np.linalg.norm(beta.specific_block() - state.eta)) if qf else 0.0
    stop_tol = max(tolerances.beta_tol, 0.05 * gap)
    prev_moved = np.inf
    for it in range(tolerances.max_beta):
        if use_fast:
            v = beta.index_values(z)
            ok, s_scalar, i_scalar, s2, i2 = _fastcore.beta_score_core(
                v, data.response_order, data.response_counts,
                data.response_counts_left, data.leq_matrix, z2, h,
                FLOOR_FRACTION * data.n * spec.at_zero / h)
            if not ok:
                if it == 0:
                    raise DenominatorUnderflow(
                        "weight sum underflow in the subject step",
                        subject=int(s_scalar[0]))
                return last_feasible
        else:
            try:
                v, w, d, g, resid, c, tc = _beta_pieces(beta, data, h, spec)
            except DenominatorUnderflow:
                if it == 0:
                    raise
                return last_feasible
            s_scalar, i_scalar = _specific_scores(data, d, g, resid, c, tc)
            if inv_cols:
                s2, i2 = _invariant_scores(data, z2, d, g, resid, c, tc)
        last_feasible = beta
        moved = 0.0
        if qf:
            block = beta.specific_block()
            s1 = s_scalar[:, None] * z1 + (block - state.eta + state.nu)
            i1 = i_scalar[:, None, None] * np.einsum("ij,ik->ijk", z1, z1) + eye_q
            if tie is None:
                step = np.linalg.solve(i1, s1[..., None])[..., 0]
            else:
                step = np.empty_like(s1)
                for ell in range(tie.k):
                    members = tie.members(ell)
                    if members.size == 0:
                        continue
                    pooled = np.linalg.solve(i1[members].sum(axis=0), s1[members].sum(axis=0))
                    step[members] = pooled
            block_new = block - step
            moved += float(np.linalg.norm(step))
            beta = beta.with_specific(block_new)
        if inv_cols:
            dim = len(inv_cols)
            ridge = 1e-8 * max(np.trace(i2), 1e-12) / dim
            while True:
                try:
                    step2 = np.linalg.solve(i2 + ridge * np.eye(dim), s2)
                    if np.all(np.isfinite(step2)):
                        break
                except np.linalg.LinAlgError:
                    pass
                ridge *= 10.0
                if ridge > 1e6:
                    raise np.linalg.LinAlgError("invariant information singular")
            shared = beta.rows[0, inv_cols] - step2
            moved += float(np.linalg.norm(step2))
            beta = beta.with_invariant(shared)
        if moved < stop_tol:
            break
        # Undamped Gauss-Newton can settle into a small limit cycle; once
        # the step size stops contracting, more passes buy nothing.
        if it >= 2 and moved > 0.7 * prev_moved:
            break
        prev_moved = moved
    return beta


def _dc_subgradient(eta: np.ndarray, gamma1: np.ndarray) -> np.ndarray:
    """Subgradient of the linearized concave part: for each point, the sign
    pattern summed over every center except its nearest (lowest index on
    ties), with sign(0) = 0."""
    dist = np.abs(eta[:, None, :] - gamma1[None, :, :]).sum(axis=2)
    nearest = np.argmin(dist, axis=1)
    signs = np.sign(eta[:, None, :] - gamma1[None, :, :])
    signs[np.arange(eta.shape[0]), nearest, :] = 0.0
    return signs.sum(axis=1)


def _augmented_penalty(eta, gamma1, b, nu, lam) -> float:
    gap = b - eta
    return (lam * separation_penalty(eta, gamma1)
            + float(np.sum(nu * gap)) + 0.5 * float(np.sum(gap * gap)))


def consensus_step(state: AdmmState, beta_new: SubjectCoefficients,
                   tolerances: Tolerances = Tolerances()):
    """Block-coordinate pass on (eta, centers).

    Each round linearizes the concave part at the current eta, solves the
    eta subproblem by an inner ADMM with per-center slacks, then moves each
    center to the coordinatewise lower median of its nearest points. Rounds
    are accepted while the augmented objective (data-fit term fixed at the
    new beta) does not increase.
    """
    b = beta_new.specific_block()
    nu = state.nu
    lam = state.lam
    eta, gamma1 = state.eta, state.gamma1
    k, qf = gamma1.shape
    n = b.shape[0]
    eps_eta = tolerances.eta_factor * n * k
    current = _augmented_penalty(eta, gamma1, b, nu, lam)
    for _ in range(tolerances.max_consensus):
        subgrad = _dc_subgradient(eta, gamma1)
        delta = eta[:, None, :] - gamma1[None, :, :]
        u = np.zeros_like(delta)
        base = b + nu + lam * subgrad
        eta_bar = eta
        for _ in range(tolerances.max_eta):
            eta_bar = (base + (gamma1[None, :, :] + delta - u).sum(axis=1)) / (k + 1.0)
            target = eta_bar[:, None, :] - gamma1[None, :, :] + u
            delta = soft_threshold(target, lam)
            gap = eta_bar[:, None, :] - gamma1[None, :, :] - delta
            u = u + gap
            if float(np.sqrt((gap * gap).sum(axis=2)).sum()) < eps_eta:
                break
        eta_new = eta_bar
        dist = np.abs(eta_new[:, None, :] - gamma1[None, :, :]).sum(axis=2)
        nearest = np.argmin(dist, axis=1)
        gamma_new = np.array(gamma1)
        for ell in range(k):
            members = eta_new[nearest == ell]
            if members.shape[0]:
                m = members.shape[0]
                gamma_new[ell] = np.sort(members, axis=0)[(m - 1) // 2]
        proposed = _augmented_penalty(eta_new, gamma_new, b, nu, lam)
        if proposed > current:
            break
        eta, gamma1, current = eta_new, gamma_new, proposed
    return eta, gamma1


def admm_fit(data: Dataset, k: int, lam: float, h: float,
             init: AdmmState, tolerances: Tolerances = Tolerances(),
             spec: KernelSpec = K2, tie: Optional[Partition] = None) -> AdmmState:
    """Run the outer ADMM loop at one penalty value, from ``init``.

    Alternates the coefficient step, the consensus pass, and the dual
    update until the primal gap ||b - eta|| drops under the tolerance.
    Non-convergence is flagged, not fatal; the state is returned for
    inspection either way.
    """
    state = replace(init, lam=lam)
    qf = state.eta.shape[1]
    eps_primal = tolerances.primal_factor * np.sqrt(max(data.n * qf, 1))
    for m in range(tolerances.max_outer):
        beta_new = beta_step(state, data, h, spec, tolerances, tie=tie)
        eta_new, gamma_new = consensus_step(state, beta_new, tolerances)
        gap = beta_new.specific_block() - eta_new
        state = AdmmState(beta_new, eta_new, gamma_new, state.nu + gap,
                          lam, iteration=m + 1)
        if float(np.linalg.norm(gap)) < eps_primal:
            state.converged = True
            break
    return state


def assign_to_centers(beta: SubjectCoefficients, gamma1: np.ndarray) -> Partition:
    """Each observation to the L1-nearest center, lowest index on ties."""
    dist = np.abs(beta.specific_block()[:, None, :] - gamma1[None, :, :]).sum(axis=2)
    return Partition(np.argmin(dist, axis=1), gamma1.shape[0])


def _anchored(gamma_values: np.ndarray, layout, beta: SubjectCoefficients):
    """Relabel centers by ascending intercept and re-anchor the pins.

    Cluster-specific intercept pins are restored by a global index shift
    (which leaves the subjectwise loss unchanged); a cluster-specific scale
    pin is restored by a global rescale.
    """
    order = np.argsort(gamma_values[:, 0], kind="stable")
    values = gamma_values[order]
    rows = np.array(beta.rows)
    shift = 0.0
    scale = 1.0
    for pin in layout.pins:
        if pin.cluster is not None and pin.position in layout.specific:
            if pin.value == 0.0:
                shift = values[pin.cluster, pin.position]
            elif abs(values[pin.cluster, pin.position]) > 1e-12:
                scale = pin.value / values[pin.cluster, pin.position]
    intercept_specific = 0 in layout.specific
    if intercept_specific and shift != 0.0:
        values[:, 0] -= shift
        rows[:, 0] -= shift
    if scale != 1.0:
        values *= scale
        rows *= scale
        for pin in layout.pins:
            if pin.cluster is None:
                values[:, pin.position] = pin.value
                rows[:, pin.position] = pin.value
    gamma = ClusterCoefficients(layout, values)
    return gamma, SubjectCoefficients(layout, rows), order


def fit_penalized(data: Dataset, k: int, candidates: list, h_hat: float,
                  spec: KernelSpec = K2, tolerances: Tolerances = Tolerances(),
                  n_lambda: int = 20, grid_num: int = 30) -> PenalizedFit:
    """Warm-started penalty path ending at the smallest value that collapses
    every block onto a center, selecting the penalty whose induced partition
    minimizes the partition-based loss at its own re-chosen bandwidth."""
    cand = next((c for c in candidates if c.k == k), None)
    if cand is None:
        raise ValueError(f"no initial candidate with {k} clusters")
    layout = cand.gamma.layout
    spec_cols = list(layout.subject_free_specific)
    block0 = cand.beta.specific_block()
    centers0 = cand.gamma.values[:, spec_cols]
    lam_max = float(np.abs(block0[:, None, :] - centers0[None, :, :]).sum(axis=2).max())
    if lam_max <= 0:
        lam_max = 1e-6
    lambdas = np.geomspace(lam_max / 1000.0, lam_max, n_lambda)
    state = AdmmState(cand.beta, np.array(block0), np.array(centers0),
                      np.zeros_like(block0), lam=float(lambdas[0]))
    best = None
    path = []
    any_converged = False
    for lam in lambdas:
        try:
            state = admm_fit(data, k, float(lam), h_hat, state, tolerances, spec)
        except DenominatorUnderflow:
            path.append({"lambda": float(lam), "criterion": float("inf"),
                         "converged": False, "iterations": 0, "sizes": []})
            continue
        any_converged = any_converged or state.converged
        part = assign_to_centers(state.beta, state.gamma1)
        full = np.array(state.beta.rows[0])[None, :].repeat(k, axis=0)
        full[:, spec_cols] = state.gamma1
        try:
            gamma, beta_anchored, order = _anchored(full, layout, state.beta)
        except Exception:
            continue
        part = part.relabeled(order)
        idx = gamma.index_values(data.augmented, part)
        grid = bandwidth_grid(idx, data.n, grid_num)
        losses = []
        for hh in grid:
            try:
                losses.append(cdf_loss(gamma, float(hh), part, data, spec))
            except DenominatorUnderflow:
                losses.append(np.inf)
        pos = int(np.argmin(losses))
        crit = float(losses[pos])
        path.append({"lambda": float(lam), "criterion": crit,
                     "converged": bool(state.converged),
                     "iterations": int(state.iteration),
                     "sizes": part.sizes().tolist()})
        if np.isfinite(crit) and (best is None or crit < best.objective):
            best = PenalizedFit(part, gamma, beta_anchored, float(lam),
                                float(grid[pos]), crit, state.converged)
    if best is None or not any_converged:
        raise RuntimeError("no penalty value produced a usable fit")
    return replace(best, path=tuple(path))
