"""Integrated-squared-residual objective for smoothed conditional CDFs.

The fitting criterion compares each observation's indicator process
``1{Y_i <= y}`` with the leave-one-out CDF smoother evaluated at the
observation's cluster index, integrating the squared difference against the
empirical response distribution (so integrals are averages over the observed
responses).

Coefficients are estimated by damped Gauss-Newton steps built from the
smoother's analytic gradients: a coefficient enters through the evaluation
points of the observations it parameterizes and through those observations'
kernel weights inside every other observation's smoother, and both paths
are carried.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import ClusterCoefficients, Dataset, Partition
from .kernels import KernelSpec
from .smoothers import DenominatorUnderflow, bandwidth_grid, cdf_matrix, K2

__all__ = [
    "cdf_loss",
    "gamma_score",
    "fit_coefficients",
    "SingleIndexFit",
    "fit_single_index",
    "sliced_inverse_direction",
    "initial_direction",
]


def _pieces(data: Dataset, v_idx, h: float, spec: KernelSpec):
    """Shared residual/weight pieces at index values ``v_idx``."""
    from .kernels import scaled_kernel

    w, d, g = cdf_matrix(data, v_idx, v_idx, h, spec, exclude_diag=True)
    resid = data.leq_matrix - g
    c = scaled_kernel(spec, h, 1, v_idx[None, :] - v_idx[:, None])
    np.fill_diagonal(c, 0.0)
    cum_c = np.cumsum(c[:, data.response_order], axis=1)[:, data.response_counts - 1]
    # Evaluation-point factor: d/dv of the smoother, negated.
    tc = (cum_c - g * c.sum(axis=1)[:, None]) / d[:, None]
    return w, d, g, resid, c, tc


def cdf_loss(gamma: ClusterCoefficients, h: float, partition: Partition,
             data: Dataset, spec: KernelSpec = K2) -> float:
    """Average integrated squared deviation between indicator processes and
    the leave-one-out CDF smoother at the assigned cluster indices."""
    v = gamma.index_values(data.augmented, partition)
    _, _, g = cdf_matrix(data, v, v, h, spec, exclude_diag=True)
    resid = data.leq_matrix - g
    return 0.5 * float(np.sum(resid * resid)) / data.n


def clusters_engaged(v: np.ndarray, assignment: np.ndarray, k: int, h: float) -> bool:
    """Whether every cluster's index cloud has a cross-cluster neighbour
    within the kernel support.

    Once a cluster separates from all others by more than the support, its
    location drops out of the smoother entirely and the loss rewards the
    (unidentified) isolation; fits therefore stay inside the engaged
    region. For genuinely disjoint clusters this leaves the estimated
    separation at the engagement frontier, a lower bound on the truth.
    """
    if k <= 1:
        return True
    for ell in range(k):
        mine = v[assignment == ell]
        if mine.size == 0 or mine.size == v.size:
            continue
        others = np.sort(v[assignment != ell])
        pos = np.searchsorted(others, mine)
        best = np.inf
        left = pos > 0
        best = min(best, np.min(np.abs(mine[left] - others[pos[left] - 1]))
                   if left.any() else np.inf)
        right = pos < others.size
        best = min(best, np.min(np.abs(others[pos[right].clip(max=others.size - 1)] - mine[right]))
                   if right.any() else np.inf)
        if best >= h:
            return False
    return True


def _gradient_stack(data: Dataset, gamma: ClusterCoefficients,
                    partition: Partition, h: float, spec: KernelSpec):
    """Residuals plus per-free-slot gradient matrices, stacked (g, n, n).

    Every slot's gradient is exact: a coefficient moves both the evaluation
    points of the observations it parameterizes and those observations'
    kernel weights inside every other observation's smoother.
    """
    z = data.augmented
    v = gamma.index_values(z, partition)
    _, d, g, resid, c, tc = _pieces(data, v, h, spec)
    slots = gamma.free_slots
    grads = np.empty((len(slots), data.n, data.n))
    order = data.response_order
    counts = data.response_counts - 1
    for s, (cluster, j) in enumerate(slots):
        if cluster is not None:
            src = (partition.assignment == cluster) * z[:, j]
        else:
            src = z[:, j]
        cz = c * src[None, :]
        cum = np.cumsum(cz[:, order], axis=1)[:, counts]
        grads[s] = (cum - g * cz.sum(axis=1)[:, None]) / d[:, None] \
            - tc * src[:, None]
    value = 0.5 * float(np.sum(resid * resid)) / data.n
    return value, resid, grads


def gamma_score(gamma: ClusterCoefficients, partition: Partition, data: Dataset,
                h: float, spec: KernelSpec = K2, with_subject_scores: bool = False):
    """Objective value, gradient, and Gauss-Newton information over the free
    coefficients. With ``with_subject_scores``, also returns each
    observation's integrated score contribution (columns), used by the
    sandwich covariance estimator."""
    value, resid, grads = _gradient_stack(data, gamma, partition, h, spec)
    n = data.n
    grad = -np.einsum("gim,im->g", grads, resid) / n
    info = np.einsum("gim,him->gh", grads, grads) / n
    if with_subject_scores:
        subject_scores = np.einsum("gim,im->gi", grads, resid) / n
        return value, grad, info, subject_scores
    return value, grad, info


def _frozen_slots(gamma: ClusterCoefficients, partition: Partition):
    """Free-slot indices belonging to empty clusters (kept fixed)."""
    sizes = partition.sizes()
    return [s for s, (c, _) in enumerate(gamma.free_slots)
            if c is not None and c < partition.k and sizes[c] == 0]


def fit_coefficients(partition: Partition, data: Dataset,
                     gamma0: ClusterCoefficients, h: float,
                     spec: KernelSpec = K2, max_iter: int = 200,
                     tol: float = 1e-6,
                     intercept_cap: Optional[float] = None,
                     intercept_anchor=None) -> ClusterCoefficients:
    """Minimize the CDF loss over the free coefficients at a fixed partition.

    Damped Gauss-Newton with ridge escalation on a singular information
    matrix; steps are halved until the objective decreases, so the returned
    objective never exceeds the starting one. Rows of empty clusters are
    frozen.

    ``intercept_cap`` bounds how far any cluster-specific intercept may
    travel from its start. Cluster locations are only weakly identified
    once clusters separate on the index scale, and the smoothed objective
    rewards spurious extra separation at generous bandwidths; when the
    start comes from a profile scan, polishing within one bandwidth of it
    is all that is statistically meaningful.
    """
    gamma = gamma0
    theta0 = gamma0.pack() if intercept_anchor is None else np.asarray(intercept_anchor)
    frozen = _frozen_slots(gamma0, partition)
    value, grad, info = gamma_score(gamma, partition, data, h, spec)
    dim = info.shape[0]
    if dim == 0:
        return gamma
    for slot in frozen:
        grad[slot] = 0.0
        info[slot, :] = info[:, slot] = 0.0
        info[slot, slot] = 1.0
    for _ in range(max_iter):
        ridge = 1e-8 * max(np.trace(info), 1e-12) / dim
        step = None
        while ridge <= 1e-2 * max(np.trace(info), 1e-12) / dim * 1e6:
            try:
                step = np.linalg.solve(info + ridge * np.eye(dim), grad)
                if np.all(np.isfinite(step)):
                    break
            except np.linalg.LinAlgError:
                pass
            ridge *= 10.0
        if step is None or not np.all(np.isfinite(step)):
            raise np.linalg.LinAlgError("information matrix singular after ridge escalation")
        for slot in frozen:
            step[slot] = 0.0
        # Backtracking on the true objective keeps accepted iterates monotone;
        # disengaging trials are rejected like underflows.
        theta = gamma.pack()
        scale = 1.0
        improved = False
        for _ in range(30):
            proposal = theta - scale * step
            if intercept_cap is not None:
                for s, (cluster, j) in enumerate(gamma.free_slots):
                    if cluster is not None and j == 0:
                        lo = theta0[s] - intercept_cap
                        hi = theta0[s] + intercept_cap
                        proposal[s] = min(max(proposal[s], lo), hi)
            trial = gamma.unpack(proposal)
            try:
                v_trial = trial.index_values(data.augmented, partition)
                if not clusters_engaged(v_trial, partition.assignment, partition.k, h):
                    trial_value = np.inf
                else:
                    trial_value = cdf_loss(trial, h, partition, data, spec)
            except DenominatorUnderflow:
                trial_value = np.inf
            if trial_value < value:
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
        moved = float(np.linalg.norm(scale * step))
        gamma, value = trial, trial_value
        value, grad, info = gamma_score(gamma, partition, data, h, spec)
        for slot in frozen:
            grad[slot] = 0.0
            info[slot, :] = info[:, slot] = 0.0
            info[slot, slot] = 1.0
        if moved < tol:
            break
    return gamma


def select_smoothing_bandwidth(gamma: ClusterCoefficients, partition: Partition,
                               data: Dataset, spec: KernelSpec = K2,
                               num_grid: int = 30):
    """Grid argmin of the CDF loss in the bandwidth at a fixed fit.

    If the whole admissible window underflows (compact support with an
    isolated index value), the upper end is doubled a few times before
    giving up. Returns ``(bandwidth, loss)``.
    """
    idx = gamma.index_values(data.augmented, partition)
    grid = bandwidth_grid(idx, data.n, num_grid)
    for _ in range(7):
        losses = []
        for h in grid:
            try:
                losses.append(cdf_loss(gamma, float(h), partition, data, spec))
            except DenominatorUnderflow:
                losses.append(np.inf)
        pos = int(np.argmin(losses))
        if np.isfinite(losses[pos]):
            return float(grid[pos]), float(losses[pos])
        grid = grid * 2.0
    raise DenominatorUnderflow("no usable smoothing bandwidth found")


def golden_section(f, lo: float, hi: float, iters: int = 18) -> float:
    """Golden-section minimizer on [lo, hi]; non-finite values are repelled."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return c if fc < fd else d


@dataclass(frozen=True)
class SingleIndexFit:
    """Single-index CDF fit with its three bandwidth artifacts.

    ``h_bar`` is the jointly selected estimation bandwidth, ``h_hat`` the
    inflated bandwidth used inside later optimization objectives, and
    ``h_tilde`` the re-selected bandwidth for post-fit smoothing.
    """

    gamma: ClusterCoefficients
    h_bar: float
    h_hat: float
    h_tilde: float
    objective: float


def sliced_inverse_direction(x: np.ndarray, y: np.ndarray, slices: int = 5) -> np.ndarray:
    """Leading sliced-inverse-regression direction of y on x."""
    n, p = x.shape
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False) + 1e-10 * np.eye(p)
    evals, evecs = np.linalg.eigh(cov)
    root_inv = evecs @ np.diag(evals ** -0.5) @ evecs.T
    xw = (x - mu) @ root_inv
    edges = np.quantile(y, np.linspace(0, 1, slices + 1))
    m = np.zeros((p, p))
    for s in range(slices):
        if s < slices - 1:
            in_slice = (y >= edges[s]) & (y < edges[s + 1])
        else:
            in_slice = (y >= edges[s]) & (y <= edges[s + 1])
        if in_slice.sum() < 2:
            continue
        mean_s = xw[in_slice].mean(axis=0)
        m += in_slice.mean() * np.outer(mean_s, mean_s)
    evals_m, evecs_m = np.linalg.eigh(m)
    return root_inv @ evecs_m[:, -1]


def initial_direction(data: Dataset, layout, spec: KernelSpec = K2) -> np.ndarray:
    """Starting slope vector for index fitting, normalized to the scale pin.

    Candidate directions come from sliced inverse regression (when all
    covariates are continuous and p >= 2; its linearity condition fails for
    discrete designs at small n) and ordinary least squares. Because the
    pin normalization divides by one estimated coordinate, a chance-small
    coordinate can blow the start up, so a pin-floored variant of each
    candidate is added and the winner is chosen by the fitting objective
    itself at a pilot bandwidth.
    """
    candidates = []
    coef, *_ = np.linalg.lstsq(data.augmented, data.responses, rcond=None)
    candidates.append(coef[1:])
    if data.p >= 2 and bool(np.all(data.continuous)):
        candidates.append(sliced_inverse_direction(data.covariates, data.responses))
    scale_pin = next((p for p in layout.pins if p.value == 1.0), None)
    if scale_pin is None:
        return candidates[-1]
    pos = scale_pin.position - 1
    normalized = []
    for direction in candidates:
        d = np.array(direction, dtype=float)
        rms = float(np.sqrt(np.mean(d ** 2))) or 1.0
        floored = np.array(d)
        if abs(floored[pos]) < 0.5 * rms:
            floored[pos] = (1.0 if floored[pos] >= 0 else -1.0) * 0.5 * rms
        for cand in (d, floored):
            if abs(cand[pos]) < 1e-10:
                continue
            normalized.append(cand / cand[pos])
    if not normalized:
        fallback = np.zeros(data.p)
        fallback[pos] = 1.0
        return fallback
    if len(normalized) == 1:
        return normalized[0]
    partition = Partition(np.zeros(data.n, dtype=int), 1)
    best, best_loss = normalized[0], np.inf
    for d in normalized:
        gamma = ClusterCoefficients(layout, np.concatenate([[0.0], d])[None, :])
        idx = gamma.index_values(data.augmented, partition)
        grid = bandwidth_grid(idx, data.n)
        loss = np.inf
        for h in (np.median(grid), grid[-1]):
            try:
                loss = cdf_loss(gamma, float(h), partition, data, spec)
                break
            except DenominatorUnderflow:
                continue
        if loss < best_loss:
            best, best_loss = d, loss
    return best


def fit_single_index(data: Dataset, layout, spec: KernelSpec = K2,
                     rounds: int = 10, num_grid: int = 30) -> SingleIndexFit:
    """Fit the one-cluster index model, selecting bandwidths by score iteration.

    Jointly minimizes the CDF loss over coefficients and bandwidth, inflates
    the bandwidth by ``n^(3/80)`` and re-minimizes over the coefficients,
    then re-selects a smoothing bandwidth on the grid at the final fit.
    """
    if data.n < 10:
        raise ValueError("single-index fitting needs at least 10 observations")
    n = data.n
    direction = initial_direction(data, layout)
    row = np.concatenate([[0.0], direction])
    gamma = ClusterCoefficients(layout, row[None, :])
    partition = Partition(np.zeros(n, dtype=int), 1)

    def loss_at(hh, gg):
        try:
            return cdf_loss(gg, hh, partition, data, spec)
        except DenominatorUnderflow:
            return np.inf

    h = None
    for _ in range(rounds):
        # The admissible window tracks the current fit's index spread.
        idx = gamma.index_values(data.augmented, partition)
        grid = bandwidth_grid(idx, n, num_grid)
        h_new = golden_section(lambda hh: loss_at(hh, gamma), grid[0], grid[-1])
        gamma_new = fit_coefficients(partition, data, gamma, h_new, spec, max_iter=50)
        moved = float(np.linalg.norm(gamma_new.pack() - gamma.pack())) \
            + (abs(h_new - h) if h is not None else np.inf)
        gamma, h = gamma_new, h_new
        if moved < 1e-7:
            break
    h_bar = h
    h_hat = n ** (3.0 / 80.0) * h_bar
    gamma = fit_coefficients(partition, data, gamma, h_hat, spec)
    h_tilde, objective = select_smoothing_bandwidth(gamma, partition, data, spec, num_grid)
    return SingleIndexFit(gamma, h_bar, h_hat, h_tilde, objective)
