"""Covariate-dependent cluster membership via sufficient dimension reduction.

Membership probabilities are modeled as unknown functions of ``B' x`` for a
low-rank basis ``B``. The basis is identified through a local chart whose
top block is the identity, so only the trailing ``(p - d) x d`` block is
free; when the chart's orientation excludes the fitted subspace, cyclic
reorderings of the covariates are tried and the best objective kept.

The free block is estimated by a pseudo-least-squares criterion: squared
deviations of cluster indicators from leave-one-out Nadaraya-Watson
membership estimates on the projected scale, summed over the first k - 1
clusters. The structural dimension is selected by a penalized version of
the same criterion evaluated by forward search, with a second-order kernel
for dimensions one and two and a fourth-order kernel above.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .data import Partition
from .kernels import KernelSpec, kernel_eval
from .objective import golden_section
from .smoothers import DenominatorUnderflow, membership_matrix

__all__ = [
    "ProjectionBasis",
    "MembershipFit",
    "membership_loss",
    "membership_loss_gradient",
    "fit_basis",
    "select_dimension",
    "dimension_penalty",
    "bandwidth_window",
    "sir_chart_init",
    "bootstrap_basis_se",
]


@dataclass(frozen=True)
class ProjectionBasis:
    """Chart-parameterized basis of the membership subspace.

    The basis acts on covariates reordered by ``order``; its top d x d
    block is the identity and ``a_star`` is the free trailing block, so the
    chart columns always have full rank.
    """

    d: int
    a_star: np.ndarray                    # (p - d, d)
    order: tuple = ()

    def __post_init__(self):
        a = np.asarray(self.a_star, dtype=float).reshape(-1, self.d)
        a.setflags(write=False)
        object.__setattr__(self, "a_star", a)
        p = self.d + a.shape[0]
        if not self.order:
            object.__setattr__(self, "order", tuple(range(p)))

    @property
    def p(self) -> int:
        return self.d + self.a_star.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        """Basis as a (p, d) matrix in the original covariate order."""
        chart = np.vstack([np.eye(self.d), self.a_star])
        out = np.empty_like(chart)
        out[list(self.order), :] = chart
        return out

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.matrix

    def projection_matrix(self) -> np.ndarray:
        a = self.matrix
        return a @ np.linalg.solve(a.T @ a, a.T)


@dataclass(frozen=True)
class MembershipFit:
    """Fitted membership model: basis, bandwidth, and the dimension search."""

    basis: ProjectionBasis
    h_tilde_d: float
    pss_by_d: dict
    d_hat: int
    spec: KernelSpec


def membership_loss(basis: ProjectionBasis, h_d: float, partition: Partition,
                    x: np.ndarray, spec: KernelSpec) -> float:
    """Half the squared deviation of cluster indicators from leave-one-out
    membership estimates, summed over observations and the first k - 1
    clusters.

    An observation isolated on the projected scale (empty leave-one-out
    neighbourhood) contributes its worst-case residual, so a direction is
    penalized in proportion to how many points it strands rather than
    being rejected outright.
    """
    if partition.k < 2:
        raise ValueError("membership loss needs at least two clusters")
    pi, _ = membership_matrix(basis.project(x), partition, h_d, spec,
                              loo=True, mask_underflow=True)
    onehot = np.zeros((partition.n, partition.k))
    onehot[np.arange(partition.n), partition.assignment] = 1.0
    resid = onehot[:, :-1] - pi[:, :-1]
    return 0.5 * float(np.sum(resid * resid))


def _loss_and_gradient(basis: ProjectionBasis, h_d: float, partition: Partition,
                       x: np.ndarray, spec: KernelSpec):
    """Loss plus its exact gradient with respect to the free block."""
    d = basis.d
    xp = np.asarray(x)[:, list(basis.order)]
    head, tail = xp[:, :d], xp[:, d:]
    proj = head + tail @ basis.a_star
    n, k = partition.n, partition.k
    diffs = [proj[None, :, t] - proj[:, None, t] for t in range(d)]
    f = [kernel_eval(spec, 0, dv / h_d) / h_d for dv in diffs]
    fp = [kernel_eval(spec, 1, dv / h_d) / h_d ** 2 for dv in diffs]
    kappa = np.ones((n, n))
    for ft in f:
        kappa = kappa * ft
    np.fill_diagonal(kappa, 0.0)
    denom = kappa.sum(axis=1)
    floor = 1e-12 * n * (spec.at_zero / h_d) ** d
    bad = denom < floor
    denom = np.where(bad, 1.0, denom)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), partition.assignment] = 1.0
    pi = (kappa @ onehot) / denom[:, None]
    pi[bad] = 0.0
    resid = onehot[:, :-1] - pi[:, :-1]
    loss = 0.5 * float(np.sum(resid * resid))
    # m[i, j] = sum_l resid[i, l] (onehot[j, l] - pi[i, l])
    m = resid @ onehot[:, :-1].T - np.einsum("il,il->i", resid, pi[:, :-1])[:, None]
    m[bad] = 0.0
    grad = np.zeros_like(basis.a_star)
    for t in range(d):
        pt = fp[t]
        for tt in range(d):
            if tt != t:
                pt = pt * f[tt]
        np.fill_diagonal(pt, 0.0)
        a_t = m * pt / denom[:, None]
        grad[:, t] = -(a_t.sum(axis=0) @ tail - a_t.sum(axis=1) @ tail)
    return loss, grad


def membership_loss_gradient(basis: ProjectionBasis, h_d: float,
                             partition: Partition, x: np.ndarray,
                             spec: KernelSpec) -> np.ndarray:
    """Gradient of the membership loss with respect to vec(a_star)."""
    return _loss_and_gradient(basis, h_d, partition, x, spec)[1].ravel()


def bandwidth_window(projected: np.ndarray, n: int, d: int, r: int):
    """Admissible bandwidth window for the projected scale."""
    s = max(float(np.mean(np.std(np.atleast_2d(projected.T), axis=1))), 1e-8)
    lo = 0.2 * s * n ** (-1.0 / max(2 * d + 2, d + 4))
    hi = 3.0 * s * n ** (-1.0 / (4.0 * r))
    return lo, max(hi, lo * 1.001)


def _whitened(xp: np.ndarray):
    mu = xp.mean(axis=0)
    cov = np.cov(xp, rowvar=False) + 1e-8 * np.eye(xp.shape[1])
    evals, evecs = np.linalg.eigh(cov)
    root_inv = evecs @ np.diag(evals ** -0.5) @ evecs.T
    return (xp - mu) @ root_inv, root_inv


def _to_chart(v: np.ndarray, d: int) -> np.ndarray:
    head, tail = v[:d, :], v[d:, :]
    try:
        return tail @ np.linalg.inv(head)
    except np.linalg.LinAlgError:
        return np.zeros((v.shape[0] - d, d))


def sir_chart_init(partition: Partition, x: np.ndarray, d: int,
                   order: tuple) -> np.ndarray:
    """Chart coordinates of the sliced-inverse-regression directions of the
    cluster indicator, zeros when the chart orientation is singular."""
    xp = np.asarray(x)[:, list(order)]
    n, p = xp.shape
    xw, root_inv = _whitened(xp)
    m = np.zeros((p, p))
    for ell in range(partition.k):
        members = partition.members(ell)
        if members.size < 2:
            continue
        mean_l = xw[members].mean(axis=0)
        m += members.size / n * np.outer(mean_l, mean_l)
    _, vecs = np.linalg.eigh(m)
    return _to_chart(root_inv @ vecs[:, -d:], d)


def save_chart_init(partition: Partition, x: np.ndarray, d: int,
                    order: tuple) -> np.ndarray:
    """Chart coordinates from sliced average variance estimation, which
    also picks up directions where membership depends on the index only
    through its magnitude (first moments cancel there)."""
    xp = np.asarray(x)[:, list(order)]
    n, p = xp.shape
    xw, root_inv = _whitened(xp)
    m = np.zeros((p, p))
    eye = np.eye(p)
    for ell in range(partition.k):
        members = partition.members(ell)
        if members.size < p + 1:
            continue
        gap = eye - np.cov(xw[members], rowvar=False)
        m += members.size / n * gap @ gap
    _, vecs = np.linalg.eigh(m)
    return _to_chart(root_inv @ vecs[:, -d:], d)


def fit_basis(partition: Partition, x: np.ndarray, d: int, spec: KernelSpec,
              init: Optional[ProjectionBasis] = None, rounds: int = 2,
              max_iter: int = 60):
    """Fit the free chart block and its bandwidth at a fixed dimension.

    Alternates quasi-Newton minimization over the free block (analytic
    gradients) with golden-section bandwidth search in the admissible
    window. When the identity-top chart stalls in its default orientation,
    cyclic covariate reorderings are tried and the best objective kept.
    Returns ``(basis, h_tilde_d, loss)``.
    """
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    if d > p:
        raise ValueError("dimension exceeds the number of covariates")
    r = spec.order
    if d == p:
        basis = ProjectionBasis(d, np.zeros((0, d)))
        proj = basis.project(x)
        lo, hi = bandwidth_window(proj, n, d, r)
        h = golden_section(lambda hh: _safe_loss(basis, hh, partition, x, spec), lo, hi)
        return basis, float(h), _safe_loss(basis, h, partition, x, spec)

    orderings = [tuple(range(p))]
    shift = max(d, 1)
    for j in range(1, int(np.ceil(p / shift))):
        rolled = tuple(np.roll(np.arange(p), -j * shift))
        orderings.append(rolled)

    best = None
    for ordering in orderings:
        starts = []
        if init is not None and ordering == tuple(init.order):
            starts.append(np.array(init.a_star))
        # Inverse-moment inits cover monotone dependence (slice means) and
        # symmetric dependence (slice variances); zeros guard degenerate data.
        starts.append(sir_chart_init(partition, x, d, ordering))
        starts.append(save_chart_init(partition, x, d, ordering))
        starts.append(np.zeros((p - d, d)))
        scored = []
        for a0 in starts:
            if any(np.allclose(a0, prev) for prev, _, _ in scored):
                continue
            basis = ProjectionBasis(d, a0, ordering)
            proj = basis.project(x)
            lo, hi = bandwidth_window(proj, n, d, r)
            h0 = golden_section(lambda hh: _safe_loss(basis, hh, partition, x, spec),
                                lo, hi, iters=12)
            scored.append((a0, float(h0), _safe_loss(basis, h0, partition, x, spec)))
        scored.sort(key=lambda t: t[2])
        stalled = True
        for a0, h, start_loss in scored[:2]:
            basis = ProjectionBasis(d, a0, ordering)
            loss = start_loss
            for _ in range(rounds):
                res = minimize(
                    lambda v: _safe_loss_grad(ProjectionBasis(d, v.reshape(-1, d), ordering),
                                              h, partition, x, spec),
                    basis.a_star.ravel(), jac=True, method="L-BFGS-B",
                    options={"maxiter": max_iter})
                basis = ProjectionBasis(d, res.x.reshape(-1, d), ordering)
                proj = basis.project(x)
                lo, hi = bandwidth_window(proj, n, d, r)
                h_new = golden_section(lambda hh: _safe_loss(basis, hh, partition, x, spec), lo, hi)
                loss_new = _safe_loss(basis, h_new, partition, x, spec)
                stable = abs(loss_new - loss) <= 1e-9 * max(1.0, abs(loss))
                h, loss = h_new, loss_new
                if stable:
                    break
            if np.isfinite(loss) and loss < start_loss - 1e-12 * max(1.0, start_loss):
                stalled = False
            if best is None or loss < best[2]:
                best = (basis, float(h), float(loss))
        if not stalled and ordering == orderings[0]:
            break
    return best


def _safe_loss(basis, h, partition, x, spec):
    try:
        return membership_loss(basis, float(h), partition, x, spec)
    except DenominatorUnderflow:
        return np.inf


def _safe_loss_grad(basis, h, partition, x, spec):
    try:
        loss, grad = _loss_and_gradient(basis, float(h), partition, x, spec)
        return loss, grad.ravel()
    except DenominatorUnderflow:
        return np.inf, np.zeros(basis.a_star.size)


def dimension_penalty(n: int, d: int, r: int) -> float:
    """Complexity penalty log(n) / (2 n^(2r / (2r + d)))."""
    return float(np.log(n) / (2.0 * n ** (2.0 * r / (2.0 * r + d))))


def select_dimension(partition: Partition, x: np.ndarray,
                     d_max: Optional[int] = None) -> MembershipFit:
    """Forward search over the structural dimension.

    A second-order kernel screens dimensions one and two; if the screen
    prefers two or more, the search is rerun with a fourth-order kernel up
    to min(p, 6) and that minimizer is kept.
    """
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    if d_max is None:
        d_max = min(p, 6)
    d_max = min(d_max, p, 6)

    def forward(spec: KernelSpec, upper: int):
        fits, scores = {}, {}
        prev = np.inf
        for d in range(1, upper + 1):
            basis, h, loss = fit_basis(partition, x, d, spec)
            score = 2.0 / n * loss + dimension_penalty(n, d, spec.order)
            fits[d] = (basis, h)
            scores[d] = score
            if score > prev:
                break
            prev = score
        d_hat = min(scores, key=scores.get)
        return d_hat, fits, scores

    spec2 = KernelSpec(2)
    d_hat, fits, scores = forward(spec2, min(2, d_max))
    spec_used = spec2
    if d_hat >= 2 and d_max >= 2:
        spec4 = KernelSpec(4)
        d_hat4, fits4, scores4 = forward(spec4, d_max)
        d_hat, fits, scores = d_hat4, fits4, scores4
        spec_used = spec4
    basis, h = fits[d_hat]
    return MembershipFit(basis, h, {d: float(s) for d, s in scores.items()},
                         d_hat, spec_used)


def bootstrap_basis_se(partition: Partition, x: np.ndarray, fit: MembershipFit,
                       n_boot: int = 200, seed: int = 0) -> np.ndarray:
    """Nonparametric bootstrap standard errors for the free chart block."""
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    draws = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, size=n)
        part_b = Partition(partition.assignment[idx], partition.k)
        if len(np.unique(part_b.assignment)) < partition.k:
            continue
        try:
            basis, _, _ = fit_basis(part_b, x[idx], fit.d_hat, fit.spec, init=fit.basis)
        except Exception:
            continue
        draws.append(basis.a_star.ravel())
    if len(draws) < 2:
        return np.full(fit.basis.a_star.size, np.nan)
    return np.std(np.array(draws), axis=0, ddof=1)
