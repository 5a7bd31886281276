"""Synthetic data generators, evaluation metrics, and the Monte Carlo harness.

Five generating models share one response mechanism: the conditional CDF is
``Phi((y - s(v + 5)) / sigma)`` in the cluster index ``v``, where ``s`` is
the signed 3/5-power (the signed extension keeps the transform continuous
and monotone when the shifted index goes negative). They differ in the
cluster-specific coefficient blocks, the noise scale, and the cluster count,
and each pairs with a covariate-independent or covariate-dependent
membership mechanism.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import norm

from .data import ClusterCoefficients, Dataset, Partition, default_layout

__all__ = [
    "SimModel",
    "SimTruth",
    "MODEL_IDS",
    "make_model",
    "generate",
    "rand_index",
    "coefficient_rse",
    "membership_rse",
    "align_clusters",
    "substream",
]

_ROOT5 = np.sqrt(5.0)
_GAMMA_INVARIANT = np.array([1.0, -1.0, 1.0, -1.0, 1.0]) / _ROOT5

# Frozen generating constants, one row per model:
# cluster-specific blocks (per cluster), noise scale, cluster count,
# independent-membership shares.
_SPECIFIC = {
    "M1": ([0.0], [2.5]),
    "M2": ([0.0], [1.5]),
    "M3": ([0.0], [2.5]),
    "M4": ([0.0], [2.5], [5.0]),
    "M5": ([0.0, 0.1, 0.1], [1.5, 0.3, 1.0]),
}
_SIGMA = {"M1": 0.1, "M2": 0.1, "M3": 0.15, "M4": 0.125, "M5": 0.1}
_SHARES = {
    "M1": (0.7, 0.3), "M2": (0.7, 0.3), "M3": (0.7, 0.3),
    "M4": (1 / 3, 1 / 3, 1 / 3), "M5": (0.5, 0.5),
}
_ALPHA_SINGLE = np.array([1.0, 0.0, 0.0, 0.0, 0.29])
_ALPHA_TRIPLE = np.array([0.0, -0.12, 0.12, -0.12, 0.12, -0.12])
_ALPHA_TREAT = np.array([0.0, 0.1, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0])

MODEL_IDS = tuple(_SPECIFIC)


@dataclass(frozen=True)
class SimModel:
    """One generating configuration: a model id plus membership mechanism."""

    id: str
    membership: str = "independent"

    def __post_init__(self):
        if self.id not in _SPECIFIC:
            raise ValueError(f"unknown model {self.id!r}")
        if self.membership not in ("independent", "dependent"):
            raise ValueError(f"unknown membership mechanism {self.membership!r}")

    @property
    def k_true(self) -> int:
        return len(_SPECIFIC[self.id])

    @property
    def sigma(self) -> float:
        return _SIGMA[self.id]

    @property
    def n_covariates(self) -> int:
        return 7 if self.id == "M5" else 5

    @property
    def specific_positions(self) -> tuple:
        return (0, 1, 2) if self.id == "M5" else (0,)

    def gamma_original(self) -> np.ndarray:
        """Generating coefficient rows (k, p + 1), original scale."""
        k = self.k_true
        p = self.n_covariates
        rows = np.zeros((k, p + 1))
        for ell, block in enumerate(_SPECIFIC[self.id]):
            rows[ell, list(self.specific_positions)] = block
        inv = [j for j in range(p + 1) if j not in self.specific_positions]
        rows[:, inv] = _GAMMA_INVARIANT
        return rows

    def gamma_normalized(self) -> np.ndarray:
        """Generating rows mapped to the estimation normalization (cluster 0
        intercept 0, first continuous covariate coefficient 1): a global
        rescale of the index, absorbed by the unknown CDF."""
        return self.gamma_original() * _ROOT5

    def membership_probs(self, x: np.ndarray) -> np.ndarray:
        """True pi(l | x) rows for covariate rows x, shape (n, k)."""
        n = x.shape[0]
        k = self.k_true
        if self.membership == "independent":
            return np.tile(_SHARES[self.id], (n, 1))
        if self.id in ("M1", "M2", "M3"):
            t = norm.pdf(2.8 * (x @ _ALPHA_SINGLE))
            p1 = 0.25 + 2.5 * t / (1.0 + t)
            return np.column_stack([p1, 1.0 - p1])
        z = np.column_stack([np.ones(n), x])
        if self.id == "M4":
            e1 = np.exp(z @ _ALPHA_TRIPLE)
            e2 = np.exp(z @ (_ALPHA_TRIPLE / 2.0))
            denom = 1.0 + e1 + e2
            return np.column_stack([e1 / denom, e2 / denom, 1.0 / denom])
        e1 = np.exp(z @ _ALPHA_TREAT)
        p1 = e1 / (1.0 + e1)
        return np.column_stack([p1, 1.0 - p1])


@dataclass(frozen=True)
class SimTruth:
    """Everything the metrics need about a generated sample."""

    model: SimModel
    labels: np.ndarray
    gamma_original: np.ndarray
    gamma_normalized: np.ndarray
    membership: np.ndarray          # true pi(l | x_i) rows


def make_model(model_id: str, membership: str = "independent") -> SimModel:
    return SimModel(model_id, membership)


def substream(seed: int, model: SimModel, n: int, replication: int = 0) -> np.random.Generator:
    """Counter-based generator on a per-replication substream, so
    replications are reproducible independently of execution order."""
    mem_code = 0 if model.membership == "independent" else 1
    key = np.random.SeedSequence(
        (int(seed), MODEL_IDS.index(model.id), mem_code, int(n), int(replication)))
    return np.random.Generator(np.random.Philox(key))


def _signed_power(t: np.ndarray, exponent: float) -> np.ndarray:
    return np.sign(t) * np.abs(t) ** exponent


def generate(model: SimModel, n: int, seed, replication: int = 0):
    """Draw a sample of size n; returns ``(Dataset, SimTruth)``.

    ``seed`` may be an integer (a substream is derived) or a Generator.
    """
    if n < 20:
        raise ValueError("simulation samples need n >= 20")
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, model, n, replication)
    cov4 = 0.8 * np.eye(4) + 0.2 * np.ones((4, 4))
    x_norm = rng.multivariate_normal(np.zeros(4), cov4, size=n, method="cholesky")
    x_bin = rng.choice([-0.5, 0.5], size=n)
    base = np.column_stack([x_norm, x_bin])
    continuous = [True] * 4 + [False]
    if model.id == "M5":
        arm = rng.integers(0, 3, size=n)
        t1 = (arm == 1).astype(float)
        t2 = (arm == 2).astype(float)
        x = np.column_stack([t1, t2, base])
        continuous = [False, False] + continuous
    else:
        x = base
    probs = model.membership_probs(x)
    u = rng.random(n)
    labels = (u[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1)
    gamma = model.gamma_original()
    z = np.column_stack([np.ones(n), x])
    v = np.einsum("ij,ij->i", z, gamma[labels])
    y = _signed_power(v + 5.0, 3.0 / 5.0) + model.sigma * rng.standard_normal(n)
    data = Dataset(y, x, "continuous", continuous, true_labels=labels)
    truth = SimTruth(model, labels, gamma, model.gamma_normalized(), probs)
    return data, truth


def true_layout(model: SimModel):
    """The coefficient layout the estimators use for this model."""
    continuous = [True] * 4 + [False]
    if model.id == "M5":
        continuous = [False, False] + continuous
    return default_layout(model.n_covariates, model.specific_positions, continuous)


# -- metrics -----------------------------------------------------------------

def rand_index(a: Partition, b: Partition) -> float:
    """Fraction of observation pairs on which two partitions agree."""
    if a.n != b.n:
        raise ValueError("partitions must cover the same observations")
    n = a.n
    if n < 2:
        raise ValueError("Rand index needs at least two observations")
    table = np.zeros((a.k, b.k))
    np.add.at(table, (a.assignment, b.assignment), 1.0)
    same_both = (table * (table - 1) / 2).sum()
    a_sizes = table.sum(axis=1)
    b_sizes = table.sum(axis=0)
    same_a = (a_sizes * (a_sizes - 1) / 2).sum()
    same_b = (b_sizes * (b_sizes - 1) / 2).sum()
    total = n * (n - 1) / 2
    return float((total + 2 * same_both - same_a - same_b) / total)


def coefficient_rse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Root squared error per component, sqrt(||e - t||^2 / len(t))."""
    estimate = np.asarray(estimate, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if estimate.shape != truth.shape:
        raise ValueError("estimate and truth differ in length")
    return float(np.sqrt(np.sum((estimate - truth) ** 2) / truth.size))


def membership_rse(pi_hat: np.ndarray, pi_true: np.ndarray) -> float:
    """Root of the summed squared membership error over the first k - 1
    clusters, averaged over the sample."""
    pi_hat = np.asarray(pi_hat, dtype=float)
    pi_true = np.asarray(pi_true, dtype=float)
    k = pi_true.shape[1]
    diff = pi_hat[:, :k - 1] - pi_true[:, :k - 1]
    return float(np.sqrt(np.sum(diff * diff) / pi_true.shape[0]))


def align_clusters(est_gamma: np.ndarray, true_gamma: np.ndarray,
                   specific_positions: Sequence[int]) -> tuple:
    """Permutation ``perm`` minimizing the total squared distance between
    cluster-specific blocks, such that estimated cluster ``perm[l]``
    corresponds to true cluster ``l``."""
    cols = list(specific_positions)
    k = true_gamma.shape[0]
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(k)):
        cost = sum(float(np.sum((est_gamma[perm[l], cols] - true_gamma[l, cols]) ** 2))
                   for l in range(k))
        if cost < best_cost:
            best, best_cost = perm, cost
    return best


# -- Monte Carlo harness ------------------------------------------------------

METHODS = ("init", "heuristic", "penalized", "refined")

_CRITERIA = ("squared", "loglik")


@dataclass(frozen=True)
class MetricReport:
    """Aggregate metrics for one (model, membership, n, method) cell."""

    model: str
    membership: str
    n: int
    method: str
    replications: int
    seed: int
    failures: int
    ri_mean: float
    ri_sd: float
    beta_rse_mean: float
    gamma_rse_mean: float
    oracle_gamma_rse_mean: float
    membership_rse_mean: Optional[float] = None
    oracle_membership_rse_mean: Optional[float] = None
    k_selected_mean: Optional[dict] = None

    def __post_init__(self):
        checks = [("ri_mean", 0.0, 1.0)]
        for name, lo, hi in checks:
            v = getattr(self, name)
            if np.isfinite(v) and not (lo <= v <= hi + 1e-12):
                raise ValueError(f"{name}={v} out of range")


def _method_metrics(gamma_values, partition, truth: SimTruth, data) -> dict:
    """Label-aligned coefficient and clustering metrics, original scale."""
    model = truth.model
    # The normalized truth is a scalar multiple of the generating rows;
    # metrics are reported on the generating (original) scale.
    scale = float(np.linalg.norm(truth.gamma_normalized)
                  / np.linalg.norm(truth.gamma_original))
    perm = align_clusters(gamma_values, truth.gamma_normalized, model.specific_positions)
    est = gamma_values[list(perm)]
    gamma_rse = coefficient_rse(est.ravel() / scale, truth.gamma_original.ravel())
    beta_rows = gamma_values[partition.assignment] / scale
    true_rows = truth.gamma_original[truth.labels]
    beta_rse = coefficient_rse(beta_rows.ravel(), true_rows.ravel())
    ri = rand_index(partition, Partition(truth.labels, model.k_true))
    return {"ri": ri, "gamma_rse": gamma_rse, "beta_rse": beta_rse, "perm": perm}


def _sub_seed(seed, model, n, rep, tag):
    ss = np.random.SeedSequence((int(seed), MODEL_IDS.index(model.id),
                                 0 if model.membership == "independent" else 1,
                                 int(n), int(rep), tag))
    return int(ss.generate_state(1)[0] % (2 ** 31))


def run_replication(model: SimModel, n: int, seed: int, rep: int,
                    select: bool = False, k_range=(1, 4)) -> dict:
    """One full replication: data, all four method stages, oracle fits, and
    (optionally) cluster-count selection per criterion. Failures are
    captured per stage, not raised."""
    from .admm import fit_penalized
    from .data import Partition as _Partition
    from .initialize import (InitCandidate, feasible_start, gamma_for_partition,
                             initial_partition, refine_candidate, residual_features)
    from .membership import select_dimension
    from .objective import (cdf_loss, fit_coefficients, fit_single_index,
                            select_smoothing_bandwidth)
    from .pipeline import ic_loglik, ic_squared, refine_fit
    from .smoothers import membership_matrix
    from .data import SubjectCoefficients

    record = {"model": model.id, "membership": model.membership, "n": n,
              "rep": rep, "methods": {}, "oracle": {}, "selected": {},
              "error": None}
    try:
        data, truth = generate(model, n, seed, rep)
        layout = true_layout(model)
        si = fit_single_index(data, layout)
        features = residual_features(data, si)
        k = model.k_true
        km_seed = _sub_seed(seed, model, n, rep, 7)

        def build_stage(kk):
            part = initial_partition(features, kk, seed=km_seed)
            g0, h_fit = feasible_start(gamma_for_partition(part, data, si),
                                       part, data, si.h_hat)
            g_rc = fit_coefficients(part, data, g0, h_fit, intercept_cap=h_fit)
            rc = InitCandidate(kk, part, g_rc,
                               SubjectCoefficients.from_assignment(g_rc, part),
                               cdf_loss(g_rc, h_fit, part, data), h_fit)
            hs = refine_candidate(rc, data, si.h_hat, si.h_tilde)
            h_stage = max(si.h_hat, hs.h_fit or si.h_hat)
            sp = fit_penalized(data, kk, [hs], h_stage)
            rsp = refine_fit(sp.partition, sp.gamma, data, si, h_hat=h_stage)
            return rc, hs, sp, rsp

        rc, hs, sp, rsp = build_stage(k)
        record["methods"]["init"] = _method_metrics(rc.gamma.values, rc.partition, truth, data)
        record["methods"]["heuristic"] = _method_metrics(hs.gamma.values, hs.partition, truth, data)
        record["methods"]["penalized"] = _method_metrics(sp.gamma.values, sp.partition, truth, data)
        refined = _method_metrics(rsp.gamma.values, rsp.partition, truth, data)
        pi = membership_matrix(rsp.sdr.basis.project(data.covariates),
                               rsp.partition, rsp.sdr.h_tilde_d, rsp.sdr.spec,
                               loo=False, mask_underflow=True)[0]
        refined["membership_rse"] = membership_rse(pi[:, list(refined["perm"])],
                                                   truth.membership)
        refined["d_hat"] = rsp.sdr.d_hat
        refined["converged"] = rsp.converged
        record["methods"]["refined"] = refined

        # Oracle: coefficient fit and membership model on the true partition.
        tp = _Partition(truth.labels, k)
        g0, h_oracle = feasible_start(gamma_for_partition(tp, data, si), tp, data, si.h_hat)
        oracle_gamma = fit_coefficients(tp, data, g0, h_oracle, intercept_cap=h_oracle)
        oracle = _method_metrics(oracle_gamma.values, tp, truth, data)
        sdr_o = select_dimension(tp, data.covariates)
        pi_o = membership_matrix(sdr_o.basis.project(data.covariates), tp,
                                 sdr_o.h_tilde_d, sdr_o.spec,
                                 loo=False, mask_underflow=True)[0]
        oracle["membership_rse"] = membership_rse(pi_o[:, list(oracle["perm"])],
                                                  truth.membership)
        record["oracle"] = oracle

        if select:
            k_lo, k_hi = k_range
            values = {m: {c: {} for c in _CRITERIA} for m in METHODS}
            for kk in range(k_lo, k_hi + 1):
                if kk == 1:
                    triv = _Partition(np.zeros(n, dtype=int), 1)
                    h1, _ = select_smoothing_bandwidth(si.gamma, triv, data)
                    for meth in METHODS:
                        values[meth]["squared"][1] = ic_squared(si.gamma, triv, data, h1)
                        values[meth]["loglik"][1] = ic_loglik(si.gamma, triv, data, h1)
                    continue
                if kk == k:
                    stage = {"init": rc, "heuristic": hs, "penalized": sp, "refined": rsp}
                else:
                    try:
                        rc_k, hs_k, sp_k, rsp_k = build_stage(kk)
                    except Exception:
                        continue
                    stage = {"init": rc_k, "heuristic": hs_k,
                             "penalized": sp_k, "refined": rsp_k}
                for meth in METHODS:
                    obj = stage[meth]
                    if meth == "refined":
                        values[meth]["squared"][kk] = obj.ic_squared
                        values[meth]["loglik"][kk] = obj.ic_loglik
                    else:
                        ht, _ = select_smoothing_bandwidth(obj.gamma, obj.partition, data)
                        values[meth]["squared"][kk] = ic_squared(obj.gamma, obj.partition, data, ht)
                        values[meth]["loglik"][kk] = ic_loglik(obj.gamma, obj.partition, data, ht)
            record["selected"] = {
                meth: {crit: min(vals, key=vals.get) if vals else None
                       for crit, vals in by_crit.items()}
                for meth, by_crit in values.items()}
    except Exception as exc:            # noqa: BLE001 - replication isolation
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


def _limit_threads():
    import os
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = "1"


def _replication_worker(args):
    return run_replication(*args)


def monte_carlo(model: SimModel, n_list, replications: int,
                methods=METHODS, seed: int = 0, select: bool = False,
                k_range=(1, 4), processes: Optional[int] = None):
    """Replicated runs aggregated per (n, method).

    Returns ``(reports, records)``: per-cell summaries plus the raw
    per-replication records. Replications run on independent substreams,
    so parallel execution is bitwise-reproducible; aggregation reduces in
    fixed replication order.
    """
    records = []
    for n in n_list:
        args = [(model, n, seed, rep, select, k_range) for rep in range(replications)]
        if processes and processes > 1:
            import multiprocessing as mp
            with mp.Pool(processes, initializer=_limit_threads) as pool:
                got = pool.map(_replication_worker, args)
        else:
            got = [_replication_worker(a) for a in args]
        records.extend(sorted(got, key=lambda r: r["rep"]))
    reports = []
    for n in n_list:
        cell = [r for r in records if r["n"] == n]
        ok = [r for r in cell if r["error"] is None]
        failures = len(cell) - len(ok)
        for method in methods:
            if not ok:
                continue
            ri = np.array([r["methods"][method]["ri"] for r in ok])
            beta = np.array([r["methods"][method]["beta_rse"] for r in ok])
            gam = np.array([r["methods"][method]["gamma_rse"] for r in ok])
            o_gam = np.array([r["oracle"]["gamma_rse"] for r in ok])
            mem = o_mem = None
            if method == "refined":
                mem = float(np.mean([r["methods"][method]["membership_rse"] for r in ok]))
                o_mem = float(np.mean([r["oracle"]["membership_rse"] for r in ok]))
            k_sel = None
            if select:
                k_sel = {}
                for crit in _CRITERIA:
                    picks = [r["selected"][method][crit] for r in ok
                             if r["selected"].get(method, {}).get(crit) is not None]
                    k_sel[crit] = float(np.mean(picks)) if picks else None
            reports.append(MetricReport(
                model=model.id, membership=model.membership, n=n, method=method,
                replications=replications, seed=seed, failures=failures,
                ri_mean=float(ri.mean()), ri_sd=float(ri.std(ddof=1)) if ri.size > 1 else 0.0,
                beta_rse_mean=float(beta.mean()), gamma_rse_mean=float(gam.mean()),
                oracle_gamma_rse_mean=float(o_gam.mean()),
                membership_rse_mean=mem, oracle_membership_rse_mean=o_mem,
                k_selected_mean=k_sel))
    return reports, records
