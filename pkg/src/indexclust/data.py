"""Domain types: datasets, coefficient layouts, partitions, coefficient sets.

Cluster labels are 0-based throughout the library; reports render them
1-based. The augmented covariate row is ``z = (1, x)`` so coefficient
position 0 is the intercept and position ``j`` (j >= 1) multiplies
covariate column ``j - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "Pin",
    "CoefficientLayout",
    "ClusterCoefficients",
    "SubjectCoefficients",
    "Partition",
    "default_layout",
]


class Dataset:
    """Immutable sample of (response, covariate) pairs.

    Parameters
    ----------
    responses : (n,) array
    covariates : (n, p) array
    response_kind : {"continuous", "discrete"}
    continuous : (p,) bool array, optional
        Which covariate columns are continuous. Inferred (> 10 distinct
        values) when omitted.
    true_labels : (n,) int array, optional
        Generating cluster labels, carried only by simulated data.
    """

    def __init__(self, responses, covariates, response_kind="continuous",
                 continuous=None, true_labels=None):
        y = np.asarray(responses, dtype=float)
        x = np.asarray(covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError("responses and covariates must align on n")
        if y.shape[0] < 2:
            raise ValueError("need at least two observations")
        if not (np.isfinite(y).all() and np.isfinite(x).all()):
            raise ValueError("non-finite entries in the data")
        if response_kind not in ("continuous", "discrete"):
            raise ValueError(f"unknown response kind {response_kind!r}")
        self.responses = y
        self.covariates = x
        self.response_kind = response_kind
        if continuous is None:
            continuous = np.array([len(np.unique(x[:, j])) > 10 for j in range(x.shape[1])])
        self.continuous = np.asarray(continuous, dtype=bool)
        self.true_labels = None if true_labels is None else np.asarray(true_labels, dtype=int)
        y.setflags(write=False)
        x.setflags(write=False)

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @cached_property
    def augmented(self) -> np.ndarray:
        """z rows (1, x), shape (n, p + 1)."""
        z = np.column_stack([np.ones(self.n), self.covariates])
        z.setflags(write=False)
        return z

    @cached_property
    def response_order(self) -> np.ndarray:
        """Stable sort order of the responses."""
        return np.argsort(self.responses, kind="stable")

    @cached_property
    def response_counts(self) -> np.ndarray:
        """For each observation m, #{j : Y_j <= Y_m} (ties pooled)."""
        ys = self.responses[self.response_order]
        return np.searchsorted(ys, self.responses, side="right")

    @cached_property
    def response_counts_left(self) -> np.ndarray:
        """For each observation m, #{j : Y_j < Y_m}."""
        ys = self.responses[self.response_order]
        return np.searchsorted(ys, self.responses, side="left")

    @cached_property
    def leq_matrix(self) -> np.ndarray:
        """Indicator matrix 1{Y_i <= Y_m}, shape (n, n)."""
        a = (self.responses[:, None] <= self.responses[None, :]).astype(float)
        a.setflags(write=False)
        return a

    def drop(self, i: int) -> "Dataset":
        """Copy of the dataset with observation ``i`` removed."""
        keep = np.arange(self.n) != i
        labels = None if self.true_labels is None else self.true_labels[keep]
        return Dataset(self.responses[keep], self.covariates[keep],
                       self.response_kind, self.continuous, labels)


@dataclass(frozen=True)
class Pin:
    """A coefficient held fixed for identifiability.

    ``cluster is None`` pins the position for every cluster (the value is
    then also known in subjectwise parameterizations); an integer pins it
    for that cluster only.
    """

    cluster: Optional[int]
    position: int
    value: float


@dataclass(frozen=True)
class CoefficientLayout:
    """Which coefficient positions are cluster-specific, plus identifiability pins."""

    n_covariates: int
    specific: tuple
    pins: tuple

    def __post_init__(self):
        spec = tuple(sorted(set(self.specific)))
        object.__setattr__(self, "specific", spec)
        if not spec or any(s < 0 or s > self.n_covariates for s in spec):
            raise ValueError("specific positions must be a nonempty subset of 0..p")
        for pin in self.pins:
            if pin.position < 0 or pin.position > self.n_covariates:
                raise ValueError(f"pin position {pin.position} out of range")
            if pin.cluster is None and pin.position in spec and len(spec) < self.n_covariates + 1:
                # All-cluster pins on specific positions are allowed only in
                # the fully specific layout, where no invariant block exists.
                raise ValueError("all-cluster pin on a cluster-specific position")

    @property
    def q(self) -> int:
        return len(self.specific)

    @cached_property
    def invariant(self) -> tuple:
        return tuple(j for j in range(self.n_covariates + 1) if j not in self.specific)

    @cached_property
    def free_invariant(self) -> tuple:
        pinned = {p.position for p in self.pins if p.cluster is None}
        return tuple(j for j in self.invariant if j not in pinned)

    @cached_property
    def subject_free_specific(self) -> tuple:
        """Specific positions free in subjectwise parameterizations."""
        pinned = {p.position for p in self.pins if p.cluster is None}
        return tuple(j for j in self.specific if j not in pinned)

    def cluster_free_specific(self, cluster: int) -> tuple:
        """Specific positions free for one cluster's coefficient row."""
        pinned = {p.position for p in self.pins
                  if p.position in self.specific and p.cluster in (None, cluster)}
        return tuple(j for j in self.specific if j not in pinned)

    def apply_pins(self, values: np.ndarray) -> np.ndarray:
        out = np.array(values, dtype=float)
        k = out.shape[0]
        for pin in self.pins:
            if pin.cluster is None:
                out[:, pin.position] = pin.value
            elif pin.cluster < k:
                out[pin.cluster, pin.position] = pin.value
        # Invariant positions are shared; broadcast row 0.
        for j in self.invariant:
            out[:, j] = out[0, j]
        return out


def default_layout(n_covariates: int, specific: Sequence[int], continuous) -> CoefficientLayout:
    """Layout with the standard identifiability pins.

    Cluster 0's intercept is pinned to 0 when the intercept is
    cluster-specific (otherwise the shared intercept is pinned to 0), and
    the coefficient of the first continuous covariate is pinned to 1 —
    shared when that position is invariant, cluster 0 only when specific.
    Falls back to the first non-intercept position if no covariate is
    continuous.
    """
    specific = tuple(sorted(set(specific)))
    continuous = np.asarray(continuous, dtype=bool)
    pins = []
    if 0 in specific:
        pins.append(Pin(0, 0, 0.0))
    else:
        pins.append(Pin(None, 0, 0.0))
    scale_pos = next((j + 1 for j in range(n_covariates) if continuous[j]), 1)
    if scale_pos in specific:
        pins.append(Pin(0, scale_pos, 1.0))
    else:
        pins.append(Pin(None, scale_pos, 1.0))
    return CoefficientLayout(n_covariates, specific, tuple(pins))


@dataclass(frozen=True)
class Partition:
    """Assignment of the n observations to clusters 0..k-1."""

    assignment: np.ndarray
    k: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        if self.k < 1 or a.min(initial=0) < 0 or (a.size and a.max() >= self.k):
            raise ValueError("assignment entries must lie in 0..k-1")

    @property
    def n(self) -> int:
        return self.assignment.shape[0]

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def relabeled(self, perm: Sequence[int]) -> "Partition":
        """Partition with cluster ``perm[l]`` renamed to ``l``."""
        inverse = np.empty(self.k, dtype=int)
        inverse[np.asarray(perm, dtype=int)] = np.arange(self.k)
        return Partition(inverse[self.assignment], self.k)


@dataclass(frozen=True)
class ClusterCoefficients:
    """k rows of index coefficients sharing an invariant block."""

    layout: CoefficientLayout
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != self.layout.n_covariates + 1:
            raise ValueError("values must be k x (p+1)")
        v = self.layout.apply_pins(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def k(self) -> int:
        return self.values.shape[0]

    def index_values(self, z: np.ndarray, partition: Partition) -> np.ndarray:
        """Per-observation index gamma_{c(i)}' z_i."""
        return np.einsum("ij,ij->i", z, self.values[partition.assignment])

    def cluster_index(self, z: np.ndarray, cluster: int) -> np.ndarray:
        return z @ self.values[cluster]

    # -- free-parameter packing -------------------------------------------
    @cached_property
    def free_slots(self) -> list:
        """(cluster, position) pairs of the free parameters, specific blocks
        cluster by cluster, then the shared invariant block."""
        slots = []
        for ell in range(self.k):
            for j in self.layout.cluster_free_specific(ell):
                slots.append((ell, j))
        for j in self.layout.free_invariant:
            slots.append((None, j))
        return slots

    def pack(self) -> np.ndarray:
        return np.array([self.values[0 if c is None else c, j] for c, j in self.free_slots])

    def unpack(self, theta: np.ndarray) -> "ClusterCoefficients":
        v = np.array(self.values)
        for t, (c, j) in zip(theta, self.free_slots):
            if c is None:
                v[:, j] = t
            else:
                v[c, j] = t
        return ClusterCoefficients(self.layout, v)

    def relabeled(self, perm: Sequence[int]) -> "ClusterCoefficients":
        """Rows reordered so old row perm[l] becomes row l, re-anchored so
        the pins hold exactly (a global intercept shift, which leaves every
        index difference unchanged)."""
        v = np.array(self.values)[list(perm)]
        for pin in self.layout.pins:
            if pin.cluster is not None and pin.position == 0:
                v[:, 0] += pin.value - v[pin.cluster, 0]
        return ClusterCoefficients(self.layout, v)


@dataclass(frozen=True)
class SubjectCoefficients:
    """Per-observation coefficient rows sharing the invariant block."""

    layout: CoefficientLayout
    rows: np.ndarray

    def __post_init__(self):
        r = np.array(self.rows, dtype=float)
        if r.ndim != 2 or r.shape[1] != self.layout.n_covariates + 1:
            raise ValueError("rows must be n x (p+1)")
        for j in self.layout.invariant:
            r[:, j] = r[0, j]
        for pin in self.layout.pins:
            if pin.cluster is None:
                r[:, pin.position] = pin.value
        r.setflags(write=False)
        object.__setattr__(self, "rows", r)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def shared(self) -> np.ndarray:
        """The invariant coefficient block (identical across rows)."""
        return self.rows[0, list(self.layout.invariant)]

    def specific_block(self) -> np.ndarray:
        """Free specific coefficients, shape (n, q_free)."""
        return self.rows[:, list(self.layout.subject_free_specific)]

    def index_values(self, z: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ij->i", z, self.rows)

    @staticmethod
    def from_assignment(gamma: ClusterCoefficients, partition: Partition) -> "SubjectCoefficients":
        return SubjectCoefficients(gamma.layout, gamma.values[partition.assignment])

    def with_specific(self, block: np.ndarray) -> "SubjectCoefficients":
        r = np.array(self.rows)
        r[:, list(self.layout.subject_free_specific)] = block
        return SubjectCoefficients(self.layout, r)

    def with_invariant(self, free_values: np.ndarray) -> "SubjectCoefficients":
        r = np.array(self.rows)
        for j, val in zip(self.layout.free_invariant, free_values):
            r[:, j] = val
        return SubjectCoefficients(self.layout, r)
