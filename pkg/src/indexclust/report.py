"""Report artifacts: delimited plot data plus rendered figures.

Every figure has a plain columnar twin so the numbers behind each plot can
be consumed by external tooling; rendering uses the Agg backend and writes
PNG files next to the CSVs.
"""

from __future__ import annotations

import csv
import os
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import Dataset
from .pipeline import FitResult
from .smoothers import K2, membership_matrix, nw_mean, scaled_kernel

__all__ = ["write_report"]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _mean_curves(fit: FitResult, data: Dataset, points: int = 120):
    """Fitted conditional-mean grid per cluster over its index range,
    extended by one smoothing bandwidth on each side."""
    z = data.augmented
    idx_all = fit.gamma.index_values(z, fit.partition)
    h = fit.h_tilde
    curves = []
    for ell in range(fit.k):
        u = fit.gamma.cluster_index(z, ell)
        lo, hi = u.min() - h, u.max() + h
        grid = np.linspace(lo, hi, points)
        for v in grid:
            w = scaled_kernel(K2, h, 0, idx_all - v)
            denom = float(w.sum())
            if denom <= 0:
                continue
            curves.append((ell, float(v), float((w * data.responses).sum() / denom)))
    return curves


def _density_grid(fit: FitResult, data: Dataset, ny: int = 60, nv: int = 40):
    """(cluster, y, v, density) long grid for the conditional density."""
    if data.response_kind != "continuous":
        return []
    z = data.augmented
    y = data.responses
    h1, h2 = fit.h1, fit.h2
    ys = np.linspace(y.min() - h1, y.max() + h1, ny)
    idx_all = fit.gamma.index_values(z, fit.partition)
    rows = []
    for ell in range(fit.k):
        u = fit.gamma.cluster_index(z, ell)
        vs = np.linspace(u.min(), u.max(), nv)
        for v in vs:
            w = scaled_kernel(K2, h2, 0, idx_all - v)
            denom = float(w.sum())
            if denom <= 0:
                continue
            p = w / denom
            for yq in ys:
                ky = scaled_kernel(K2, h1, 0, y - yq)
                rows.append((ell, float(yq), float(v), float((ky * p).sum())))
    return rows


def _membership_points(fit: FitResult, data: Dataset):
    """Per-observation projected covariates and membership log-odds."""
    if fit.sdr is None:
        return [], 0
    proj = fit.sdr.basis.project(data.covariates)
    pi, bad = membership_matrix(proj, fit.partition, fit.h_tilde_d, fit.sdr.spec,
                                loo=False, mask_underflow=True)
    eps = 1e-12
    pi = np.clip(pi, eps, 1.0)
    rows = []
    d = proj.shape[1]
    for i in range(data.n):
        if bad[i]:
            continue
        logodds = [float(np.log(pi[i, l] / pi[i, -1])) for l in range(fit.k - 1)]
        rows.append([i] + [float(x) for x in proj[i]] + logodds)
    return rows, d


def write_report(fit: FitResult, data: Dataset, outdir: str) -> list:
    """Write the plot-data CSVs and their rendered figures; returns the
    created file names."""
    os.makedirs(outdir, exist_ok=True)
    created = []

    curves = _mean_curves(fit, data)
    path = os.path.join(outdir, "mean_curve.csv")
    _write_csv(path, ["cluster", "index_value", "fitted_mean"], curves)
    created.append("mean_curve.csv")

    fig, ax = plt.subplots(figsize=(7, 5))
    idx = fit.gamma.index_values(data.augmented, fit.partition)
    for ell in range(fit.k):
        members = fit.partition.members(ell)
        ax.scatter(idx[members], data.responses[members], s=12, alpha=0.5,
                   label=f"cluster {ell + 1}")
        pts = np.array([(v, m) for c, v, m in curves if c == ell])
        if pts.size:
            ax.plot(pts[:, 0], pts[:, 1], lw=1.8)
    ax.set_xlabel("cluster index")
    ax.set_ylabel("response")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "mean_curve.png"), dpi=130)
    plt.close(fig)
    created.append("mean_curve.png")

    dens = _density_grid(fit, data)
    if dens:
        path = os.path.join(outdir, "density.csv")
        _write_csv(path, ["cluster", "y", "index_value", "density"], dens)
        created.append("density.csv")
        arr = np.array(dens)
        fig, axes = plt.subplots(1, fit.k, figsize=(5 * fit.k, 4), squeeze=False)
        for ell in range(fit.k):
            sub = arr[arr[:, 0] == ell]
            ax = axes[0][ell]
            if sub.size:
                ax.tricontourf(sub[:, 2], sub[:, 1], sub[:, 3], levels=14)
            ax.set_title(f"cluster {ell + 1}")
            ax.set_xlabel("cluster index")
            ax.set_ylabel("y")
        fig.tight_layout()
        fig.savefig(os.path.join(outdir, "density.png"), dpi=130)
        plt.close(fig)
        created.append("density.png")

    points, d = _membership_points(fit, data)
    if points:
        header = ["observation"] + [f"projection_{t + 1}" for t in range(d)] \
            + [f"logodds_{l + 1}" for l in range(fit.k - 1)]
        path = os.path.join(outdir, "membership_logodds.csv")
        _write_csv(path, header, points)
        created.append("membership_logodds.csv")
        arr = np.array([row[1:] for row in points])
        fig, ax = plt.subplots(figsize=(7, 5))
        for l in range(fit.k - 1):
            ax.scatter(arr[:, 0], arr[:, d + l], s=12, alpha=0.6,
                       label=f"log-odds cluster {l + 1}")
        ax.set_xlabel("first projected covariate")
        ax.set_ylabel("membership log-odds")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(os.path.join(outdir, "membership_logodds.png"), dpi=130)
        plt.close(fig)
        created.append("membership_logodds.png")
    return created
