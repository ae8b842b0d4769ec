"""Accuracy metrics, cluster extraction, GIC and lambda-grid tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.hierarchy import DisjointSet

from .fusion import FusionLayout, pairwise_zero_mask
from .model import CoefficientStack, DimensionError, GroupStructure, NumericalError, RunConfig

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    mse_est: float = float("nan")
    mse_pred: float = float("nan")
    ri: float = float("nan")
    per_variable_K: list = field(default_factory=list)
    gic: float = float("nan")

    def as_dict(self):
        d = dict(self.__dict__)
        d["total_K"] = int(sum(self.per_variable_K)) if self.per_variable_K else 0
        d.pop("per_variable_K")
        return d


def _blocks(theta, M=None):
    if isinstance(theta, CoefficientStack):
        return theta.blocks
    arr = np.asarray(theta, dtype=float)
    if arr.ndim == 3:
        return arr
    if M is None:
        raise DimensionError("need M to split a 2-D coefficient array")
    return arr.reshape(M, -1, arr.shape[1])


def mse_est(theta_hat, theta_star):
    a, b = _blocks(theta_hat), _blocks(theta_star)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    M, p, q = a.shape
    return float(np.sum((a - b) ** 2) / (M * p * q))


def mse_pred(theta_hat, theta_star, data):
    """``(1/M) sum_m ||X_m (Theta_hat_m - Theta*_m)||^2 / q`` on the scaled designs."""
    a, b = _blocks(theta_hat, len(data)), _blocks(theta_star, len(data))
    if a.shape != b.shape or a.shape[0] != len(data):
        raise DimensionError("shape mismatch")
    q = a.shape[2]
    tot = 0.0
    for d, x, y in zip(data, a, b):
        R = d.X @ (x - y)
        tot += float(np.vdot(R, R)) / q
    return tot / len(data)


def extract_clusters(theta_hat, tol=None) -> GroupStructure:
    """Connected components of ``||Theta_m(j) - Theta_m'(j)|| <= tol`` per variable j.

    Default ``tol = 1e-4 * sqrt(q)``. Group values are the component means.
    """
    B = _blocks(theta_hat)
    M, p, q = B.shape
    tol = 1e-4 * math.sqrt(q) if tol is None else tol
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    i, l = np.triu_indices(M, 1)
    labels = np.empty((p, M), dtype=int)
    values = []
    for j in range(p):
        rows = B[:, j, :]
        close = np.linalg.norm(rows[i] - rows[l], axis=1) <= tol
        labels[j] = _components(M, i[close], l[close])
    gs = GroupStructure(labels)
    for j in range(p):
        values.append(np.stack([B[g, j, :].mean(axis=0) for g in gs.groups(j)]))
    try:
        return GroupStructure(gs.labels, values)
    except ValueError:
        # identical means for distinct components; keep labels only
        return gs


def _components(M, a, b):
    ds = DisjointSet(range(M))
    for x, y in zip(a, b):
        ds.merge(int(x), int(y))
    root = {}
    return np.array([root.setdefault(ds[m], len(root)) for m in range(M)])


def extract_clusters_from_P(P, layout: FusionLayout, tol=0.0) -> GroupStructure:
    """Clusters from zero fusion rows of P (diagnostic mode)."""
    zero = pairwise_zero_mask(layout, P, tol)
    pairs = layout.pairs
    labels = np.empty((layout.p, layout.M), dtype=int)
    for j in range(layout.p):
        sel = zero[:, j]
        labels[j] = _components(layout.M, pairs[sel, 0], pairs[sel, 1])
    return GroupStructure(labels)


def rand_index(est: GroupStructure, truth: GroupStructure) -> float:
    """Fraction of (variable, client pair) decisions on which the partitions agree."""
    if est.labels.shape != truth.labels.shape:
        raise DimensionError(f"{est.labels.shape} vs {truth.labels.shape}")
    p, M = est.labels.shape
    if M < 2:
        return 1.0
    i, l = np.triu_indices(M, 1)
    same_est = est.labels[:, i] == est.labels[:, l]
    same_true = truth.labels[:, i] == truth.labels[:, l]
    return float(np.mean(same_est == same_true))


def sse(theta_hat, data):
    """``(1/M) sum_m (1/n_m) sum_i ||y_mi - Theta_m^T x_mi||^2``."""
    B = _blocks(theta_hat, len(data))
    return sum(float(np.sum((d.Y - d.X @ b) ** 2)) for d, b in zip(data, B)) / len(data)


def gic_value(sse_value, N, p, q, total_K):
    """``log(SSE) + loglog(Nq) log(pq) / N * sum K_j`` (natural logs)."""
    if sse_value <= 0:
        return -math.inf
    return math.log(sse_value) + math.log(math.log(N * q)) * math.log(p * q) / N * total_K


def gic(theta_hat, data, K):
    """GIC of a fit; ``K`` is the per-variable cluster count list (or its sum)."""
    B = _blocks(theta_hat, len(data))
    _, p, q = B.shape
    N = sum(d.n_raw for d in data)
    total = int(np.sum(K))
    return gic_value(sse(B, data), N, p, q, total)


def evaluate(theta_hat, data, truth=None, tol=None):
    """MetricsReport of a fit; truth-dependent fields stay NaN without ``truth``."""
    est = extract_clusters(theta_hat, tol)
    K = est.counts().tolist()
    rep = MetricsReport(per_variable_K=K, gic=gic(theta_hat, data, K))
    if truth is not None:
        rep.mse_est = mse_est(theta_hat, truth.theta_star)
        rep.mse_pred = mse_pred(theta_hat, truth.theta_star, data)
        rep.ri = rand_index(est, truth.groups)
    return rep


@dataclass
class GridResult:
    best: tuple
    table: list  # [(lambda1, lambda2, MetricsReport), ...]
    theta: CoefficientStack
    reports: list


def grid_search(data, lambda1_grid, lambda2_grid, config: RunConfig, truth=None, warm_start=True, tol=None, fit=None):
    """Fit every (lambda1, lambda2) pair and keep the smallest GIC.

    Points are visited with lambda2 in the outer loop; with ``warm_start`` each
    fit starts from the previous solution. Ties go to the larger pair.
    """
    from .engine import run_admm_centralized

    if len(lambda1_grid) == 0 or len(lambda2_grid) == 0:
        raise ValueError("lambda grids must be nonempty")
    fit = run_admm_centralized if fit is None else fit
    table = []
    best = None
    prev = None
    for l2 in sorted(lambda2_grid):
        for l1 in sorted(lambda1_grid):
            cfg = replace(config, lambda1=float(l1), lambda2=float(l2))
            try:
                theta, reports = fit(data, cfg, theta0=prev.blocks if (warm_start and prev is not None) else None)
            except NumericalError as exc:
                log.warning("fit diverged at (%g, %g): %s", l1, l2, exc)
                continue
            rep = evaluate(theta, data, truth, tol)
            table.append((float(l1), float(l2), rep))
            key = (rep.gic, -l1, -l2)
            if best is None or key < best[0]:
                best = (key, (float(l1), float(l2)), theta, reports)
            prev = theta
    if best is None:
        raise NumericalError("every grid point diverged")
    return GridResult(best[1], table, best[2], best[3])
