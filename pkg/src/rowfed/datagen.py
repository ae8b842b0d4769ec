"""Synthetic two-cluster scenarios and delimited-table ingestion."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import ClientDataset, CoefficientStack, GroupStructure

log = logging.getLogger(__name__)

MISSING_TOKENS = {"", "?", "NA", "NaN", "nan"}


class IngestionError(IOError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    M: int = 10
    n: int = 100
    p: int = 50
    q: int = 20
    seed: int = 0
    sigma_x: float = 0.5
    sigma_e: float = 0.5
    noise_scale: float = 1.0
    signal_fraction: float = 0.2

    def __post_init__(self):
        if min(self.M, self.n, self.p, self.q) < 1:
            raise ValueError("M, n, p, q must be positive")
        if self.s < 1:
            raise ValueError("signal length s = round(0.2 q) must be at least 1")
        if not (abs(self.sigma_x) < 1 and abs(self.sigma_e) < 1):
            raise ValueError("AR(1) parameters must lie in (-1, 1)")

    @property
    def s(self):
        # round half up so q=5 gives s=1 and q=20 gives s=4
        return int(math.floor(self.signal_fraction * self.q + 0.5))


@dataclass
class TrueModel:
    theta_star: CoefficientStack
    groups: GroupStructure
    v_star: np.ndarray
    u_star: np.ndarray
    assignment: np.ndarray  # (M, p), 0 -> v*_j, 1 -> u*_j


def ar1_covariance(dim, rho):
    """``Sigma[i, j] = rho^|i-j|``."""
    if not abs(rho) < 1:
        raise ValueError("AR(1) parameter must satisfy |rho| < 1")
    idx = np.arange(dim)
    return float(rho) ** np.abs(idx[:, None] - idx[None, :])


def _signal(rng, p, q, s):
    v = np.zeros((p, q))
    u = np.zeros((p, q))
    # S_v = [-1, -0.5] U [0.5, 1], S_u = {-1, 1}
    v[:, :s] = rng.uniform(0.5, 1.0, size=(p, s)) * rng.choice([-1.0, 1.0], size=(p, s))
    u[:, q - s :] = rng.choice([-1.0, 1.0], size=(p, s))
    return v, u


def truth_from_assignment(v, u, assignment):
    M, p = assignment.shape
    theta = np.where(assignment[:, :, None] == 0, v[None], u[None])
    labels = assignment.T
    values = []
    for j in range(p):
        # canonical order: group of client 0 first
        first = assignment[0, j]
        vals = [v[j], u[j]] if first == 0 else [u[j], v[j]]
        values.append(np.array(vals[: len(set(assignment[:, j]))]))
    return CoefficientStack(theta), GroupStructure(labels, values)


def gen_scenario(spec: ScenarioSpec, true_model: TrueModel | None = None):
    """Datasets (pre-scaled by ``1/sqrt(n)``) and the generating model."""
    rng = np.random.default_rng(spec.seed)
    M, n, p, q, s = spec.M, spec.n, spec.p, spec.q, spec.s
    if true_model is None:
        v, u = _signal(rng, p, q, s)
        assignment = rng.integers(0, 2, size=(M, p))
        theta, groups = truth_from_assignment(v, u, assignment)
        true_model = TrueModel(theta, groups, v, u, assignment)
    Lx = np.linalg.cholesky(ar1_covariance(p, spec.sigma_x))
    Le = np.linalg.cholesky(ar1_covariance(q, spec.sigma_e))
    blocks = true_model.theta_star.blocks
    data = []
    for m in range(M):
        X = rng.standard_normal((n, p)) @ Lx.T
        E = rng.standard_normal((n, q)) @ Le.T
        Y = X @ blocks[m] + spec.noise_scale * E
        data.append(ClientDataset.from_raw(m, X, Y))
    return data, true_model


def _parse(cell):
    cell = cell.strip()
    if cell in MISSING_TOKENS:
        return np.nan
    return float(cell)


def read_table(path, delimiter=","):
    """Header and rows of a delimited text file (cells kept as strings)."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh, delimiter=delimiter)
            header = next(reader)
            rows = [r for r in reader if r]
    except (OSError, StopIteration, csv.Error) as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    return [h.strip() for h in header], rows


def minmax_scale(A):
    """Column-wise min-max scaling to [0, 1], ignoring NaNs; constant columns map to 0."""
    lo = np.nanmin(A, axis=0)
    hi = np.nanmax(A, axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (A - lo) / span


def knn_impute(A, k):
    """Fill NaNs with the mean of the k nearest complete rows.

    Distance is Euclidean over the coordinates observed in the incomplete row.
    """
    A = np.array(A, dtype=float)
    miss = np.isnan(A)
    complete = ~miss.any(axis=1)
    donors = A[complete]
    if donors.shape[0] == 0:
        raise IngestionError("k-NN imputation needs at least one complete row")
    kk = min(k, donors.shape[0])
    for i in np.flatnonzero(~complete):
        obs = ~miss[i]
        d2 = ((donors[:, obs] - A[i, obs]) ** 2).sum(axis=1)
        nearest = np.argsort(d2, kind="stable")[:kk]
        A[i, miss[i]] = donors[nearest][:, miss[i]].mean(axis=0)
    return A


def ingest_table(
    path,
    client_key_column,
    response_columns,
    knn_k=5,
    predictor_columns=None,
    delimiter=",",
    min_rows=3,
    return_table=False,
):
    """Read a delimited table and build one :class:`ClientDataset` per client key.

    Numeric columns are min-max scaled on the pooled table, missing cells
    imputed by k-NN, clients with fewer than ``min_rows`` rows dropped, and
    each client's rows scaled by ``1/sqrt(n_m)``.
    """
    header, rows = read_table(path, delimiter)
    if client_key_column not in header:
        raise IngestionError(f"client key column {client_key_column!r} not in header")
    missing_cols = [c for c in response_columns if c not in header]
    if missing_cols:
        raise IngestionError(f"response columns not found: {missing_cols}")
    if predictor_columns is None:
        predictor_columns = [c for c in header if c != client_key_column and c not in response_columns]
    cols = list(predictor_columns) + list(response_columns)
    idx = [header.index(c) for c in cols]
    key_idx = header.index(client_key_column)

    keys, values = [], []
    dropped = 0
    for r in rows:
        key = r[key_idx].strip() if key_idx < len(r) else ""
        if key in MISSING_TOKENS:
            dropped += 1
            continue
        try:
            values.append([_parse(r[i]) if i < len(r) else np.nan for i in idx])
        except ValueError as exc:
            raise IngestionError(f"non-numeric cell in {path}: {exc}") from exc
        keys.append(key)
    if dropped:
        log.warning("dropped %d rows with a missing client key", dropped)
    A = np.array(values, dtype=float).reshape(len(values), len(cols))
    all_missing = [c for c, col in zip(cols, A.T) if np.all(np.isnan(col))]
    if all_missing:
        raise IngestionError(f"columns with no observed values: {all_missing}")
    A = knn_impute(minmax_scale(A), knn_k)

    p = len(predictor_columns)
    order = sorted(set(keys), key=_natural_key)
    keys = np.array(keys)
    data, kept = [], []
    for key in order:
        sel = keys == key
        if sel.sum() < min_rows:
            continue
        data.append(ClientDataset.from_raw(len(data), A[sel, :p], A[sel, p:]))
        kept.append(key)
    if not data:
        raise IngestionError(f"no client has at least {min_rows} rows")
    if return_table:
        return data, {"clients": kept, "columns": cols, "table": A, "keys": keys}
    return data


def _natural_key(k):
    try:
        return (0, float(k), k)
    except ValueError:
        return (1, 0.0, k)


def split_clients(data, test_fraction=0.2, seed=0):
    """Per-client random train/test split of the raw rows; at least one row each side."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for d in data:
        X, Y = d.raw()
        n = X.shape[0]
        n_test = min(max(1, int(round(test_fraction * n))), n - 1)
        perm = rng.permutation(n)
        te, tr = perm[:n_test], perm[n_test:]
        train.append(ClientDataset.from_raw(d.client_id, X[tr], Y[tr]))
        test.append(ClientDataset.from_raw(d.client_id, X[te], Y[te]))
    return train, test


def write_table(path, header, rows, delimiter=","):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(header)
        w.writerows(rows)
