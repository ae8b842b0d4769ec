"""Comparator estimators and the KKT residual check.

* ``nonfed_fit`` - each client alone, row-sparse penalty.
* ``fedavg_fit`` - one shared model on the pooled data.
* ``oracle_fit`` - least squares knowing the true grouping and zero set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .model import CoefficientStack, DimensionError, GroupStructure, NumericalError
from .penalty import PenaltySpec, derivative_at_zero, penalty_derivative, penalty_value, prox_rows


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


def _objective(G, b, yy, theta, spec):
    # 0.5 ||Y - X theta||^2 written through the Gram matrices
    fit = 0.5 * (yy - 2.0 * np.vdot(theta, b) + np.vdot(theta, G @ theta))
    return fit + float(np.sum(penalty_value(spec, np.linalg.norm(theta, axis=1))))


def prox_gradient(G, b, yy, spec: PenaltySpec, theta0=None, tol=1e-8, max_iter=20000, trace=None):
    """Proximal gradient for ``0.5||Y - X Theta||^2 + sum_j p(||Theta_(j)||)``.

    ``G = X^T X``, ``b = X^T Y``. Step ``1/L`` with ``L = lambda_max(G)``.
    Stops when the gradient-map norm ``L ||Theta - Theta+||`` is below ``tol``.
    """
    p, q = b.shape
    L = float(np.linalg.eigvalsh(G)[-1]) if p else 0.0
    if L <= 0:
        return np.zeros((p, q))
    # the MCP/SCAD prox at rho = L needs a convex subproblem
    if spec.family == "MCP" and not spec.gamma > 1.0 / L:
        L = 1.0 / spec.gamma * (1 + 1e-9)
    if spec.family == "SCAD" and not spec.gamma > 1.0 + 1.0 / L:
        L = 1.0 / (spec.gamma - 1.0) * (1 + 1e-9)
    theta = np.zeros((p, q)) if theta0 is None else np.array(theta0, dtype=float)
    for _ in range(max_iter):
        z = theta - (G @ theta - b) / L
        new = prox_rows(spec, z, L)
        gm = L * np.linalg.norm(new - theta)
        theta = new
        if trace is not None:
            trace.append(_objective(G, b, yy, theta, spec))
        if not np.all(np.isfinite(theta)):
            raise NumericalError("proximal gradient diverged")
        if gm <= tol:
            break
    return theta


def _ls_start(G, b):
    # minimum-norm least squares; exact when G is nonsingular
    return np.linalg.lstsq(G, b, rcond=None)[0]


def nonfed_fit(data, lambda1, spec: PenaltySpec | None = None, tol=1e-8, max_iter=20000):
    """Independent per-client fits of ``(1/2n_m)||Y - X Theta||^2 + sum_j p_lambda1(||Theta_(j)||)``."""
    spec = PenaltySpec("MCP", lambda1, 3.0) if spec is None else PenaltySpec(spec.family, lambda1, spec.gamma)
    blocks = []
    for d in data:
        G, b, yy = d.gram()
        blocks.append(prox_gradient(G, b, yy, spec, _ls_start(G, b), tol, max_iter))
    return CoefficientStack.stack(blocks)


def fedavg_fit(data, lambda1, spec: PenaltySpec | None = None, tol=1e-8, max_iter=20000, shared=False):
    """One coefficient matrix fit on the pooled scaled data ``(1/2M) sum_m ||Y_m - X_m Theta||^2``.

    Returns the shared p x q matrix when ``shared`` is true, else its M-fold
    replication as a :class:`CoefficientStack`.
    """
    spec = PenaltySpec("MCP", lambda1, 3.0) if spec is None else PenaltySpec(spec.family, lambda1, spec.gamma)
    M = len(data)
    G = sum(d.gram()[0] for d in data) / M
    b = sum(d.gram()[1] for d in data) / M
    yy = sum(d.gram()[2] for d in data) / M
    theta = prox_gradient(G, b, yy, spec, _ls_start(G, b), tol, max_iter)
    if shared:
        return theta
    return CoefficientStack.stack([theta] * M)


@dataclass
class OracleDesign:
    """Column index of every (client, variable) in the collapsed design.

    ``col[m, j]`` is the column of group ``G^j_s`` containing m, or -1 when
    that group is in the known zero set. ``cols`` lists (j, s) per column.
    """

    col: np.ndarray
    cols: list
    groups: GroupStructure

    @classmethod
    def build(cls, groups: GroupStructure, zero_groups=None):
        zero = groups.zero_groups() if zero_groups is None else set(zero_groups)
        cols = []
        index = {}
        for j in range(groups.p):
            for s in range(groups.n_groups(j)):
                if (j, s) not in zero:
                    index[(j, s)] = len(cols)
                    cols.append((j, s))
        col = np.full((groups.M, groups.p), -1, dtype=int)
        for m in range(groups.M):
            for j in range(groups.p):
                col[m, j] = index.get((j, int(groups.labels[j, m])), -1)
        return cls(col, cols, groups)

    @property
    def n_cols(self):
        return len(self.cols)

    def dense_W(self):
        """Binary (M*p, S_nonzero) matrix; for small checks only."""
        M, p = self.col.shape
        W = np.zeros((M * p, self.n_cols))
        for m in range(M):
            for j in range(p):
                if self.col[m, j] >= 0:
                    W[m * p + j, self.col[m, j]] = 1.0
        return W

    def collapsed_normal(self, data):
        """``(X1^T X1, X1^T Y)`` accumulated from per-client Gram matrices."""
        S = self.n_cols
        q = data[0].q
        A = np.zeros((S, S))
        c = np.zeros((S, q))
        for m, d in enumerate(data):
            XtX, XtY, _ = d.gram()
            cm = self.col[m]
            keep = np.flatnonzero(cm >= 0)
            idx = cm[keep]
            np.add.at(A, (idx[:, None], idx[None, :]), XtX[np.ix_(keep, keep)])
            np.add.at(c, idx, XtY[keep])
        return A, c

    def expand(self, xi, q):
        M, p = self.col.shape
        out = np.zeros((M, p, q))
        mask = self.col >= 0
        out[mask] = xi[self.col[mask]]
        return out

    def collapse(self, theta_blocks):
        """Group means of a stack, one row per nonzero column."""
        q = theta_blocks.shape[2]
        xi = np.zeros((self.n_cols, q))
        cnt = np.zeros(self.n_cols)
        M, p = self.col.shape
        for m in range(M):
            for j in range(p):
                c = self.col[m, j]
                if c >= 0:
                    xi[c] += theta_blocks[m, j]
                    cnt[c] += 1
        return xi / np.maximum(cnt, 1)[:, None]


def oracle_fit(data, groups: GroupStructure, zero_groups=None):
    """Least squares on the collapsed design with the zero groups fixed at 0."""
    if groups.M != len(data) or groups.p != data[0].p:
        raise DimensionError("grouping does not match the data")
    design = OracleDesign.build(groups, zero_groups)
    A, c = design.collapsed_normal(data)
    if design.n_cols == 0:
        return CoefficientStack(np.zeros((len(data), data[0].p, data[0].q)))
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise RankDeficiencyError("collapsed Gram matrix is singular") from exc
    cond_guard = np.min(np.diag(factor[0])) ** 2 / max(np.max(np.diag(A)), 1e-300)
    if cond_guard < 1e-14:
        raise RankDeficiencyError("collapsed Gram matrix is numerically singular")
    xi = linalg.cho_solve(factor, c)
    return CoefficientStack(design.expand(xi, data[0].q))


@dataclass
class KKTResult:
    stationarity_norm: float
    zero_block_margin: float
    scale: float  # ||X1^T Y||_F


def kkt_residuals(theta_hat, data, groups: GroupStructure, spec: PenaltySpec, zero_tol=1e-8):
    """Residuals of the first-order conditions on a fixed grouping.

    (a) ``M^-1 X1^T (Y - X1 Xi) - T1(Xi) Xi`` with
        ``T1 = diag(|G_s| p'(||Xi_s||) / ||Xi_s||)`` over the nonzero groups;
    (b) ``min_i |G_i| p'(0+) - M^-1 ||X2i^T (Y - X1 Xi)||`` over the zero groups
        (``+inf`` when there are none).

    ``spec`` is the sparsity penalty (``lambda1``); fusion terms between
    distinct groups are assumed to sit on the penalty plateau.
    """
    M = len(data)
    B = theta_hat.blocks if isinstance(theta_hat, CoefficientStack) else np.asarray(theta_hat, dtype=float)
    B = B.reshape(M, data[0].p, data[0].q)
    full = OracleDesign.build(groups, zero_groups=set())
    xi_all = full.collapse(B)
    norms = np.linalg.norm(xi_all, axis=1)
    zero = {full.cols[c] for c in np.flatnonzero(norms <= zero_tol)}
    nz = OracleDesign.build(groups, zero_groups=zero)
    xi = nz.collapse(B)
    A, c = nz.collapsed_normal(data)
    # X1^T (Y - X1 Xi) over the nonzero columns
    resid_corr = c - A @ xi
    sizes = np.array([len(groups.groups(j)[s]) for (j, s) in nz.cols], dtype=float)
    nrm = np.linalg.norm(xi, axis=1)
    deriv = np.zeros_like(nrm)
    pos = nrm > 0
    deriv[pos] = penalty_derivative(spec, nrm[pos]) if spec.lam > 0 else 0.0
    T1xi = np.zeros_like(xi)
    T1xi[pos] = (sizes[pos] * deriv[pos] / nrm[pos])[:, None] * xi[pos]
    stationarity = float(np.linalg.norm(resid_corr / M - T1xi))
    scale = float(np.linalg.norm(c))

    margin = float("inf")
    if zero:
        p0 = derivative_at_zero(spec)
        for (j, s) in sorted(zero):
            members = groups.groups(j)[s]
            g = np.zeros(data[0].q)
            for m in members:
                d = data[m]
                # column of X2 for this group is X_m[:, j] stacked over members
                g += d.X[:, j] @ (d.Y - d.X @ B[m])
            lhs = np.linalg.norm(g) / M
            margin = min(margin, len(members) * p0 - lhs)
    return KKTResult(stationarity, margin, scale)
