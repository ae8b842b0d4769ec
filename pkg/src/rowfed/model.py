"""Core data types for the federated multivariate linear model.

Every client's design and response are stored pre-scaled by ``1/sqrt(n_m)``,
so the per-sample least-squares loss and the matrix form
``(1/2M) sum_m ||Y_m - X_m Theta_m||^2`` coincide.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernels import MCP, SCAD, L1


class DimensionError(ValueError):
    """Array shapes are inconsistent with each other or with the model."""


class ConfigurationError(ValueError):
    """Invalid algorithmic configuration."""


class NumericalError(ArithmeticError):
    """An iterate or input became non-finite."""


@dataclass(eq=False)
class ClientDataset:
    """One client's scaled design ``X`` (n_m x p) and response ``Y`` (n_m x q)."""

    client_id: int
    X: np.ndarray
    Y: np.ndarray
    n_raw: int
    _gram: tuple | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=float)
        self.Y = np.ascontiguousarray(self.Y, dtype=float)
        if self.X.ndim != 2 or self.Y.ndim != 2:
            raise DimensionError("X and Y must be 2-D")
        if self.X.shape[0] != self.Y.shape[0]:
            raise DimensionError(
                f"client {self.client_id}: X has {self.X.shape[0]} rows, Y has {self.Y.shape[0]}"
            )
        if self.n_raw < 1:
            raise ValueError(f"client {self.client_id}: needs at least one sample")

    @classmethod
    def from_raw(cls, client_id, X, Y):
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        n = X.shape[0]
        if n < 1:
            raise ValueError(f"client {client_id}: needs at least one sample")
        s = 1.0 / np.sqrt(n)
        return cls(client_id, X * s, Y * s, n)

    def raw(self):
        """Unscaled ``(X, Y)``."""
        s = np.sqrt(self.n_raw)
        return self.X * s, self.Y * s

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.Y.shape[1]

    def gram(self):
        """Cached ``(X^T X, X^T Y, ||Y||^2)`` of the scaled data."""
        if self._gram is None:
            self._gram = (self.X.T @ self.X, self.X.T @ self.Y, float(np.vdot(self.Y, self.Y)))
        return self._gram


class CoefficientStack:
    """Stacked coefficients ``Theta`` of shape (M*p, q).

    Rows ``m*p .. (m+1)*p - 1`` hold client m's p x q matrix.
    """

    def __init__(self, theta, M=None, p=None):
        theta = np.ascontiguousarray(theta, dtype=float)
        if theta.ndim == 3:
            M, p, _ = theta.shape
            theta = theta.reshape(M * p, -1)
        if theta.ndim != 2:
            raise DimensionError("theta must be 2-D (M*p, q) or 3-D (M, p, q)")
        if M is None:
            raise DimensionError("M is required for a 2-D theta")
        if p is None:
            p, rem = divmod(theta.shape[0], M)
            if rem:
                raise DimensionError(f"{theta.shape[0]} rows do not split into {M} clients")
        if theta.shape[0] != M * p:
            raise DimensionError(f"expected {M * p} rows, got {theta.shape[0]}")
        self.theta = theta
        self.M = int(M)
        self.p = int(p)

    @property
    def q(self):
        return self.theta.shape[1]

    @property
    def blocks(self):
        """(M, p, q) view sharing memory with ``theta``."""
        return self.theta.reshape(self.M, self.p, self.q)

    def block(self, m):
        return self.blocks[m]

    def split(self):
        return [b.copy() for b in self.blocks]

    @classmethod
    def stack(cls, blocks: Sequence[np.ndarray]):
        blocks = [np.asarray(b, dtype=float) for b in blocks]
        return cls(np.concatenate(blocks, axis=0), len(blocks), blocks[0].shape[0])

    def copy(self):
        return CoefficientStack(self.theta.copy(), self.M, self.p)

    def __repr__(self):
        return f"CoefficientStack(M={self.M}, p={self.p}, q={self.q})"


def _canonical(labels):
    """Relabel so that group ids appear in order of first occurrence."""
    out = np.empty(len(labels), dtype=int)
    seen = {}
    for m, g in enumerate(labels):
        out[m] = seen.setdefault(g, len(seen))
    return out


class GroupStructure:
    """Per-variable partition of clients into coefficient groups.

    ``labels[j, m]`` is the group of client m for variable j; labels are
    canonicalised per variable. ``values`` (optional) maps each variable to
    an (S_j, q) array of group coefficient rows.
    """

    def __init__(self, labels, values=None):
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise DimensionError("labels must be (p, M)")
        self.labels = np.stack([_canonical(row) for row in labels]) if labels.size else labels.astype(int)
        self.values = None
        if values is not None:
            values = [np.atleast_2d(np.asarray(v, dtype=float)) for v in values]
            if len(values) != self.p:
                raise DimensionError("need one value array per variable")
            for j, v in enumerate(values):
                if v.shape[0] != self.n_groups(j):
                    raise DimensionError(f"variable {j}: {v.shape[0]} values for {self.n_groups(j)} groups")
                for a in range(v.shape[0]):
                    for b in range(a + 1, v.shape[0]):
                        if np.array_equal(v[a], v[b]):
                            raise ValueError(f"variable {j}: groups {a} and {b} share a value")
            self.values = values

    @property
    def p(self):
        return self.labels.shape[0]

    @property
    def M(self):
        return self.labels.shape[1]

    def n_groups(self, j):
        return int(self.labels[j].max()) + 1 if self.M else 0

    def counts(self):
        """Number of groups K_j for every variable."""
        return self.labels.max(axis=1) + 1

    def groups(self, j):
        return [np.flatnonzero(self.labels[j] == s).tolist() for s in range(self.n_groups(j))]

    def zero_groups(self, atol=0.0):
        """Set of (j, s) whose group value is (numerically) zero; empty without values."""
        if self.values is None:
            return set()
        return {
            (j, s)
            for j, v in enumerate(self.values)
            for s in range(v.shape[0])
            if np.linalg.norm(v[s]) <= atol
        }

    def expand(self):
        """Coefficient stack (M, p, q) implied by ``values``."""
        if self.values is None:
            raise ValueError("group values are not set")
        q = self.values[0].shape[1]
        out = np.empty((self.M, self.p, q))
        for j, v in enumerate(self.values):
            out[:, j, :] = v[self.labels[j]]
        return out

    def __eq__(self, other):
        return isinstance(other, GroupStructure) and np.array_equal(self.labels, other.labels)

    def __repr__(self):
        return f"GroupStructure(p={self.p}, M={self.M}, total_groups={int(self.counts().sum())})"


FAMILIES = {"L1": L1, "MCP": MCP, "SCAD": SCAD}


@dataclass
class RunConfig:
    """Hyperparameters of one RowFed run.

    ``tau=None`` picks ``2/mu`` from the data so that the linearisation
    constant is ``rho*tau*(M+1) + 1``. The defaults assume the ``1/(2M)``
    loss scaling; ``gamma`` must exceed ``1/rho0`` for MCP.
    """

    penalty_family: str = "MCP"
    lambda1: float = 0.0
    lambda2: float = 0.05
    gamma: float = 40.0
    rho0: float = 0.05
    alpha: float = 1.02
    tau: float | None = None
    rounds: int = 2000
    participation: float = 1.0
    seed: int = 0
    sampling: str = "bernoulli"
    early_stop: bool = True
    primal_tol: float = 1e-6
    step_tol: float = 1e-8
    lipschitz_rule: str = "spectral"

    def __post_init__(self):
        self.validate()

    def validate(self):
        fam = self.penalty_family.upper()
        if fam not in FAMILIES:
            raise ConfigurationError(f"unknown penalty family {self.penalty_family!r}")
        self.penalty_family = fam
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1 and lambda2 must be nonnegative")
        if self.rho0 <= 0:
            raise ConfigurationError("rho0 must be positive")
        if self.alpha < 1:
            raise ConfigurationError("alpha must be >= 1")
        if self.tau is not None and self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if not 0 < self.participation <= 1:
            raise ConfigurationError("participation must lie in (0, 1]")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be nonnegative")
        if self.sampling not in ("bernoulli", "fixed"):
            raise ConfigurationError("sampling must be 'bernoulli' or 'fixed'")
        if fam == "MCP":
            if self.gamma <= 1:
                raise ConfigurationError("MCP needs gamma > 1")
            self.check_rho(self.rho0)
        elif fam == "SCAD":
            if self.gamma <= 2:
                raise ConfigurationError("SCAD needs a > 2")
            self.check_rho(self.rho0)

    def check_rho(self, rho):
        """Raise if the row prox is not well defined at penalty parameter ``rho``."""
        if self.penalty_family == "MCP" and not self.gamma > 1.0 / rho:
            raise ConfigurationError(f"MCP requires gamma > 1/rho (gamma={self.gamma}, rho={rho:g})")
        if self.penalty_family == "SCAD" and not self.gamma > 1.0 + 1.0 / rho:
            raise ConfigurationError(f"SCAD requires a > 1 + 1/rho (a={self.gamma}, rho={rho:g})")

    @property
    def family_code(self):
        return FAMILIES[self.penalty_family]


def _check(theta, data):
    M = len(data)
    if M == 0:
        raise ValueError("no client data")
    if isinstance(theta, CoefficientStack):
        blocks = theta.blocks
    else:
        blocks = np.asarray(theta, dtype=float)
        if blocks.ndim == 2:
            blocks = blocks.reshape(M, -1, blocks.shape[1])
    if blocks.shape[0] != M:
        raise DimensionError(f"{blocks.shape[0]} coefficient blocks for {M} clients")
    for d, b in zip(data, blocks):
        if d.X.shape[1] != b.shape[0] or d.Y.shape[1] != b.shape[1]:
            raise DimensionError(f"client {d.client_id}: data {d.X.shape}/{d.Y.shape} vs block {b.shape}")
    return blocks


def loss(theta, data: Sequence[ClientDataset]) -> float:
    """``(1/2M) sum_m ||Y_m - X_m Theta_m||_F^2`` on the scaled data."""
    blocks = _check(theta, data)
    M = len(data)
    total = 0.0
    for d, b in zip(data, blocks):
        R = d.Y - d.X @ b
        total += float(np.vdot(R, R))
    return total / (2.0 * M)


def grad_local(theta_m, d: ClientDataset, M: int) -> np.ndarray:
    """Gradient of ``f_m = (1/2M)||Y_m - X_m Theta_m||^2``."""
    theta_m = np.asarray(theta_m, dtype=float)
    if theta_m.shape != (d.p, d.q):
        raise DimensionError(f"block {theta_m.shape} vs data ({d.p}, {d.q})")
    XtX, XtY, _ = d.gram()
    g = (XtX @ theta_m - XtY) / M
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"client {d.client_id}: non-finite gradient")
    return g


def grad(theta, data):
    """Full gradient as an (M, p, q) stack of per-client gradients."""
    blocks = _check(theta, data)
    M = len(data)
    return np.stack([grad_local(b, d, M) for d, b in zip(data, blocks)])


def lipschitz_bound(data: Sequence[ClientDataset], rule: str = "appendix") -> float:
    """Lipschitz constant ``mu`` of the full-loss gradient.

    ``rule``:
      * ``"appendix"`` - ``(1/M) max_{m,i} ||x_mi||^2`` on raw rows
        (the per-client derivation).
      * ``"statement"`` - the same without the ``1/M`` factor (looser).
      * ``"spectral"`` - ``(1/M) max_m lambda_max(X_m^T X_m)``, the exact
        constant for the block-diagonal Hessian.
    """
    if not data:
        raise ValueError("lipschitz_bound needs at least one client")
    M = len(data)
    if rule == "spectral":
        top = max(float(np.linalg.eigvalsh(d.gram()[0])[-1]) if d.p else 0.0 for d in data)
        return max(top, 0.0) / M
    raw_max = max(float(np.max(np.einsum("ij,ij->i", d.X, d.X))) * d.n_raw for d in data)
    if rule == "appendix":
        return raw_max / M
    if rule == "statement":
        return raw_max
    raise ValueError(f"unknown rule {rule!r}")
