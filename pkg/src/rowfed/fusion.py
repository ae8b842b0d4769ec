"""Matrix-free fusion operator ``A = [Omega^T, I_{pM}]^T`` with ``Omega = E kron I_p``.

``E`` has one row ``e_i - e_l`` per client pair ``i < l`` in lexicographic
order. Row ``k*p + j`` of ``A Theta`` is ``Theta_i[j] - Theta_l[j]`` for the
k-th pair; the trailing ``M*p`` rows copy ``Theta``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .model import CoefficientStack, DimensionError


@dataclass(frozen=True)
class FusionLayout:
    M: int
    p: int
    q: int

    def __post_init__(self):
        if self.M < 1 or self.p < 1 or self.q < 1:
            raise DimensionError("M, p, q must be positive")

    @property
    def n_pairs(self):
        return self.M * (self.M - 1) // 2

    @property
    def fusion_rows(self):
        return self.p * self.n_pairs

    @property
    def total_rows(self):
        return self.fusion_rows + self.p * self.M

    @cached_property
    def pairs(self):
        """(n_pairs, 2) array of client pairs, row k is the k-th pair."""
        i, l = np.triu_indices(self.M, 1)
        return np.stack([i, l], axis=1)

    def pair_index(self, m, mp):
        """Index k of the pair (m, mp), m < mp (0-based)."""
        if not 0 <= m < mp < self.M:
            raise ValueError(f"need 0 <= m < m' < M, got ({m}, {mp})")
        return m * self.M - m * (m + 1) // 2 + (mp - m - 1)

    def row_info(self, d):
        """Describe row d: ('fusion', (m, m'), j) or ('identity', m, j)."""
        if not 0 <= d < self.total_rows:
            raise IndexError(d)
        if d < self.fusion_rows:
            k, j = divmod(d, self.p)
            i, l = self.pairs[k]
            return "fusion", (int(i), int(l)), j
        m, j = divmod(d - self.fusion_rows, self.p)
        return "identity", m, j

    def row_lambdas(self, lam_fuse, lam_sparse):
        lam = np.empty(self.total_rows)
        lam[: self.fusion_rows] = lam_fuse
        lam[self.fusion_rows :] = lam_sparse
        return lam

    def zeros(self):
        return np.zeros((self.total_rows, self.q))

    @classmethod
    def for_stack(cls, theta: CoefficientStack):
        return cls(theta.M, theta.p, theta.q)


def _blocks(layout, theta):
    arr = theta.theta if isinstance(theta, CoefficientStack) else np.asarray(theta, dtype=float)
    if arr.size != layout.M * layout.p * layout.q:
        raise DimensionError(f"theta of shape {arr.shape} does not match {layout}")
    return np.ascontiguousarray(arr.reshape(layout.M, layout.p, layout.q))


def apply_A(layout: FusionLayout, theta) -> np.ndarray:
    return kernels.apply_A(_blocks(layout, theta))


def apply_At(layout: FusionLayout, S) -> np.ndarray:
    """Adjoint of ``apply_A``; returns an (M*p, q) array."""
    S = np.ascontiguousarray(S, dtype=float)
    if S.shape != (layout.total_rows, layout.q):
        raise DimensionError(f"expected {(layout.total_rows, layout.q)}, got {S.shape}")
    return kernels.apply_At(S, layout.M, layout.p).reshape(layout.M * layout.p, layout.q)


def apply_AtA(layout: FusionLayout, theta) -> np.ndarray:
    """``A^T A Theta`` via ``((M+1) I - 1 1^T) kron I_p`` in one pass over the blocks."""
    return kernels.apply_AtA(_blocks(layout, theta)).reshape(layout.M * layout.p, layout.q)


def gram_bounds(M: int):
    """Extreme eigenvalues of ``A^T A``: ``(1, M+1)``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    return 1.0, float(M + 1)


def dense_A(layout: FusionLayout) -> np.ndarray:
    """Explicit ``A``; only for checks on small problems (M*p <= 64)."""
    M, p = layout.M, layout.p
    if M * p > 64:
        raise ValueError("dense_A is limited to M*p <= 64")
    E = np.zeros((layout.n_pairs, M))
    for k, (i, l) in enumerate(layout.pairs):
        E[k, i], E[k, l] = 1.0, -1.0
    return np.vstack([np.kron(E, np.eye(p)), np.eye(M * p)])


def pairwise_zero_mask(layout: FusionLayout, P, tol=0.0):
    """(n_pairs, p) boolean mask of fusion rows of P with norm <= tol."""
    F = np.asarray(P)[: layout.fusion_rows].reshape(layout.n_pairs, layout.p, layout.q)
    return np.linalg.norm(F, axis=2) <= tol
