"""Row-norm penalties (L1, MCP, SCAD) and their groupwise proximal maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import FAMILIES, ConfigurationError


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family, level ``lam`` and concavity ``gamma`` (``a`` for SCAD)."""

    family: str
    lam: float
    gamma: float = 3.0

    def __post_init__(self):
        fam = self.family.upper()
        if fam not in FAMILIES:
            raise ConfigurationError(f"unknown penalty family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if self.lam < 0:
            raise ConfigurationError("lambda must be nonnegative")
        if fam == "MCP" and self.gamma <= 1:
            raise ConfigurationError("MCP needs gamma > 1")
        if fam == "SCAD" and self.gamma <= 2:
            raise ConfigurationError("SCAD needs a > 2")

    @property
    def code(self):
        return FAMILIES[self.family]

    @property
    def plateau(self):
        """Argument beyond which the penalty is constant (inf for L1)."""
        if self.family == "L1":
            return np.inf
        return self.gamma * self.lam


def penalty_value(spec: PenaltySpec, t):
    """``p_lambda(t)`` for ``t >= 0`` (scalar or array)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("penalty argument must be nonnegative")
    out = kernels._pykernels._penalty_values(t_arr, spec.lam, spec.code, spec.gamma)
    return float(out) if out.ndim == 0 else out


def penalty_derivative(spec: PenaltySpec, t):
    """``p'_lambda(t)`` for ``t > 0``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0):
        raise ValueError("derivative is defined for t > 0 only")
    lam, g = spec.lam, spec.gamma
    if spec.family == "L1":
        out = np.full_like(t_arr, lam)
    elif spec.family == "MCP":
        out = np.maximum(lam - t_arr / g, 0.0)
    else:
        out = np.where(t_arr <= lam, lam, np.maximum(g * lam - t_arr, 0.0) / (g - 1.0))
    return float(out) if out.ndim == 0 else out


def derivative_at_zero(spec: PenaltySpec) -> float:
    """Right derivative ``p'(0+)``; equals ``lam`` for all three families."""
    return float(spec.lam)


def group_soft_threshold(z, t):
    """``S(z, t) = (1 - t/||z||)_+ z`` with ``S(0, t) = 0``."""
    z = np.asarray(z, dtype=float)
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    nrm = np.linalg.norm(z)
    if nrm == 0.0:
        return np.zeros_like(z)
    return max(1.0 - t / nrm, 0.0) * z


def check_prox_params(spec: PenaltySpec, rho: float):
    if rho <= 0:
        raise ConfigurationError("rho must be positive")
    if spec.family == "MCP" and not spec.gamma > 1.0 / rho:
        raise ConfigurationError(f"MCP prox needs gamma > 1/rho (gamma={spec.gamma}, rho={rho:g})")
    if spec.family == "SCAD" and not spec.gamma > 1.0 + 1.0 / rho:
        raise ConfigurationError(f"SCAD prox needs a > 1 + 1/rho (a={spec.gamma}, rho={rho:g})")


def prox_row(spec: PenaltySpec, psi, rho: float):
    """Minimiser of ``p_lam(||v||) + (rho/2)||psi - v||^2`` over v."""
    check_prox_params(spec, rho)
    psi = np.asarray(psi, dtype=float)
    return kernels._pykernels.prox_rows(psi[None, :], spec.lam, spec.code, spec.gamma, rho)[0]


def prox_rows(spec: PenaltySpec, psi, rho: float, lam=None):
    """Row-wise prox of an (R, q) array; ``lam`` may override the level per row."""
    check_prox_params(spec, rho)
    psi = np.ascontiguousarray(psi, dtype=float)
    lam = spec.lam if lam is None else lam
    return kernels.prox_rows(psi, lam, spec.code, spec.gamma, rho)
