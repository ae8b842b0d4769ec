"""NumPy implementations of the ADMM hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every function
with the same signature and semantics. Arrays are C-contiguous float64.
``theta`` is always the (M, p, q) block view of the coefficient stack and
fusion-shaped arrays have ``p*M*(M-1)/2 + p*M`` rows.
"""
from functools import lru_cache

import numpy as np

L1, MCP, SCAD = 0, 1, 2


@lru_cache(maxsize=64)
def _pairs(M):
    i, j = np.triu_indices(M, 1)
    return i, j


def apply_A(theta):
    M, p, q = theta.shape
    i, j = _pairs(M)
    out = np.empty((len(i) * p + M * p, q))
    out[: len(i) * p] = (theta[i] - theta[j]).reshape(-1, q)
    out[len(i) * p :] = theta.reshape(-1, q)
    return out


def apply_At(S, M, p):
    q = S.shape[1]
    i, j = _pairs(M)
    K = len(i)
    F = S[: K * p].reshape(K, p, q)
    out = S[K * p :].reshape(M, p, q).copy()
    # pair k contributes +F_k to client i_k and -F_k to client j_k
    np.add.at(out, i, F)
    np.subtract.at(out, j, F)
    return out


def apply_AtA(theta):
    M = theta.shape[0]
    return (M + 1) * theta - theta.sum(axis=0, keepdims=True)


def _scale(norms, lam, family, gamma, rho):
    """Multiplicative factor v = scale * psi of the row-wise prox."""
    with np.errstate(divide="ignore", invalid="ignore"):
        shrink = np.where(norms > 0, 1.0 - (lam / rho) / norms, 0.0)
    shrink = np.maximum(shrink, 0.0)
    if family == L1:
        return shrink
    if family == MCP:
        inner = shrink / (1.0 - 1.0 / (gamma * rho))
        return np.where(norms <= gamma * lam, inner, 1.0)
    a = gamma
    knot = lam * (1.0 + 1.0 / rho)
    with np.errstate(divide="ignore", invalid="ignore"):
        mid = np.where(norms > 0, 1.0 - (a * lam / ((a - 1.0) * rho)) / norms, 0.0)
    mid = np.maximum(mid, 0.0) / (1.0 - 1.0 / ((a - 1.0) * rho))
    return np.where(norms <= knot, shrink, np.where(norms <= a * lam, mid, 1.0))


def prox_rows(psi, lam, family, gamma, rho):
    norms = np.sqrt(np.einsum("ij,ij->i", psi, psi))
    return psi * _scale(norms, np.asarray(lam, dtype=float), family, gamma, rho)[:, None]


def tilde_theta(theta, P, G, rho, coef):
    M, p, _ = theta.shape
    W = G + rho * (apply_A(theta) - P)
    return theta - coef * apply_At(W, M, p)


def pg_step(theta, P, G, rho, lam_fuse, lam_id, family, gamma):
    """One P-step and G-step, in place. Returns (||A theta - P_new||^2, ||P_new - P_old||^2)."""
    M, p, _ = theta.shape
    fusion_rows = p * M * (M - 1) // 2
    At = apply_A(theta)
    psi = At + G / rho
    lam = np.empty(P.shape[0])
    lam[:fusion_rows] = lam_fuse
    lam[fusion_rows:] = lam_id
    P_new = prox_rows(psi, lam, family, gamma, rho)
    resid = At - P_new
    dP = P_new - P
    G += rho * resid
    P[...] = P_new
    return float(np.vdot(resid, resid)), float(np.vdot(dP, dP))


def penalty_sum(P, fusion_rows, lam_fuse, lam_id, family, gamma):
    norms = np.sqrt(np.einsum("ij,ij->i", P, P))
    lam = np.empty(P.shape[0])
    lam[:fusion_rows] = lam_fuse
    lam[fusion_rows:] = lam_id
    return float(np.sum(_penalty_values(norms, lam, family, gamma)))


def _penalty_values(t, lam, family, gamma):
    if family == L1:
        return lam * t
    if family == MCP:
        return np.where(t <= gamma * lam, lam * t - t * t / (2.0 * gamma), 0.5 * gamma * lam * lam)
    a = gamma
    return np.where(
        t <= lam,
        lam * t,
        np.where(
            t <= a * lam,
            (2.0 * a * lam * t - t * t - lam * lam) / (2.0 * (a - 1.0)),
            0.5 * lam * lam * (a + 1.0),
        ),
    )
