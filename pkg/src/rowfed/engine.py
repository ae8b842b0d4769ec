"""Linearised ADMM for the sparse row-wise fusion objective.

Solves ``min f(Theta) + h(P)`` subject to ``A Theta = P`` where ``h`` sums
row penalties: ``lambda2`` on the fusion rows and ``lambda1`` on the
identity rows. Each round performs

1. Theta-step: ``Theta+ = tilde(Theta) - (tau/r) grad f(Theta)`` with
   ``tilde(Theta) = Theta - (tau/r) A^T (G + rho (A Theta - P))``,
   the exact minimiser of the linearised surrogate with metric
   ``H = r I - rho tau A^T A``;
2. P-step: row-wise prox of ``A Theta+ + G/rho``;
3. G-step: ``G += rho (A Theta+ - P+)``;

followed by ``rho <- alpha rho``. The centralised driver here and the
federated simulator share :func:`server_round`, so both produce the same
floating point results under full participation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .fusion import FusionLayout, apply_A, apply_At
from .model import (
    CoefficientStack,
    ConfigurationError,
    DimensionError,
    NumericalError,
    RunConfig,
    lipschitz_bound,
)
from .model import loss as _loss
from .penalty import PenaltySpec, check_prox_params

log = logging.getLogger(__name__)

R_EPS = 1e-8


def linearization_constant(rho, tau, mu, M):
    """Smallest admissible ``r`` (plus a small margin) keeping ``H`` positive definite."""
    return rho * tau * (M + 1) + max(tau * mu / 2.0, 1.0) + R_EPS


def default_tau(mu):
    """``tau = 2/mu`` balances the two terms of ``max(tau*mu/2, 1)``."""
    return 2.0 / mu if mu > 0 else 1.0


@dataclass
class RoundReport:
    round: int
    rho: float
    primal_residual: float
    dual_gap: float
    theta_step: float
    lagrangian: float
    loss: float
    n_selected: int

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class ServerState:
    """Quantities held by the server: P, G, the Theta mirror and the rho schedule."""

    layout: FusionLayout
    P: np.ndarray
    G: np.ndarray
    theta_mirror: np.ndarray
    rho: float
    tau: float
    mu: float
    rho0: float
    alpha: float = 1.0
    round: int = 0
    r: float = field(init=False)

    def __post_init__(self):
        shape = (self.layout.total_rows, self.layout.q)
        if self.P.shape != shape or self.G.shape != shape:
            raise DimensionError(f"P and G must have shape {shape}")
        self.theta_mirror = np.ascontiguousarray(
            self.theta_mirror.reshape(self.layout.M, self.layout.p, self.layout.q)
        )
        self.r = linearization_constant(self.rho, self.tau, self.mu, self.layout.M)

    @property
    def M(self):
        return self.layout.M

    def check_pd(self):
        need = self.rho * self.tau * (self.M + 1) + max(self.tau * self.mu / 2.0, 1.0)
        if not self.r > need - 1e-12 * need:
            raise ConfigurationError(f"r={self.r:g} violates r >= rho*tau*(M+1) + max(tau*mu/2, 1) = {need:g}")

    @property
    def step(self):
        """Gradient step ``tau / r`` of the Theta update."""
        return self.tau / self.r


def init_theta(data, ridge=1e-6):
    """Per-client ridge least squares, ridge scaled by ``trace(X^T X)/p``."""
    blocks = []
    for d in data:
        XtX, XtY, _ = d.gram()
        lam = ridge * max(np.trace(XtX) / max(d.p, 1), 1e-12)
        blocks.append(np.linalg.solve(XtX + lam * np.eye(d.p), XtY))
    return np.ascontiguousarray(np.stack(blocks))


def init_state(data, config: RunConfig, theta0=None):
    """Server state with ``P = A Theta0`` and ``G = 0``."""
    M = len(data)
    p, q = data[0].p, data[0].q
    layout = FusionLayout(M, p, q)
    theta0 = init_theta(data) if theta0 is None else np.asarray(theta0, dtype=float).reshape(M, p, q).copy()
    mu = lipschitz_bound(data, config.lipschitz_rule)
    tau = config.tau if config.tau is not None else default_tau(mu)
    P = kernels.apply_A(np.ascontiguousarray(theta0))
    return ServerState(
        layout=layout,
        P=P,
        G=np.zeros_like(P),
        theta_mirror=theta0,
        rho=config.rho0,
        tau=tau,
        mu=mu,
        rho0=config.rho0,
        alpha=config.alpha,
    )


def penalties(config: RunConfig):
    """(fusion penalty, sparsity penalty) for a run configuration."""
    return (
        PenaltySpec(config.penalty_family, config.lambda2, config.gamma),
        PenaltySpec(config.penalty_family, config.lambda1, config.gamma),
    )


def h_value(layout, P, fusion_pen: PenaltySpec, sparse_pen: PenaltySpec):
    return kernels.penalty_sum(
        np.ascontiguousarray(P), layout.fusion_rows, fusion_pen.lam, sparse_pen.lam, fusion_pen.code, fusion_pen.gamma
    )


def augmented_lagrangian(state: ServerState, theta, data, fusion_pen, sparse_pen, P=None, G=None):
    """``f(Theta) + h(P) + <G, A Theta - P> + (rho/2)||A Theta - P||^2``."""
    P = state.P if P is None else P
    G = state.G if G is None else G
    D = apply_A(state.layout, theta) - P
    return (
        _loss(theta, data)
        + h_value(state.layout, P, fusion_pen, sparse_pen)
        + float(np.vdot(G, D))
        + 0.5 * state.rho * float(np.vdot(D, D))
    )


def compute_tilde_theta(state: ServerState):
    """Server-side part of the Theta update from the mirror, P and G only."""
    state.check_pd()
    return kernels.tilde_theta(state.theta_mirror, state.P, state.G, state.rho, state.step)


def local_step(tilde_m, theta_m, d, M, step):
    """``tilde_m - step * grad f_m(theta_m)``; the only place client data enters."""
    XtX, XtY, _ = d.gram()
    g = (XtX @ theta_m - XtY) / M
    return tilde_m - step * g


def t_update_full(state: ServerState, theta, data):
    """Theta-step for every client, as an (M, p, q) array."""
    blocks = np.asarray(theta.theta if isinstance(theta, CoefficientStack) else theta, dtype=float)
    blocks = blocks.reshape(state.M, state.layout.p, state.layout.q)
    if not np.array_equal(blocks, state.theta_mirror):
        state = _with_mirror(state, blocks)
    tilde = compute_tilde_theta(state)
    M = state.M
    return np.stack([local_step(tilde[m], blocks[m], data[m], M, state.step) for m in range(M)])


def _with_mirror(state, blocks):
    s = ServerState(
        state.layout, state.P, state.G, blocks.copy(), state.rho, state.tau, state.mu, state.rho0, state.alpha, state.round
    )
    s.r = state.r
    return s


def surrogate_value(state: ServerState, theta_new, theta_old, data):
    """Linearised surrogate minimised by the Theta-step."""
    from .model import grad

    layout = state.layout
    old = np.asarray(theta_old, dtype=float).reshape(layout.M * layout.p, layout.q)
    new = np.asarray(theta_new, dtype=float).reshape(layout.M * layout.p, layout.q)
    D = new - old
    HD = state.r * D - state.rho * state.tau * (kernels.apply_AtA(D.reshape(layout.M, layout.p, layout.q)).reshape(D.shape))
    g = grad(old, data).reshape(D.shape)
    Z = apply_A(layout, new) - state.P + state.G / state.rho
    return (
        _loss(old, data)
        + float(np.vdot(g, D))
        + float(np.vdot(D, HD)) / (2.0 * state.tau)
        + 0.5 * state.rho * float(np.vdot(Z, Z))
    )


def p_update(state: ServerState, theta_new, fusion_pen: PenaltySpec, sparse_pen: PenaltySpec):
    """Row-wise prox of ``Psi = A Theta+ + G/rho``; ``lambda2`` on fusion rows, ``lambda1`` on identity rows."""
    check_prox_params(fusion_pen, state.rho)
    check_prox_params(sparse_pen, state.rho)
    if fusion_pen.family != sparse_pen.family or fusion_pen.gamma != sparse_pen.gamma:
        raise ConfigurationError("fusion and sparsity penalties must share family and gamma")
    psi = apply_A(state.layout, theta_new) + state.G / state.rho
    lam = state.layout.row_lambdas(fusion_pen.lam, sparse_pen.lam)
    return kernels.prox_rows(np.ascontiguousarray(psi), lam, fusion_pen.code, fusion_pen.gamma, state.rho)


def g_update(state: ServerState, theta_new, P_new):
    return state.G + state.rho * (apply_A(state.layout, theta_new) - P_new)


def rho_schedule(state: ServerState):
    """Advance the round counter, ``rho <- alpha*rho`` and recompute ``r``."""
    if state.alpha < 1:
        raise ConfigurationError("alpha must be >= 1")
    state.round += 1
    state.rho = state.rho0 * state.alpha**state.round
    state.r = linearization_constant(state.rho, state.tau, state.mu, state.M)
    return state


def server_round(state: ServerState, theta_new, config: RunConfig):
    """P-step, G-step and rho update after the mirror holds Theta(t+1).

    Returns ``(primal_residual, dual_gap)``.
    """
    config.check_rho(state.rho)
    primal_sq, dp_sq = kernels.pg_step(
        theta_new,
        state.P,
        state.G,
        state.rho,
        config.lambda2,
        config.lambda1,
        config.family_code,
        config.gamma,
    )
    rho_schedule(state)
    return math.sqrt(primal_sq), math.sqrt(dp_sq)


def make_report(state, t, theta_old, theta_new, primal, dual, data, config, n_selected, rho_used):
    d = theta_new - theta_old
    f = _loss(theta_new, data)
    fp, sp = penalties(config)
    h = h_value(state.layout, state.P, fp, sp)
    D = kernels.apply_A(theta_new) - state.P
    lag = f + h + float(np.vdot(state.G, D)) + 0.5 * rho_used * float(np.vdot(D, D))
    return RoundReport(
        round=t,
        rho=rho_used,
        primal_residual=primal,
        dual_gap=dual,
        theta_step=float(np.sqrt(np.vdot(d, d))),
        lagrangian=lag,
        loss=f,
        n_selected=n_selected,
    )


def check_finite(theta, t):
    if not np.all(np.isfinite(theta)):
        raise NumericalError(f"non-finite iterate at round {t}")


def should_stop(report: RoundReport, config: RunConfig):
    return (
        config.early_stop
        and report.primal_residual < config.primal_tol
        and report.theta_step < config.step_tol
    )


def run_admm_centralized(data, config: RunConfig, theta0=None, callback=None):
    """Full-batch RowFed. Returns ``(CoefficientStack, [RoundReport, ...])``."""
    state = init_state(data, config, theta0)
    M = state.M
    theta = state.theta_mirror.copy()
    reports = []
    for t in range(config.rounds):
        rho_used = state.rho
        tilde = compute_tilde_theta(state)
        step = state.step
        new = np.empty_like(theta)
        for m in range(M):
            new[m] = local_step(tilde[m], theta[m], data[m], M, step)
        check_finite(new, t)
        state.theta_mirror = new
        primal, dual = server_round(state, new, config)
        rep = make_report(state, t, theta, new, primal, dual, data, config, M, rho_used)
        reports.append(rep)
        theta = new
        if callback is not None:
            callback(state, rep)
        if should_stop(rep, config):
            log.debug("early stop at round %d", t)
            break
    return CoefficientStack(theta.reshape(M * state.layout.p, -1), M, state.layout.p), reports


def fit_state(data, config, theta0=None):
    """Like :func:`run_admm_centralized` but also returns the final server state."""
    holder = {}

    def cb(state, rep):
        holder["state"] = state

    theta, reports = run_admm_centralized(data, config, theta0, callback=cb)
    return theta, reports, holder.get("state")
