"""Client/server simulation of RowFed with partial participation.

Messages carry only p x q coefficient blocks and client ids; client data
stays inside :class:`ClientNode`. The transport is an in-process queue and
every message is logged in a transcript for auditing.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .engine import (
    RoundReport,
    check_finite,
    compute_tilde_theta,
    init_state,
    init_theta,
    local_step,
    make_report,
    server_round,
    should_stop,
)
from .model import ClientDataset, CoefficientStack, DimensionError, RunConfig

log = logging.getLogger(__name__)


class PrivacyViolation(RuntimeError):
    pass


def _block(payload, shape):
    if isinstance(payload, ClientDataset):
        raise PrivacyViolation("client datasets cannot be placed in a message")
    arr = np.array(payload, dtype=float, copy=True)
    if arr.shape != shape:
        raise DimensionError(f"payload shape {arr.shape} != coefficient block {shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Message:
    """Base of the closed set of message kinds."""

    client_id: int
    payload: np.ndarray
    round: int

    kind = "message"
    direction = "?"


class DownloadTilde(Message):
    kind = "download_tilde"
    direction = "down"


class UploadTheta(Message):
    kind = "upload_theta"
    direction = "up"


class InitUpload(Message):
    kind = "init_upload"
    direction = "up"


MESSAGE_TYPES = (DownloadTilde, UploadTheta, InitUpload)


def make_message(cls, client_id, block, round, shape):
    if cls not in MESSAGE_TYPES:
        raise TypeError(f"{cls!r} is not a message type")
    return cls(int(client_id), _block(block, shape), int(round))


@dataclass
class Transport:
    """Deterministic in-process queue recording every delivered message."""

    transcript: list = field(default_factory=list)

    def send(self, msg: Message):
        self.transcript.append(
            {
                "round": msg.round,
                "direction": msg.direction,
                "kind": msg.kind,
                "client_id": msg.client_id,
                "shape": list(msg.payload.shape),
            }
        )
        return msg

    def dump(self, path):
        """Write the transcript as JSON lines."""
        with open(path, "w") as fh:
            for rec in self.transcript:
                fh.write(json.dumps(rec) + "\n")


def audit_transcript(transcript: Iterable[dict], sample_sizes, block_shape):
    """Return violations: payloads not shaped like a block or with an axis equal to some n_m."""
    sizes = set(int(n) for n in sample_sizes)
    bad = []
    for rec in transcript:
        shape = tuple(rec["shape"])
        if shape != tuple(block_shape):
            bad.append((rec, "not a coefficient block"))
        elif sizes.intersection(shape):
            bad.append((rec, "axis equals a client sample size"))
    return bad


class ClientNode:
    """A client holding its private data and current coefficient block."""

    def __init__(self, dataset: ClientDataset, theta_m=None):
        self._dataset = dataset
        self.client_id = dataset.client_id
        if theta_m is None:
            theta_m = init_theta([dataset])[0]
        self.theta_m = np.array(theta_m, dtype=float)

    @property
    def block_shape(self):
        return self.theta_m.shape

    @property
    def n_samples(self):
        return self._dataset.n_raw

    def local_t_update(self, tilde_theta_m, r, tau, M):
        """``Theta_m <- tilde_m - (tau/r) grad f_m(Theta_m)`` using local data only."""
        tilde_theta_m = np.asarray(tilde_theta_m, dtype=float)
        if tilde_theta_m.shape != self.theta_m.shape:
            raise DimensionError(f"downloaded block {tilde_theta_m.shape} vs {self.theta_m.shape}")
        self.theta_m = local_step(tilde_theta_m, self.theta_m, self._dataset, M, tau / r)
        return self.theta_m

    def handle(self, msg: DownloadTilde, r, tau, M, transport):
        new = self.local_t_update(msg.payload, r, tau, M)
        return transport.send(make_message(UploadTheta, self.client_id, new, msg.round, self.block_shape))

    def init_message(self, transport):
        return transport.send(make_message(InitUpload, self.client_id, self.theta_m, -1, self.block_shape))


def local_t_update(node: ClientNode, tilde_theta_m, r, tau, M):
    return node.local_t_update(tilde_theta_m, r, tau, M)


class ParticipationSampler:
    """Per-round client selection derived from a master seed.

    ``scheme="bernoulli"`` includes each client independently with
    probability ``rate``; ``"fixed"`` draws ``max(1, round(rate*M))`` clients
    uniformly without replacement.
    """

    def __init__(self, rate, seed=0, scheme="bernoulli"):
        if not 0 < rate <= 1:
            raise ValueError("participation rate must lie in (0, 1]")
        if scheme not in ("bernoulli", "fixed"):
            raise ValueError(f"unknown scheme {scheme!r}")
        self.rate = float(rate)
        self.seed = int(seed)
        self.scheme = scheme

    def select(self, M, round):
        if M < 1:
            raise ValueError("M must be >= 1")
        if self.rate >= 1.0:
            return list(range(M))
        rng = np.random.default_rng([self.seed, 0x5E1EC7, int(round)])
        if self.scheme == "fixed":
            k = max(1, int(round_half_up(self.rate * M)))
            return sorted(rng.choice(M, size=k, replace=False).tolist())
        return np.flatnonzero(rng.random(M) < self.rate).tolist()


def round_half_up(x):
    return np.floor(x + 0.5)


def select_clients(sampler: ParticipationSampler, M, round):
    return sampler.select(M, round)


@dataclass
class FederatedResult:
    theta: CoefficientStack
    reports: list[RoundReport]
    transcript: list
    state: object = None


def run_federated(clients, config: RunConfig, data=None, callback=None):
    """Algorithm loop over ``clients`` (ClientNode list or datasets).

    ``data`` is used only for the diagnostic loss/Lagrangian in the round
    reports; the protocol itself never reads it.
    """
    if clients and isinstance(clients[0], ClientDataset):
        data = list(clients) if data is None else data
        clients = [ClientNode(d) for d in clients]
    if data is None:
        data = [c._dataset for c in clients]
    M = len(clients)
    transport = Transport()
    # initial uploads form the server mirror
    theta0 = np.stack([c.init_message(transport).payload for c in clients])
    state = init_state(data, config, theta0=theta0)
    sampler = ParticipationSampler(config.participation, config.seed, config.sampling)
    shape = clients[0].block_shape
    theta = state.theta_mirror.copy()
    reports = []
    for t in range(config.rounds):
        rho_used = state.rho
        selected = sampler.select(M, t)
        if selected:
            tilde = compute_tilde_theta(state)
        new = theta.copy()
        for m in selected:
            down = transport.send(make_message(DownloadTilde, clients[m].client_id, tilde[m], t, shape))
            up = clients[m].handle(down, state.r, state.tau, M, transport)
            new[m] = up.payload
        check_finite(new, t)
        state.theta_mirror = new
        primal, dual = server_round(state, new, config)
        rep = make_report(state, t, theta, new, primal, dual, data, config, len(selected), rho_used)
        reports.append(rep)
        theta = new
        if callback is not None:
            callback(state, rep)
        if should_stop(rep, config):
            break
    sizes = [c.n_samples for c in clients]
    bad = audit_transcript(transport.transcript, sizes, shape)
    malformed = [b for b in bad if b[1] == "not a coefficient block"]
    if malformed:
        raise PrivacyViolation(f"{len(malformed)} transcript records are not coefficient blocks")
    if bad:
        # block dims can coincide with a sample size by accident
        log.warning("block shape %s coincides with a client sample size", shape)
    theta_out = CoefficientStack(theta.reshape(M * shape[0], -1), M, shape[0])
    res = FederatedResult(theta_out, reports, transport.transcript, state)
    res.transport = transport
    return res


def rounds_to_residual(reports, threshold):
    """First round index whose primal residual is below ``threshold`` (None if never)."""
    for rep in reports:
        if rep.primal_residual < threshold:
            return rep.round
    return None
