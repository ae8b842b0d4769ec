import json

import numpy as np
import pytest

from rowfed.engine import init_state, run_admm_centralized, t_update_full
from rowfed.evaluation import mse_est
from rowfed.federation import (
    ClientNode,
    DownloadTilde,
    ParticipationSampler,
    PrivacyViolation,
    UploadTheta,
    audit_transcript,
    make_message,
    rounds_to_residual,
    run_federated,
    select_clients,
)
from rowfed.model import ClientDataset, DimensionError, RunConfig

from conftest import assert_private, random_data


def test_message_payloads_are_blocks_only(rng):
    d = random_data(rng, M=1)[0]
    with pytest.raises(PrivacyViolation):
        make_message(UploadTheta, 0, d, 0, (3, 2))
    with pytest.raises(DimensionError):
        make_message(UploadTheta, 0, d.X, 0, (3, 2))
    msg = make_message(DownloadTilde, 0, np.zeros((3, 2)), 4, (3, 2))
    assert msg.kind == "download_tilde" and msg.direction == "down"
    with pytest.raises(ValueError):
        msg.payload[0, 0] = 1.0
    with pytest.raises(TypeError):
        make_message(dict, 0, np.zeros((3, 2)), 0, (3, 2))


def test_local_update_zero_gradient_keeps_block():
    X = np.eye(2)
    T = np.array([[1.0, -1.0], [0.5, 2.0]])
    node = ClientNode(ClientDataset(0, X, X @ T, 2), theta_m=T)
    np.testing.assert_allclose(node.local_t_update(T, r=3.0, tau=1.0, M=2), T, atol=1e-15)


def test_local_update_matches_full_t_update(rng):
    data = random_data(rng, M=3)
    cfg = RunConfig(penalty_family="L1", lambda1=0.1, lambda2=0.1, rho0=0.5)
    st = init_state(data, cfg)
    st.G = 0.1 * rng.standard_normal(st.G.shape)
    full = t_update_full(st, st.theta_mirror, data)
    from rowfed.engine import compute_tilde_theta

    tilde = compute_tilde_theta(st)
    for m, d in enumerate(data):
        node = ClientNode(d, theta_m=st.theta_mirror[m])
        np.testing.assert_array_equal(node.local_t_update(tilde[m], st.r, st.tau, 3), full[m])


def test_step_halves_when_r_doubles(rng):
    d = random_data(rng, M=1)[0]
    T = rng.standard_normal((3, 2))
    tilde = rng.standard_normal((3, 2))
    a = ClientNode(d, theta_m=T).local_t_update(tilde, 2.0, 1.0, 1) - tilde
    b = ClientNode(d, theta_m=T).local_t_update(tilde, 4.0, 1.0, 1) - tilde
    np.testing.assert_allclose(b, a / 2)


def test_sampler_full_participation_and_determinism():
    s = ParticipationSampler(1.0, seed=3)
    assert select_clients(s, 6, 17) == list(range(6))
    s2 = ParticipationSampler(0.4, seed=3)
    seq = [s2.select(10, t) for t in range(30)]
    assert seq == [ParticipationSampler(0.4, seed=3).select(10, t) for t in range(30)]
    assert seq != [ParticipationSampler(0.4, seed=4).select(10, t) for t in range(30)]


def test_sampler_inclusion_frequency():
    s = ParticipationSampler(0.5, seed=11)
    counts = np.zeros(10)
    for t in range(1000):
        counts[s.select(10, t)] += 1
    freq = counts / 1000
    assert np.all(np.abs(freq - 0.5) <= 0.05)
    # chi-square goodness of fit of per-client inclusion counts
    from scipy.stats import chi2

    stat = np.sum((counts - 500) ** 2 / 500 + ((1000 - counts) - 500) ** 2 / 500)
    assert stat < chi2.ppf(0.999, 10)


def test_fixed_scheme_size():
    s = ParticipationSampler(0.3, seed=0, scheme="fixed")
    assert all(len(s.select(10, t)) == 3 for t in range(20))
    with pytest.raises(ValueError):
        ParticipationSampler(0.0)


def test_full_participation_bit_identical(small_scenario):
    data, _ = small_scenario
    cfg = RunConfig(rounds=50, early_stop=False)
    res = run_federated(data, cfg)
    assert_private(res, data)
    theta, reps = run_admm_centralized(data, cfg)
    np.testing.assert_array_equal(res.theta.theta, theta.theta)
    assert [r.as_dict() for r in res.reports] == [r.as_dict() for r in reps]


def test_unselected_clients_keep_blocks(small_scenario):
    data, _ = small_scenario
    seen = []
    cfg = RunConfig(rounds=15, participation=0.4, seed=2, early_stop=False)
    sampler = ParticipationSampler(0.4, 2)

    def cb(state, rep):
        seen.append(state.theta_mirror.copy())

    res = run_federated(data, cfg, callback=cb)
    assert_private(res, data)
    for t in range(1, len(seen)):
        sel = set(sampler.select(len(data), t))
        for m in range(len(data)):
            if m not in sel:
                np.testing.assert_array_equal(seen[t][m], seen[t - 1][m])
    assert [r.n_selected for r in res.reports] == [len(sampler.select(len(data), t)) for t in range(15)]


def test_empty_rounds_allowed(small_scenario):
    data, _ = small_scenario
    res = run_federated(data, RunConfig(rounds=20, participation=0.05, seed=0, early_stop=False))
    assert_private(res, data)
    assert any(r.n_selected == 0 for r in res.reports)


def test_partial_participation_converges(desk):
    data, truth = desk
    full = run_federated(data, RunConfig())
    half = run_federated(data, RunConfig(participation=0.5, seed=1))
    assert_private(full, data)
    assert_private(half, data)
    assert mse_est(half.theta, truth.theta_star) <= 2 * mse_est(full.theta, truth.theta_star)


def test_transcript_contents_and_dump(tmp_path, small_scenario):
    data, _ = small_scenario
    res = run_federated(data, RunConfig(rounds=3, early_stop=False))
    assert_private(res, data)
    kinds = [r["kind"] for r in res.transcript]
    assert kinds[: len(data)] == ["init_upload"] * len(data)
    assert kinds.count("download_tilde") == kinds.count("upload_theta") == 3 * len(data)
    path = tmp_path / "t.jsonl"
    res.transport.dump(path)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert lines == res.transcript


def test_audit_flags_sample_shaped_payloads():
    rec = [{"round": 0, "direction": "up", "kind": "upload_theta", "client_id": 0, "shape": [60, 8]}]
    assert audit_transcript(rec, [60], (8, 6))


def test_rounds_to_residual(desk):
    data, _ = desk
    res = run_federated(data, RunConfig())
    assert_private(res, data)
    t = rounds_to_residual(res.reports, 1e-3)
    assert t is not None and res.reports[t].primal_residual < 1e-3
    assert all(r.primal_residual >= 1e-3 for r in res.reports[:t])
    assert rounds_to_residual(res.reports, 0.0) is None
