import numpy as np
import pytest

from rowfed.model import (
    ClientDataset,
    CoefficientStack,
    ConfigurationError,
    DimensionError,
    GroupStructure,
    NumericalError,
    RunConfig,
    grad,
    grad_local,
    lipschitz_bound,
    loss,
)

from conftest import random_data


def fd_grad(theta, data, h=1e-6):
    g = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        e = np.zeros_like(theta)
        e[idx] = h
        g[idx] = (loss(theta + e, data) - loss(theta - e, data)) / (2 * h)
    return g


def test_from_raw_scales_rows(rng):
    X, Y = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    d = ClientDataset.from_raw(0, X, Y)
    np.testing.assert_allclose(d.X, X / 2)
    np.testing.assert_allclose(d.raw()[1], Y)
    assert d.n_raw == 4 and d.p == 3 and d.q == 2


def test_dataset_rejects_empty_and_mismatch():
    with pytest.raises((ValueError, DimensionError)):
        ClientDataset.from_raw(0, np.zeros((0, 2)), np.zeros((0, 1)))
    with pytest.raises(DimensionError):
        ClientDataset.from_raw(0, np.zeros((3, 2)), np.zeros((4, 1)))


def test_loss_perfect_fit_is_zero(rng):
    X = rng.standard_normal((6, 3))
    T = rng.standard_normal((3, 2))
    d = ClientDataset.from_raw(0, X, X @ T)
    assert loss(T[None], [d]) == pytest.approx(0.0, abs=1e-25)


def test_loss_hand_summation():
    # scaled X = I, Y = I, Theta = 0, M = 1: (1/2) * ||I||_F^2 = 1
    d = ClientDataset(0, np.eye(2), np.eye(2), 2)
    assert loss(np.zeros((2, 2)), [d]) == pytest.approx(1.0)


def test_loss_invariant_to_zero_rows(rng):
    d = ClientDataset(0, rng.standard_normal((5, 3)), rng.standard_normal((5, 2)), 5)
    pad = ClientDataset(0, np.vstack([d.X, np.zeros((2, 3))]), np.vstack([d.Y, np.zeros((2, 2))]), 5)
    T = rng.standard_normal((3, 2))
    assert loss(T, [pad]) == pytest.approx(loss(T, [d]), rel=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_grad_local_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    data = random_data(rng, M=3, n=7, p=3, q=2)
    theta = rng.standard_normal((9, 2))
    g = grad(theta, data).reshape(theta.shape)
    ref = fd_grad(theta, data)
    assert np.linalg.norm(g - ref) <= 1e-5 * np.linalg.norm(ref)
    blocks = theta.reshape(3, 3, 2)
    stacked = np.concatenate([grad_local(blocks[m], data[m], 3) for m in range(3)])
    np.testing.assert_array_equal(stacked, g.reshape(9, 2))


def test_grad_zero_at_noiseless_truth(rng):
    X = rng.standard_normal((6, 3))
    T = rng.standard_normal((3, 2))
    d = ClientDataset.from_raw(0, X, X @ T)
    assert np.abs(grad_local(T, d, 1)).max() < 1e-12


def test_doubling_M_halves_gradient(rng):
    d = random_data(rng, M=1)[0]
    T = rng.standard_normal((3, 2))
    np.testing.assert_allclose(grad_local(T, d, 4), grad_local(T, d, 2) / 2)


def test_grad_local_rejects_non_finite(rng):
    d = random_data(rng, M=1)[0]
    with pytest.raises(NumericalError):
        grad_local(np.full((3, 2), np.nan), d, 1)


def test_lipschitz_single_sample():
    x = np.array([[2.0, 0.0]])  # ||x||^2 = 4
    d = ClientDataset.from_raw(0, x, np.zeros((1, 1)))
    assert lipschitz_bound([d], "appendix") == pytest.approx(4.0)
    assert lipschitz_bound([d], "statement") == pytest.approx(4.0)
    assert lipschitz_bound([d], "spectral") == pytest.approx(4.0)


def test_lipschitz_zero_covariates():
    d = ClientDataset.from_raw(0, np.zeros((3, 2)), np.ones((3, 1)))
    assert lipschitz_bound([d], "spectral") == 0.0


@pytest.mark.parametrize("rule", ["appendix", "spectral"])
def test_lipschitz_bound_sampling_oracle(rng, rule):
    data = random_data(rng, M=3, n=6, p=4, q=2)
    mu = lipschitz_bound(data, rule)
    worst = 0.0
    for _ in range(100):
        a, b = rng.standard_normal((12, 2)), rng.standard_normal((12, 2))
        worst = max(worst, np.linalg.norm(grad(a, data) - grad(b, data)) / np.linalg.norm(a - b))
    assert worst <= mu * (1 + 1e-12)


def test_statement_rule_is_M_times_appendix(rng):
    data = random_data(rng, M=4)
    assert lipschitz_bound(data, "statement") == pytest.approx(4 * lipschitz_bound(data, "appendix"))


def test_coefficient_stack_views(rng):
    th = rng.standard_normal((6, 2))
    s = CoefficientStack(th, 3)
    assert s.p == 2 and s.q == 2
    np.testing.assert_array_equal(s.block(1), th[2:4])
    s2 = CoefficientStack.stack(s.split())
    np.testing.assert_array_equal(s2.theta, th)
    with pytest.raises(DimensionError):
        CoefficientStack(np.zeros((5, 2)), 3)


def test_group_structure_canonical_labels():
    g = GroupStructure(np.array([[1, 1, 0], [2, 0, 2]]))
    assert g.labels.tolist() == [[0, 0, 1], [0, 1, 0]]
    assert g.counts().tolist() == [2, 2]
    assert g.groups(1) == [[0, 2], [1]]
    assert g == GroupStructure(np.array([[5, 5, 3], [0, 1, 0]]))


def test_group_structure_values_and_zero_groups():
    vals = [np.array([[0.0, 0.0], [1.0, 2.0]]), np.array([[3.0, 3.0]])]
    g = GroupStructure(np.array([[0, 1, 1], [0, 0, 0]]), vals)
    assert g.zero_groups() == {(0, 0)}
    out = g.expand()
    np.testing.assert_array_equal(out[2, 0], [1.0, 2.0])
    with pytest.raises(ValueError):
        GroupStructure(np.array([[0, 1]]), [np.array([[1.0], [1.0]])])


def test_run_config_validation():
    with pytest.raises(ConfigurationError):
        RunConfig(penalty_family="ridge")
    with pytest.raises(ConfigurationError):
        RunConfig(alpha=0.9)
    with pytest.raises(ConfigurationError):
        RunConfig(gamma=3.0, rho0=0.1)  # MCP needs gamma > 1/rho
    cfg = RunConfig(penalty_family="scad", gamma=3.7, rho0=1.0)
    assert cfg.penalty_family == "SCAD"
    with pytest.raises(ConfigurationError):
        cfg.check_rho(0.3)
