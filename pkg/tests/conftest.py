import numpy as np
import pytest

from rowfed.datagen import ScenarioSpec, gen_scenario
from rowfed.federation import audit_transcript
from rowfed.model import ClientDataset


def assert_private(result, data):
    """Privacy audit applied to every federated run in the suite."""
    shape = result.theta.blocks.shape[1:]
    bad = audit_transcript(result.transcript, [d.n_raw for d in data], shape)
    assert not bad, bad[:3]
    assert all(tuple(r["shape"]) == shape for r in result.transcript)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_data(rng, M=3, n=8, p=3, q=2, sizes=None):
    sizes = sizes or [n] * M
    return [ClientDataset.from_raw(m, rng.standard_normal((k, p)), rng.standard_normal((k, q))) for m, k in enumerate(sizes)]


@pytest.fixture(scope="session")
def desk():
    return gen_scenario(ScenarioSpec(seed=7))


@pytest.fixture(scope="session")
def small_scenario():
    return gen_scenario(ScenarioSpec(M=5, n=60, p=8, q=6, seed=3))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(results):
            terminalreporter.write_line(results[cid])
