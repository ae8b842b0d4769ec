import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rowfed.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    ExperimentConfig,
    config_hash,
    main,
    parse_config,
    read_table_with_header,
    replication_seeds,
    serialize_config,
)
from rowfed.datagen import write_table
from rowfed.model import ConfigurationError

SMALL = """
[experiment]
replications = {reps}
methods = {methods}
[scenario]
M = 4
n = 30
p = 5
q = 5
[run]
rounds = 400
[grid]
lambda1_grid = {l1}
lambda2_grid = {l2}
"""


def small_cfg(tmp_path, reps=2, methods="rowfed, nonfed, fedavg, oracle", l1="0.0", l2="0.02, 0.05", extra=""):
    p = tmp_path / "c.ini"
    p.write_text(SMALL.format(reps=reps, methods=methods, l1=l1, l2=l2) + extra)
    return str(p)


def read_bytes(d):
    return {f.name: f.read_bytes() for f in sorted(d.iterdir())}


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    text = serialize_config(cfg)
    again = parse_config(text)
    assert serialize_config(again) == text
    assert again == cfg


@settings(max_examples=30, deadline=None)
@given(
    st.integers(0, 2**31),
    st.integers(1, 20),
    st.floats(0, 1, allow_nan=False),
    st.lists(st.floats(0, 5, allow_nan=False), min_size=1, max_size=4),
    st.booleans(),
    st.sampled_from(["bernoulli", "fixed"]),
)
def test_round_trip_property(seed, reps, lam1, grid, tune, sampling):
    cfg = ExperimentConfig(seed=seed, replications=reps, lambda2_grid=grid, tune=tune)
    cfg = replace(cfg, run=replace(cfg.run, lambda1=lam1, sampling=sampling))
    text = serialize_config(cfg)
    parsed = parse_config(text)
    assert serialize_config(parsed) == text
    assert parse_config(serialize_config(parsed)) == parsed


def test_parse_errors():
    with pytest.raises(ConfigurationError):
        parse_config("[nonsense]\na = 1\n")
    with pytest.raises(ConfigurationError):
        parse_config("[run]\nlambda7 = 1\n")
    with pytest.raises(ConfigurationError):
        parse_config("[experiment]\nreplications = many\n")
    with pytest.raises(ConfigurationError):
        parse_config("[experiment]\nmethods = rowfed, magic\n")
    with pytest.raises(ConfigurationError):
        parse_config("[grid]\nlambda2_grid =\n")
    assert parse_config("[run]\ntau = 0.5\n").run.tau == 0.5
    assert parse_config("[run]\ntau = auto\n").run.tau is None


def test_hash_ignores_output_location():
    a = ExperimentConfig()
    assert config_hash(a) == config_hash(replace(a, output_dir="elsewhere", workers=4))
    assert config_hash(a) != config_hash(replace(a, seed=1))


def test_replication_seeds_deterministic():
    assert replication_seeds(5, 4) == replication_seeds(5, 4)
    assert replication_seeds(5, 4)[:2] == replication_seeds(5, 2)
    assert len(set(replication_seeds(5, 50))) == 50


def test_simulate_outputs_and_determinism(tmp_path):
    cfg = small_cfg(tmp_path, reps=3)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["simulate", "--config", cfg, "--out", str(a), "--seed", "4"]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(b), "--seed", "4"]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(c), "--seed", "4", "--workers", "2"]) == 0
    assert read_bytes(a) == read_bytes(b) == read_bytes(c)
    for name in ("replications.csv", "aggregate.csv", "rounds.csv"):
        first = (a / name).read_text().splitlines()[0]
        assert first.startswith("# config_hash=") and first.endswith("seed=4")
    rows = read_table_with_header(a / "replications.csv")
    assert len(rows) == 3 * 4
    summary = json.loads((a / "summary.json").read_text())
    assert summary["replication_seeds"] == replication_seeds(4, 3)


def test_simulate_noiseless_oracle(tmp_path):
    cfg = small_cfg(tmp_path, reps=1, methods="oracle")
    text = open(cfg).read().replace("q = 5\n", "q = 5\nnoise_scale = 0.0\n")
    open(cfg, "w").write(text)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = read_table_with_header(tmp_path / "o" / "replications.csv")
    assert float(rows[0]["mse_est"]) < 1e-20


def test_seed_env_override(tmp_path, monkeypatch, caplog):
    cfg = small_cfg(tmp_path, reps=1, methods="oracle")
    monkeypatch.setenv("ROWFED_SEED", "9")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "summary.json").read_text())["seed"] == 9
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "f"), "--seed", "2"]) == 0
    assert json.loads((tmp_path / "f" / "summary.json").read_text())["seed"] == 2
    monkeypatch.setenv("ROWFED_SEED", "nine")
    assert main(["simulate", "--config", cfg]) == EXIT_CONFIG


def test_exit_codes(tmp_path):
    assert main(["fit", "--config", str(tmp_path / "none.ini")]) == EXIT_IO
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nalpha = 0.5\n")
    assert main(["fit", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text("[experiment\n")
    assert main(["fit", "--config", str(bad)]) == EXIT_CONFIG


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    import rowfed.cli as cli
    from rowfed.model import NumericalError

    def diverge(*args, **kwargs):
        raise NumericalError("non-finite iterate")

    monkeypatch.setattr(cli, "fit_method", diverge)
    cfg = small_cfg(tmp_path, reps=2, methods="rowfed")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "n")]) == 3
    rows = read_table_with_header(tmp_path / "n" / "replications.csv")
    assert all(r["status"].startswith("diverged") for r in rows)


def test_fit_then_eval(tmp_path):
    cfg = small_cfg(tmp_path)
    out = tmp_path / "fit"
    assert main(["fit", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "transcript.jsonl").exists()
    for line in (out / "transcript.jsonl").read_text().splitlines():
        assert json.loads(line)["shape"] == [5, 5]
    fit_metrics = json.loads((out / "summary.json").read_text())["metrics"]
    assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
    ev = read_table_with_header(out / "metrics.csv")[0]
    assert float(ev["mse_est"]) == pytest.approx(fit_metrics["mse_est"], rel=1e-12)


def test_tune_grid(tmp_path):
    cfg = small_cfg(tmp_path, l1="0.0, 0.01", l2="0.0, 0.05, 0.1")
    out = tmp_path / "t"
    assert main(["tune", "--config", cfg, "--out", str(out)]) == 0
    rows = read_table_with_header(out / "gic_surface.csv")
    assert len(rows) == 6
    summary = json.loads((out / "summary.json").read_text())
    best = min(rows, key=lambda r: float(r["gic"]))
    assert float(best["gic"]) == pytest.approx(summary["metrics"]["gic"])
    cfg1 = small_cfg(tmp_path, l1="0.01", l2="0.05")
    assert main(["tune", "--config", cfg1, "--out", str(tmp_path / "t1")]) == 0
    sel = json.loads((tmp_path / "t1" / "summary.json").read_text())["selected"]
    assert sel == {"lambda1": 0.01, "lambda2": 0.05}


def _table(path, rng, M=5, n=25, p=3, q=2):
    T = rng.uniform(-1, 1, size=(p, q))
    rows = []
    for m in range(M):
        X = rng.uniform(size=(n, p))
        Y = X @ T + 0.05 * rng.standard_normal((n, q))
        rows += [[f"s{m}"] + [repr(float(v)) for v in np.r_[x, y]] for x, y in zip(X, Y)]
    rows += [["tiny", "0.5", "0.5", "0.5", "0.5", "0.5"]]
    write_table(path, ["state", "a", "b", "c", "r1", "r2"], rows)


def test_real_data_pipeline(tmp_path):
    _table(tmp_path / "real.csv", np.random.default_rng(3))
    extra = f"[real_data]\npath = {tmp_path / 'real.csv'}\nclient_key = state\nresponses = r1, r2\nknn_k = 3\n"
    cfg = small_cfg(tmp_path, methods="rowfed, nonfed, fedavg", extra=extra)
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["real-data", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["real-data", "--config", cfg, "--out", str(out2)]) == 0
    assert read_bytes(out1) == read_bytes(out2)
    s = json.loads((out1 / "summary.json").read_text())
    assert s["clients"] == 5
    means = s["mean_heldout_mse"]
    assert means["rowfed"] < means["mean"]
    rows = read_table_with_header(out1 / "heldout.csv")
    assert {r["method"] for r in rows} == {"mean", "rowfed", "nonfed", "fedavg"}


def test_real_data_requires_inputs(tmp_path):
    assert main(["real-data"]) == EXIT_CONFIG
    extra = f"[real_data]\npath = {tmp_path / 'nope.csv'}\nclient_key = state\nresponses = y\n"
    assert main(["real-data", "--config", small_cfg(tmp_path, extra=extra)]) == EXIT_IO


def test_dump_config(capsys):
    assert main(["fit", "--dump-config", "--seed", "3"]) == 0
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.seed == 3 and cfg.mode == "fit"
