"""Command line: config files, experiment orchestration and report emission.

Verbs: ``simulate``, ``fit``, ``tune``, ``eval`` and ``real-data``. Every run is
determined by the config text and the master seed. Tables are CSV files whose
first line is ``# config_hash=<hash> seed=<seed>``; each run also writes one
``summary.json``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import fedavg_fit, kkt_residuals, nonfed_fit, oracle_fit
from .datagen import IngestionError, ScenarioSpec, gen_scenario, ingest_table, split_clients
from .engine import penalties, run_admm_centralized
from .evaluation import MetricsReport, evaluate, extract_clusters, grid_search
from .federation import run_federated
from .model import CoefficientStack, ConfigurationError, NumericalError, RunConfig
from .penalty import PenaltySpec

log = logging.getLogger("rowfed")

MODES = ("simulate", "fit", "tune", "eval", "real-data")
METHODS = ("rowfed", "nonfed", "fedavg", "oracle")
SEED_ENV = "ROWFED_SEED"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


@dataclass
class RealDataConfig:
    path: str = ""
    client_key: str = ""
    responses: list = field(default_factory=list)
    predictors: list = field(default_factory=list)
    knn_k: int = 5
    min_rows: int = 3
    test_fraction: float = 0.2
    delimiter: str = ","


@dataclass
class ExperimentConfig:
    mode: str = "simulate"
    seed: int = 0
    replications: int = 1
    methods: list = field(default_factory=lambda: list(METHODS))
    output_dir: str = "out"
    workers: int = 1
    tune: bool = False
    federated: bool = True
    coefficients: str = ""
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    run: RunConfig = field(default_factory=RunConfig)
    lambda1_grid: list = field(default_factory=lambda: [0.0])
    lambda2_grid: list = field(default_factory=lambda: [0.02, 0.05, 0.1])
    real_data: RealDataConfig = field(default_factory=RealDataConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigurationError(f"methods must be a nonempty subset of {METHODS}")
        if self.replications < 1:
            raise ConfigurationError("replications must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if not self.lambda1_grid or not self.lambda2_grid:
            raise ConfigurationError("lambda grids must be nonempty")
        if min(self.lambda1_grid + self.lambda2_grid) < 0:
            raise ConfigurationError("lambda grids must be nonnegative")
        if not 0 < self.real_data.test_fraction < 1:
            raise ConfigurationError("test_fraction must lie in (0, 1)")
        if self.mode == "real-data":
            rd = self.real_data
            if not rd.path or not rd.client_key or not rd.responses:
                raise ConfigurationError("real-data needs path, client_key and responses")
        self.run.validate()
        return self


# ---- INI (de)serialisation -------------------------------------------------

_SECTIONS = {
    "experiment": ("mode", "seed", "replications", "methods", "output_dir", "workers", "tune", "federated", "coefficients"),
    "grid": ("lambda1_grid", "lambda2_grid"),
}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _convert(raw, default, name):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or (default is None and name == "tau"):
            return None if raw.lower() in ("auto", "none", "") else float(raw)
        if isinstance(default, list):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if name.endswith("_grid"):
                return [float(x) for x in items]
            return items
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from exc
    return raw


def _apply(obj, items, section):
    names = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in items:
        if key not in names:
            raise ConfigurationError(f"unknown key [{section}] {key}")
        updates[key] = _convert(raw, getattr(obj, key), key)
    return updates


def _parser():
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep key case (scenario M)
    return cp


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI text into a validated :class:`ExperimentConfig`."""
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    known = set(_SECTIONS) | {"scenario", "run", "real_data"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigurationError(f"unknown sections: {sorted(unknown)}")
    cfg = ExperimentConfig()
    top = {}
    for sec, keys in _SECTIONS.items():
        if cp.has_section(sec):
            for key, raw in cp.items(sec):
                if key not in keys:
                    raise ConfigurationError(f"unknown key [{sec}] {key}")
                top[key] = _convert(raw, getattr(cfg, key), key)
    try:
        scenario = cfg.scenario
        if cp.has_section("scenario"):
            scenario = ScenarioSpec(**_apply(scenario, cp.items("scenario"), "scenario"))
        run_kw = {}
        if cp.has_section("run"):
            run_kw = _apply(cfg.run, cp.items("run"), "run")
        run = RunConfig(**run_kw)
        real = cfg.real_data
        if cp.has_section("real_data"):
            real = RealDataConfig(**_apply(real, cp.items("real_data"), "real_data"))
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(str(exc)) from exc
    cfg = replace(cfg, scenario=scenario, run=run, real_data=real, **top)
    return cfg.validate()


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text; ``parse_config(serialize_config(c))`` reproduces ``c``."""
    cp = _parser()
    for sec, keys in _SECTIONS.items():
        cp[sec] = {k: _fmt(getattr(cfg, k)) for k in keys}
    for sec, obj in (("scenario", cfg.scenario), ("run", cfg.run), ("real_data", cfg.real_data)):
        cp[sec] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the canonical config; output location and worker count do not affect results."""
    canon = replace(cfg, output_dir="", workers=1)
    return hashlib.sha256(serialize_config(canon).encode()).hexdigest()[:16]


def replication_seeds(master, count):
    """Per-replication seeds spawned from the master seed."""
    children = np.random.SeedSequence(int(master)).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


# ---- output ---------------------------------------------------------------

class Emitter:
    """Writes tables and the summary; every table starts with the provenance line."""

    def __init__(self, out_dir, cfg: ExperimentConfig):
        self.dir = Path(out_dir)
        self.header = f"# config_hash={config_hash(cfg)} seed={cfg.seed}"
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IngestionError(f"cannot create {self.dir}: {exc}") from exc

    def table(self, name, columns, rows):
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            fh.write(self.header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_cell(x) for x in r])
        return path

    def summary(self, obj):
        path = self.dir / "summary.json"
        with open(path, "w") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def read_table_with_header(path):
    """Rows of a table written by :class:`Emitter` (provenance line skipped)."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        return list(csv.DictReader(fh))


# ---- fitting helpers --------------------------------------------------------

def _sparse_spec(run: RunConfig, lam):
    return PenaltySpec(run.penalty_family, lam, run.gamma)


def fit_rowfed(data, cfg: ExperimentConfig, run: RunConfig, truth=None):
    """RowFed fit (tuned when ``cfg.tune``). Returns (theta, reports, extra)."""
    extra = {}
    if cfg.tune:
        fit = _federated_fit if cfg.federated else None
        res = grid_search(data, cfg.lambda1_grid, cfg.lambda2_grid, run, truth=truth, fit=fit)
        extra["selected"] = list(res.best)
        extra["grid"] = res.table
        return res.theta, res.reports, extra
    if cfg.federated:
        theta, reports = _federated_fit(data, run)
    else:
        theta, reports = run_admm_centralized(data, run)
    return theta, reports, extra


def _federated_fit(data, run, theta0=None):
    # warm starts are a centralized convenience; the protocol restarts from local fits
    res = run_federated(data, run)
    return res.theta, res.reports


def fit_method(method, data, run: RunConfig, cfg, truth=None):
    if method == "rowfed":
        return fit_rowfed(data, cfg, run, truth)
    if method == "nonfed":
        return nonfed_fit(data, run.lambda1, _sparse_spec(run, run.lambda1)), [], {}
    if method == "fedavg":
        return fedavg_fit(data, run.lambda1, _sparse_spec(run, run.lambda1)), [], {}
    if method == "oracle":
        if truth is None:
            raise ConfigurationError("the oracle method needs a known generating model")
        return oracle_fit(data, truth.groups), [], {}
    raise ConfigurationError(f"unknown method {method!r}")


def _replicate(args):
    """One simulation replication; runs in a worker process when workers > 1."""
    cfg, rep, seed = args
    data, truth = gen_scenario(replace(cfg.scenario, seed=seed))
    run = replace(cfg.run, seed=seed)
    rows, rounds = [], []
    for method in cfg.methods:
        try:
            theta, reports, _ = fit_method(method, data, run, cfg, truth)
            m = evaluate(theta, data, truth)
            rows.append((rep, seed, method, "ok", m))
            if method == "rowfed":
                rounds.extend((rep, r) for r in reports)
        except NumericalError as exc:
            rows.append((rep, seed, method, f"diverged: {exc}", MetricsReport()))
    return rows, rounds


METRIC_COLUMNS = ("mse_est", "mse_pred", "ri", "total_K", "gic")
ROUND_COLUMNS = ("round", "rho", "primal_residual", "dual_gap", "theta_step", "lagrangian", "loss", "n_selected")


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        # map preserves job order, so the collector writes in replication order
        return list(ex.map(fn, jobs))


def cmd_simulate(cfg: ExperimentConfig):
    seeds = replication_seeds(cfg.seed, cfg.replications)
    results = _map(_replicate, [(cfg, i, s) for i, s in enumerate(seeds)], cfg.workers)
    out = Emitter(cfg.output_dir, cfg)
    per_rep, rounds = [], []
    for rows, rr in results:
        per_rep.extend(rows)
        rounds.extend(rr)
    out.table(
        "replications.csv",
        ("replication", "seed", "method", "status") + METRIC_COLUMNS,
        [(r, s, m, st) + tuple(rep.as_dict()[c] for c in METRIC_COLUMNS) for r, s, m, st, rep in per_rep],
    )
    agg = aggregate(per_rep, cfg.methods)
    out.table("aggregate.csv", ("method", "metric", "mean", "sd", "n"), agg)
    out.table(
        "rounds.csv",
        ("replication",) + ROUND_COLUMNS,
        [(i,) + tuple(getattr(r, c) for c in ROUND_COLUMNS) for i, r in rounds],
    )
    failures = sum(1 for row in per_rep if row[3] != "ok")
    out.summary(
        {
            "mode": "simulate",
            "config_hash": config_hash(cfg),
            "seed": cfg.seed,
            "replication_seeds": seeds,
            "failures": failures,
            "aggregate": {f"{m}.{k}": {"mean": mu, "sd": sd} for m, k, mu, sd, _ in agg},
        }
    )
    if failures == len(per_rep):
        raise NumericalError("every fit diverged")
    return EXIT_OK


def aggregate(per_rep, methods):
    """(method, metric, mean, sample sd, n) over successful replications."""
    rows = []
    for method in methods:
        reps = [r for _, _, m, st, r in per_rep if m == method and st == "ok"]
        for c in METRIC_COLUMNS:
            vals = np.array([float(r.as_dict()[c]) for r in reps])
            vals = vals[np.isfinite(vals)]
            n = len(vals)
            mean = float(vals.mean()) if n else float("nan")
            sd = float(vals.std(ddof=1)) if n > 1 else float("nan")
            rows.append((method, c, mean, sd, n))
    return rows


def _coef_rows(theta: CoefficientStack):
    B = theta.blocks
    M, p, _ = B.shape
    return [(m, j) + tuple(float(x) for x in B[m, j]) for m in range(M) for j in range(p)]


def _coef_columns(q):
    return ("client", "variable") + tuple(f"y{k}" for k in range(q))


def cmd_fit(cfg: ExperimentConfig):
    data, truth = gen_scenario(replace(cfg.scenario, seed=cfg.seed))
    run = replace(cfg.run, seed=cfg.seed)
    out = Emitter(cfg.output_dir, cfg)
    if cfg.federated:
        res = run_federated(data, run)
        theta, reports = res.theta, res.reports
        res.transport.dump(out.dir / "transcript.jsonl")
    else:
        theta, reports = run_admm_centralized(data, run)
    m = evaluate(theta, data, truth)
    out.table("coefficients.csv", _coef_columns(theta.q), _coef_rows(theta))
    out.table("rounds.csv", ROUND_COLUMNS, [tuple(getattr(r, c) for c in ROUND_COLUMNS) for r in reports])
    est = extract_clusters(theta)
    k = kkt_residuals(theta, data, est, _sparse_spec(run, run.lambda1))
    out.summary(
        {
            "mode": "fit",
            "config_hash": config_hash(cfg),
            "seed": cfg.seed,
            "rounds": len(reports),
            "metrics": m.as_dict(),
            "kkt": dataclasses.asdict(k),
        }
    )
    return EXIT_OK


def cmd_tune(cfg: ExperimentConfig):
    data, truth = gen_scenario(replace(cfg.scenario, seed=cfg.seed))
    run = replace(cfg.run, seed=cfg.seed)
    res = grid_search(data, cfg.lambda1_grid, cfg.lambda2_grid, run, truth=truth)
    out = Emitter(cfg.output_dir, cfg)
    out.table(
        "gic_surface.csv",
        ("lambda1", "lambda2") + METRIC_COLUMNS,
        [(l1, l2) + tuple(r.as_dict()[c] for c in METRIC_COLUMNS) for l1, l2, r in res.table],
    )
    out.table("coefficients.csv", _coef_columns(res.theta.q), _coef_rows(res.theta))
    final = evaluate(res.theta, data, truth)
    l1, l2 = res.best
    if not (l1 > 0 and l2 > 0):
        log.info("selected pair (%g, %g) has a zero component", l1, l2)
    out.summary(
        {
            "mode": "tune",
            "config_hash": config_hash(cfg),
            "seed": cfg.seed,
            "selected": {"lambda1": l1, "lambda2": l2},
            "grid_points": len(res.table),
            "metrics": final.as_dict(),
        }
    )
    return EXIT_OK


def load_coefficients(path, M, p, q):
    try:
        rows = read_table_with_header(path)
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    B = np.full((M, p, q), np.nan)
    try:
        for r in rows:
            B[int(r["client"]), int(r["variable"])] = [float(r[f"y{k}"]) for k in range(q)]
    except (KeyError, ValueError, IndexError) as exc:
        raise IngestionError(f"malformed coefficient table {path}: {exc}") from exc
    if np.isnan(B).any():
        raise IngestionError(f"coefficient table {path} does not cover every (client, variable)")
    return CoefficientStack(B)


def cmd_eval(cfg: ExperimentConfig):
    """Score a coefficient table against the scenario regenerated from config and seed."""
    data, truth = gen_scenario(replace(cfg.scenario, seed=cfg.seed))
    path = cfg.coefficients or str(Path(cfg.output_dir) / "coefficients.csv")
    s = cfg.scenario
    theta = load_coefficients(path, s.M, s.p, s.q)
    m = evaluate(theta, data, truth)
    out = Emitter(cfg.output_dir, cfg)
    out.table("metrics.csv", METRIC_COLUMNS, [tuple(m.as_dict()[c] for c in METRIC_COLUMNS)])
    out.summary({"mode": "eval", "config_hash": config_hash(cfg), "seed": cfg.seed, "coefficients": path, "metrics": m.as_dict()})
    return EXIT_OK


def heldout_mse(theta_m, d):
    """Mean over test rows of ``||y - Theta^T x||^2 / q`` on raw rows."""
    X, Y = d.raw()
    R = Y - X @ theta_m
    return float(np.sum(R * R) / (X.shape[0] * Y.shape[1]))


def cmd_real_data(cfg: ExperimentConfig):
    rd = cfg.real_data
    data, info = ingest_table(
        rd.path,
        rd.client_key,
        rd.responses,
        knn_k=rd.knn_k,
        predictor_columns=rd.predictors or None,
        delimiter=rd.delimiter,
        min_rows=rd.min_rows,
        return_table=True,
    )
    train, test = split_clients(data, rd.test_fraction, cfg.seed)
    run = replace(cfg.run, seed=cfg.seed)
    out = Emitter(cfg.output_dir, cfg)
    fits = {}
    selected = None
    for method in cfg.methods:
        if method == "oracle":
            log.info("oracle skipped: the grouping of real data is unknown")
            continue
        theta, _, extra = fit_method(method, train, run, cfg)
        selected = extra.get("selected", selected)
        fits[method] = theta.blocks
    rows = []
    for m, (tr, te) in enumerate(zip(train, test)):
        Xtr, Ytr = tr.raw()
        Xte, Yte = te.raw()
        base = float(np.mean((Yte - Ytr.mean(axis=0)) ** 2))
        rows.append((info["clients"][m], tr.n_raw, te.n_raw, "mean", base))
        for method, B in fits.items():
            rows.append((info["clients"][m], tr.n_raw, te.n_raw, method, heldout_mse(B[m], te)))
    out.table("heldout.csv", ("client", "n_train", "n_test", "method", "mse"), rows)
    means = {}
    for method in ["mean"] + list(fits):
        means[method] = float(np.mean([r[4] for r in rows if r[3] == method]))
    out.summary(
        {
            "mode": "real-data",
            "config_hash": config_hash(cfg),
            "seed": cfg.seed,
            "clients": len(data),
            "p": data[0].p,
            "q": data[0].q,
            "selected": selected,
            "mean_heldout_mse": means,
        }
    )
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "tune": cmd_tune,
    "eval": cmd_eval,
    "real-data": cmd_real_data,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="rowfed", description=__doc__.splitlines()[0])
    ap.add_argument("verb", choices=MODES)
    ap.add_argument("--config", help="INI config file (defaults used when omitted)")
    ap.add_argument("--seed", type=int, help=f"master seed; overrides the config and ${SEED_ENV}")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--workers", type=int, help="concurrent replications")
    ap.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args) -> ExperimentConfig:
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise IngestionError(f"cannot read config {args.config}: {exc}") from exc
    cfg = parse_config(text)
    cfg = replace(cfg, mode=args.verb)
    env = os.environ.get(SEED_ENV)
    if env is not None and args.seed is None:
        try:
            cfg = replace(cfg, seed=int(env))
        except ValueError as exc:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
        log.warning("seed overridden by %s=%s", SEED_ENV, env)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(serialize_config(cfg))
            return EXIT_OK
        return COMMANDS[cfg.mode](cfg)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (IngestionError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
