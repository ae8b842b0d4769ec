"""Compare the compiled and NumPy kernel backends.

    python3 benchmarks/bench_kernels.py [--M 10 --p 50 --q 20 --repeat 50]

Times each hot kernel on both backends, then a full centralized run in a
subprocess per backend (selected through ROWFED_BACKEND).
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from rowfed import kernels

FULL_RUN = """
import json, time
from rowfed import kernels
from rowfed.datagen import ScenarioSpec, gen_scenario
from rowfed.engine import run_admm_centralized
from rowfed.model import RunConfig
data, _ = gen_scenario(ScenarioSpec(M={M}, p={p}, q={q}, seed=0))
t = time.perf_counter()
theta, reps = run_admm_centralized(data, RunConfig(rounds={rounds}, early_stop=False))
print(json.dumps({{"backend": kernels.BACKEND, "seconds": time.perf_counter() - t, "checksum": float(abs(theta.theta).sum())}}))
"""


def kernel_times(M, p, q, repeat):
    rng = np.random.default_rng(0)
    theta = rng.standard_normal((M, p, q))
    A = kernels.get_backend("python").apply_A(theta)
    P = A + 0.1 * rng.standard_normal(A.shape)
    G = 0.1 * rng.standard_normal(A.shape)
    out = {}
    for name in kernels.available_backends():
        k = kernels.get_backend(name)
        cases = {
            "apply_A": lambda: k.apply_A(theta),
            "apply_At": lambda: k.apply_At(A, M, p),
            "tilde_theta": lambda: k.tilde_theta(theta, P, G, 0.5, 0.01),
            "pg_step": lambda: k.pg_step(theta, P.copy(), G.copy(), 0.5, 0.05, 0.01, kernels.MCP, 40.0),
        }
        out[name] = {c: min(timeit.repeat(f, number=1, repeat=repeat)) for c, f in cases.items()}
    return out


def full_runs(M, p, q, rounds):
    res = {}
    for name in kernels.available_backends():
        env = dict(os.environ, ROWFED_BACKEND=name)
        code = FULL_RUN.format(M=M, p=p, q=q, rounds=rounds)
        r = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        res[name] = json.loads(r.stdout)
    return res


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--M", type=int, default=10)
    ap.add_argument("--p", type=int, default=50)
    ap.add_argument("--q", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--rounds", type=int, default=300)
    a = ap.parse_args()
    kt = kernel_times(a.M, a.p, a.q, a.repeat)
    print(f"kernel times (best of {a.repeat}, ms), M={a.M} p={a.p} q={a.q}")
    names = list(kt)
    print("kernel".ljust(14) + "".join(n.rjust(12) for n in names) + ("speedup".rjust(10) if len(names) > 1 else ""))
    for c in kt[names[0]]:
        row = c.ljust(14) + "".join(f"{kt[n][c] * 1e3:12.3f}" for n in names)
        if len(names) > 1:
            row += f"{kt['python'][c] / kt['cython'][c]:10.1f}x"
        print(row)
    fr = full_runs(a.M, a.p, a.q, a.rounds)
    print(f"\nfull run, {a.rounds} rounds")
    for n, r in fr.items():
        print(f"  {n:8s} {r['seconds']:8.3f} s  checksum {r['checksum']:.12g}")


if __name__ == "__main__":
    main()
