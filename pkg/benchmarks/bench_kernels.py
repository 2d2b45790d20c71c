"""Compare the compiled and numpy Hamiltonian kernels on random batches.

    python3 benchmarks/bench_kernels.py --batch 20000 --m 2 --repeat 5
"""

import argparse
import time

import numpy as np

from rsopt import _backend, _hampy
from rsopt.constraints import ConstraintSet, exp_batch, log_batch, power_batch


def families(m):
    return {
        "unconstrained": ConstraintSet.unconstrained(m),
        "no-shorting": ConstraintSet.no_shorting(m),
        "box": ConstraintSet.box(np.full(m, -0.5), np.full(m, 1.5), 0.0, 2.0),
        "budget-simplex": ConstraintSet.budget_simplex(m),
        "half-space": ConstraintSet.half_space(np.linspace(1.0, -0.5, m), 0.3, 1.0),
    }


def inputs(rng, B, m):
    sig = np.eye(m) * rng.uniform(0.2, 0.4, (B, m, 1)) + np.tril(rng.uniform(-0.05, 0.05, (B, m, m)), -1)
    return dict(state=rng.uniform(0.5, 3.0, B), grad=rng.uniform(-1, 1, (B, m)), sigma=sig,
                b=rng.uniform(-0.05, 0.15, (B, m)))


def run_case(kind, theta, x):
    if kind == "power":
        return power_batch(theta, 0.5, x["state"], x["grad"], x["sigma"], x["b"])
    if kind == "log":
        return log_batch(theta, x["state"], x["grad"], x["sigma"], x["b"])
    return exp_batch(theta, 1.0, x["state"], x["grad"], x["sigma"], x["b"])


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=20000)
    ap.add_argument("--m", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if _backend.BACKEND != "compiled":
        raise SystemExit("compiled kernel not available; build with `pip install -e . --no-build-isolation`")
    compiled = _backend.solve_batch
    x = inputs(np.random.default_rng(args.seed), args.batch, args.m)

    print(f"batch={args.batch} m={args.m} best of {args.repeat}")
    print(f"{'utility':8s} {'family':15s} {'compiled ms':>12s} {'numpy ms':>10s} {'speedup':>8s} {'max |dv|':>9s}")
    for kind in ("power", "log", "exp"):
        for name, theta in families(args.m).items():
            _backend.solve_batch = compiled
            fast = run_case(kind, theta, x)
            t_fast = best_time(lambda: run_case(kind, theta, x), args.repeat)
            _backend.solve_batch = _hampy.solve_batch
            slow = run_case(kind, theta, x)
            t_slow = best_time(lambda: run_case(kind, theta, x), args.repeat)
            _backend.solve_batch = compiled
            dv = float(np.max(np.abs(fast.value - slow.value)))
            print(f"{kind:8s} {name:15s} {1e3 * t_fast:12.2f} {1e3 * t_slow:10.2f} "
                  f"{t_slow / t_fast:8.1f} {dv:9.1e}")


if __name__ == "__main__":
    main()
