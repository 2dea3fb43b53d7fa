"""Timing comparison of the compiled and numpy forward kernels.

Runs the benchmark-n8 preset's dynamics at a few ensemble sizes through both
backends and prints per-run times with the speedup ratio.  Usage::

    python benchmarks/bench_backends.py [--paths 4000] [--steps 128] [--repeat 5]
"""

import argparse
import time

import numpy as np

import spdectrl as sp
from spdectrl.backend import available_backends
from spdectrl.noise import TimeGrid


def time_run(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(paths, steps, repeat):
    config = sp.preset_config("benchmark-n8")
    config["n_steps"] = steps
    prob = sp.build_problem(config)
    grid = TimeGrid(1.0, steps)
    control = sp.ControlProcess.piecewise(grid, prob.control_set,
                                          list(config["base_intervals"]))
    noise = sp.sample_paths(prob.cov, grid, paths, prob.seed)

    rows = []
    for scheme in ("semi_implicit", "explicit"):
        for with_cost, label in ((False, "states"), (True, "cost")):
            times = {}
            for backend in ("python", "c"):
                if not available_backends()[backend]:
                    times[backend] = float("nan")
                    continue
                if with_cost:
                    fn = lambda: sp.integrate_cost(prob.coeffs, prob.family, control,
                                                   noise, scheme=scheme, backend=backend)
                else:
                    fn = lambda: sp.integrate(prob.coeffs, prob.family, control,
                                              noise, scheme=scheme, backend=backend)
                times[backend] = time_run(fn, repeat)
            rows.append((f"{scheme}/{label}", times["python"], times["c"]))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--paths", type=int, default=4000)
    parser.add_argument("--steps", type=int, default=128)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    print(f"backends available: {available_backends()}")
    print(f"ensemble: {args.paths} paths x {args.steps} steps, n = 8, "
          f"best of {args.repeat}")
    rows = bench(args.paths, args.steps, args.repeat)
    print(f"{'kernel':<22}{'python [ms]':>12}{'c [ms]':>10}{'speedup':>9}")
    for name, t_py, t_c in rows:
        ratio = t_py / t_c if t_c == t_c and t_c > 0 else float("nan")
        print(f"{name:<22}{1e3 * t_py:>12.1f}{1e3 * t_c:>10.1f}{ratio:>8.1f}x")


if __name__ == "__main__":
    main()
