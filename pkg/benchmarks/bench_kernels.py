"""Time the compiled recurrences against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``; prints one CSV row per kernel.
"""

import argparse
import time

import numpy as np

from gla_icl import _kernels_py
from gla_icl.task_gen import keyed_rng

try:
    from gla_icl import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(trials, length, d):
    rng = keyed_rng(0)
    w0 = rng.standard_normal((trials, d))
    innov = 0.1 * rng.standard_normal((trials, length, d))
    x = rng.standard_normal((trials, length, d))
    v = rng.standard_normal((trials, length, d + 1))
    k = rng.standard_normal((trials, length, d + 1))
    q = rng.standard_normal((trials, length, d + 1))
    return {
        "gla_scan": lambda m: m.gla_scan(v, k, q, 0.9),
        "lms": lambda m: m.lms_sq_errors(w0, innov, x, 0.95, 0.01),
        "rls": lambda m: m.rls_sq_errors(w0, innov, x, 0.95, 0.98, 1e-2),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trials", type=int, default=500)
    parser.add_argument("--length", type=int, default=1000)
    parser.add_argument("--d", type=int, default=10)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)
    print("kernel,python_s,compiled_s,speedup")
    for name, fn in cases(args.trials, args.length, args.d).items():
        py = best_of(lambda: fn(_kernels_py), args.repeats)
        if compiled is None:
            print(f"{name},{py:.4f},nan,nan")
            continue
        co = best_of(lambda: fn(compiled), args.repeats)
        print(f"{name},{py:.4f},{co:.4f},{py / co:.2f}")


if __name__ == "__main__":
    main()
