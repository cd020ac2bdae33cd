"""Compiled vs pure-Python relation-solver kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--number 2000]

Times simplex projection and one full per-row PGD solve at several sizes and
prints microseconds per call and the speedup.
"""
import argparse
import timeit

import numpy as np

from amtnn import kernels


def cases(rng):
    for T in (3, 10, 50):
        v = rng.normal(size=T).tolist()
        c = rng.uniform(0, 2, size=T).tolist()
        start = [1.0 / T] * T
        yield f"project_simplex T={T}", lambda impl, v=v: impl.project_simplex(v)
        yield f"pgd_row T={T}", lambda impl, c=c, s=start: impl.pgd_row(c, 0.7, 0.3, 1e-10, 1000, s)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=2000)
    args = parser.parse_args(argv)
    compiled = kernels.compiled_impl()
    if compiled is None:
        raise SystemExit("compiled extension not built; run: pip install -e . --no-build-isolation")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'compiled us':>14}{'python us':>14}{'speedup':>10}")
    for name, call in cases(rng):
        times = []
        for impl in (compiled, kernels.python_impl):
            best = min(timeit.repeat(lambda: call(impl), repeat=args.repeat, number=args.number))
            times.append(best / args.number * 1e6)
        print(f"{name:<24}{times[0]:>14.2f}{times[1]:>14.2f}{times[1] / times[0]:>9.1f}x")


if __name__ == "__main__":
    main()
