"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 1000] [--dim 64] [--repeat 5]

Prints one row per kernel with the best-of-``repeat`` time for each backend
and the speedup, after checking both backends agree on the inputs.
"""

import argparse
import timeit

import numpy as np

from vmrec import kernels
from vmrec.numerics import RngStream


def cases(n, dim, rng):
    E1, E2 = rng.normal((n, dim)), rng.normal((n, dim))
    batch = min(n, 1000)
    D = kernels.sq_dist(E1[:batch], E2[:batch], impl=kernels.backends()["python"])
    a, p, q = (rng.integers(0, n, size=n) for _ in range(3))
    S = rng.normal((n, n))
    gt = np.arange(n)
    return {
        f"sq_dist {n}x{n}x{dim}": lambda impl: kernels.sq_dist(E1, E2, impl=impl),
        f"hinge_all_pairs {batch}x{batch}": lambda impl: kernels.hinge_all_pairs(D, 0.5, impl=impl),
        f"hinge_triples {n} triples": lambda impl: kernels.hinge_triples(E1, a, p, q, 0.5, impl=impl),
        f"gt_ranks {n}x{n}": lambda impl: kernels.gt_ranks(S, gt, False, impl=impl),
    }


def _outputs(res):
    return res if isinstance(res, tuple) else (res,)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    impls = kernels.backends()
    if "cython" not in impls:
        raise SystemExit("compiled backend not built; run `pip install -e . --no-build-isolation` first")
    py, cy = impls["python"], impls["cython"]
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(args.n, args.dim, RngStream(0)).items():
        for x, y in zip(_outputs(fn(py)), _outputs(fn(cy))):
            np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-10)
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
