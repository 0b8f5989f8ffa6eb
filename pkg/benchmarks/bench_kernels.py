"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--sizes 64 128 256]

Both backends are also checked for bitwise-identical output on every input.
"""

import argparse
import sys
import timeit

import numpy as np

from calibseg import _fallback
from calibseg.priors import gaussian_kernel

try:
    from calibseg import _kernels
except ImportError:
    sys.exit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")


def best_time(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.2:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def cases(sizes, rng):
    for n in sizes:
        for d in (3, 5):
            padded = np.ascontiguousarray(rng.integers(0, 4, size=(n + d - 1, n + d - 1)), dtype=np.int64)
            weights = gaussian_kernel(d, 2.0)
            yield f"window_sums {n}x{n} K=4 patch {d}", lambda m, p=padded, w=weights: m.window_sums(p, 4, w)
        mask = (rng.random((n, n)) < 0.02).astype(np.uint8)
        yield f"distance_to_mask {n}x{n}", lambda m, x=mask: m.distance_to_mask(x)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    print(f"{'operation':<34} {'cython ms':>10} {'python ms':>10} {'speedup':>8}  identical")
    for name, call in cases(args.sizes, rng):
        same = call(_kernels).tobytes() == call(_fallback).tobytes()
        fast = best_time(lambda: call(_kernels), args.repeat)
        slow = best_time(lambda: call(_fallback), args.repeat)
        print(f"{name:<34} {fast * 1e3:10.3f} {slow * 1e3:10.3f} {slow / fast:7.1f}x  {'yes' if same else 'NO'}")
        if not same:
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
