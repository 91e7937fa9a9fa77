"""Compare the compiled and numpy convolution backends.

Usage: ``python3 benchmarks/bench_conv.py [--repeat N]``. Prints one row per
case with the best wall time of each backend, the speedup and whether the
two outputs are bitwise identical.
"""

import argparse
import timeit

import numpy as np

from gbtd import backend
from gbtd.convmap import direct_conv2d, grouped_conv2d

CASES = [
    # (name, map size, R, p, q, k)
    ("dense 3x3 16->16", 16, 1, 16, 16, 3),
    ("dense 3x3 64->64", 28, 1, 64, 64, 3),
    ("grouped 32x4 3x3", 28, 32, 4, 4, 3),
    ("grouped 8x16 5x5", 14, 8, 16, 16, 5),
]


def run(case, repeat):
    name, size, R, p, q, k = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((size, size, R * p))
    cores = [rng.standard_normal((k, k, p, q)) for _ in range(R)]
    if R == 1:
        fn = lambda b: direct_conv2d(x, cores[0], backend=b)
    else:
        fn = lambda b: grouped_conv2d(x, cores, backend=b)
    names = backend.available()
    times = {b: min(timeit.repeat(lambda: fn(b), number=1, repeat=repeat)) for b in names}
    outs = {b: fn(b) for b in names}
    same = all(np.array_equal(outs[names[0]], o) for o in outs.values())
    return name, times, same


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    names = backend.available()
    print(f"backends: {', '.join(names)}; threads: {backend.threads()}")
    print(f"{'case':<20}" + "".join(f"{n + ' (ms)':>14}" for n in names) + f"{'speedup':>10}{'bitwise':>9}")
    for case in CASES:
        name, times, same = run(case, args.repeat)
        row = f"{name:<20}" + "".join(f"{times[n] * 1e3:>14.2f}" for n in names)
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(row + f"{speed:>10.1f}{str(same):>9}")


if __name__ == "__main__":
    main()
