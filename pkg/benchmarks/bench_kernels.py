"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--d 100000]

Prints one line per kernel with the best-of-N time for each available
backend and the speedup of the compiled one.
"""
import argparse
import timeit

import numpy as np

from edgedetect import kernels


def cases(args):
    rng = np.random.default_rng(0)
    n, f, L = args.rows, args.features, 7
    X = rng.standard_normal((n, f))
    y = rng.integers(0, L, n).astype(np.int64)
    order = rng.permutation(n).astype(np.int64)
    W0 = np.zeros((f, L))
    b0 = np.zeros(L)
    delta = rng.standard_t(3, args.d)
    thr = float(np.median(delta))
    K = args.clients
    packed_rows = np.stack([
        kernels.available_backends()["python"].sign_pack(rng.standard_normal(args.d), 0.0) for _ in range(K)
    ])

    def sgd(mod):
        W, b = W0.copy(), b0.copy()
        return lambda: mod.softmax_sgd_epoch(W, b, X, y, order, 32, 0.01, 0.005, 0.005, 0.0, W0, b0)

    return {
        "softmax_sgd_epoch": sgd,
        "sign_pack": lambda mod: (lambda: mod.sign_pack(delta, thr)),
        "unpack_signs": lambda mod: (lambda: mod.unpack_signs(packed_rows[0], args.d)),
        "sum_packed_signs": lambda mod: (lambda: mod.sum_packed_signs(packed_rows, args.d)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=3)
    ap.add_argument("--rows", type=int, default=20000)
    ap.add_argument("--features", type=int, default=20)
    ap.add_argument("--d", type=int, default=100_000, help="update length for sign kernels")
    ap.add_argument("--clients", type=int, default=25)
    args = ap.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (active: {kernels.BACKEND})")
    header = f"{'kernel':<20}" + "".join(f"{name + ' ms':>14}" for name in backends) + f"{'speedup':>10}"
    print(header)
    for name, make in cases(args).items():
        times = {}
        for bname, mod in backends.items():
            fn = make(mod)
            times[bname] = min(timeit.repeat(fn, number=args.number, repeat=args.repeat)) / args.number * 1e3
        line = f"{name:<20}" + "".join(f"{times[b]:>14.3f}" for b in backends)
        if "cython" in times:
            line += f"{times['python'] / times['cython']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
