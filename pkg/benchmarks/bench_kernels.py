"""Compare the numba and pure-numpy packed ternary kernels.

    python benchmarks/bench_kernels.py [--rows 1024 --cols 1024 --vecs 64 --trials 7]

Each backend runs the same packed layer on the same activation codes; the
integer accumulators must agree bit-for-bit before any timing is reported.
Set TQAT_NUMBA=0 to make numpy the default backend elsewhere in the package.
"""

import argparse
import statistics
import time

import numpy as np

from tqat.infer import kernels


def timeit(fn, trials):
    fn()  # warm-up (and JIT compile for numba)
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=1024)
    ap.add_argument("--cols", type=int, default=1024)
    ap.add_argument("--vecs", type=int, nargs="+", default=[1, 16, 64])
    ap.add_argument("--trials", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    trits = rng.integers(-1, 2, size=args.rows * args.cols).astype(np.int8)
    print(f"backends available: {', '.join(kernels.BACKENDS)}; default: {kernels.default_backend()}")
    print(f"layer {args.rows}x{args.cols}, median of {args.trials}\n")
    print(f"{'kernel':<22}{'backend':<8}{'ms':>10}{'speedup':>10}")

    packed = {be: kernels.pack_trits(trits, be) for be in kernels.BACKENDS}
    assert all(np.array_equal(packed[kernels.BACKENDS[0]], p) for p in packed.values())
    data = packed[kernels.BACKENDS[0]]

    cases = [("pack", lambda be: kernels.pack_trits(trits, be)),
             ("unpack", lambda be: kernels.unpack_codes(data, trits.size, be))]
    for n in args.vecs:
        q = rng.integers(-128, 128, size=(n, args.cols)).astype(np.int32)
        ref = kernels.ternary_matmul(data, args.rows, args.cols, q, "numpy")
        for be in kernels.BACKENDS:
            got = kernels.ternary_matmul(data, args.rows, args.cols, q, be)
            assert np.array_equal(got, ref), f"{be} disagrees with numpy"
        cases.append((f"matmul n={n}", lambda be, q=q: kernels.ternary_matmul(data, args.rows, args.cols, q, be)))

    for name, fn in cases:
        times = {be: timeit(lambda be=be: fn(be), args.trials) for be in kernels.BACKENDS}
        base = times["numpy"]
        for be, t in times.items():
            print(f"{name:<22}{be:<8}{1e3 * t:>10.3f}{base / t:>9.2f}x")


if __name__ == "__main__":
    main()
