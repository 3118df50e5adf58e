"""Time the compiled and numpy kernel backends on the same inputs.

    python3 benchmarks/bench_kernels.py [--rows 64] [--cols 64] [--repeat 200]

Outputs of the two backends are compared before timing; a mismatch aborts.
"""
import argparse
import timeit

import numpy as np

from mpqdm import kernels


def cases(rows, cols, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_t(4, size=(rows, cols))
    lo, hi = np.minimum(x.min(axis=1), 0), np.maximum(x.max(axis=1), 0)
    qmax = np.full(rows, 7.0)
    scale = (hi - lo) / qmax
    zero = np.clip(-np.round(lo / scale), 0, qmax)
    args = (x, scale, zero, qmax)
    return {
        "round_half_away": (x,),
        "quantize_rows": args,
        "fake_quant_rows": args,
        "fake_quant_rows_ste": args,
        "kurtosis_rows": (x,),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=64)
    ap.add_argument("--cols", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)

    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled extension not built; timing the numpy backend only")
    print(f"{'kernel':<22}" + "".join(f"{name:>14}" for name in impls) + ("   speedup" if len(impls) > 1 else ""))
    for name, a in cases(args.rows, args.cols).items():
        outs = {b: getattr(m, name)(*a) for b, m in impls.items()}
        if "cython" in outs and not _same(outs["cython"], outs["python"]):
            raise SystemExit(f"{name}: backends disagree")
        times = {b: min(timeit.repeat(lambda m=m: getattr(m, name)(*a), number=args.repeat, repeat=3)) / args.repeat
                 for b, m in impls.items()}
        line = f"{name:<22}" + "".join(f"{1e6 * t:>12.1f}us" for t in times.values())
        if len(times) > 1:
            line += f"{times['python'] / times['cython']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
