"""Time the compiled and numpy kernel backends side by side.

Run ``python benchmarks/bench_kernels.py``; each row reports the best of
several repeats per backend and the speedup of the compiled one.  Outputs
of both backends are compared before timing.
"""
import argparse
import timeit

import numpy as np

from mlsp.kernels import backends


def cases(rng):
    block = rng.normal(size=(35, 47, 768)).astype(np.float32)
    small = rng.normal(size=(8, 8, 2048)).astype(np.float32)
    values = rng.normal(scale=4.0, size=25 * 10048).astype(np.float32)
    bits = np.ascontiguousarray(values.astype(np.float16).view(np.uint16))
    planes = rng.uniform(size=(384, 512, 6)).astype(np.float64)
    return [
        ("area_resize 35x47x768 -> 5x5", "area_resize", (block, 5, 5)),
        ("area_resize 8x8x2048 -> 5x5", "area_resize", (small, 5, 5)),
        ("fp16_encode 251,200 values", "fp16_encode", (values,)),
        ("fp16_decode 251,200 values", "fp16_decode", (bits,)),
        ("cell_means 384x512x6 / 8", "cell_means", (planes, 8)),
    ]


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-6, atol=1e-6)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=3)
    args = p.parse_args(argv)
    impls = backends()
    rng = np.random.default_rng(0)
    names = sorted(impls)
    print(f"{'kernel':32s}" + "".join(f"{n:>12s}" for n in names) + f"{'speedup':>10s}")
    for label, fn, fargs in cases(rng):
        outs = {n: getattr(impls[n], fn)(*fargs) for n in names}
        if len(names) == 2 and not _same(outs["cython"], outs["python"]):
            raise SystemExit(f"{label}: backends disagree")
        best = {}
        for n in names:
            f = getattr(impls[n], fn)
            t = timeit.repeat(lambda: f(*fargs), repeat=args.repeat, number=args.number)
            best[n] = min(t) / args.number
        row = f"{label:32s}" + "".join(f"{best[n] * 1e3:10.2f}ms" for n in names)
        if "cython" in best:
            row += f"{best['python'] / best['cython']:9.1f}x"
        print(row)
    if "cython" not in impls:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
