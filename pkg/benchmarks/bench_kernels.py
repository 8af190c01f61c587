"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times each hot kernel on both backends over a few sizes, checks that the
outputs agree, then times a full 9x9 layer CKA grid end to end.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from layercka import _kernels_py, cka, numerics
from layercka.activations import ActivationSet

try:
    from layercka import _ckernels
except ImportError:
    sys.exit("compiled kernels not built; run `pip install -e . --no-build-isolation` first")


def _best(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def kernel_cases(rng):
    for n in (64, 256, 1024):
        a, b = rng.normal(size=(n, n)), rng.normal(size=(n, n))
        yield "trace_product", n, (a, b)
        yield "center_gram", n, (a,)
    for L in (9, 25, 49):
        m = rng.uniform(size=(L, L))
        yield "block_profile", L, (m,)


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, size, args in kernel_cases(rng):
        py, cy = getattr(_kernels_py, name), getattr(_ckernels, name)
        np.testing.assert_allclose(np.asarray(cy(*args)), np.asarray(py(*args)), rtol=1e-10, atol=1e-10)
        t_py, t_cy = _best(lambda: py(*args), repeat), _best(lambda: cy(*args), repeat)
        rows.append({"kernel": name, "size": size, "python_s": t_py, "cython_s": t_cy,
                     "speedup": t_py / t_cy})
    return rows


def bench_grid(repeat, n=512, d=32, layers=9):
    rng = np.random.default_rng(1)
    a = ActivationSet("a", [rng.normal(size=(n, d)) for _ in range(layers)], 0)
    out = {}
    for label, mod in (("python", _kernels_py), ("cython", _ckernels)):
        numerics._kernels = mod
        out[label] = _best(lambda: cka.cka_matrix(a, a), repeat)
    return {"kernel": "cka_matrix", "size": f"{layers}x{layers}, n={n}", "python_s": out["python"],
            "cython_s": out["cython"], "speedup": out["python"] / out["cython"]}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    original = numerics._kernels
    try:
        rows = bench_kernels(args.repeat) + [bench_grid(args.repeat)]
    finally:
        numerics._kernels = original
    print(f"{'kernel':<15}{'size':>16}{'numpy (ms)':>13}{'cython (ms)':>13}{'speedup':>9}")
    for r in rows:
        print(f"{r['kernel']:<15}{str(r['size']):>16}{r['python_s'] * 1e3:>13.4f}"
              f"{r['cython_s'] * 1e3:>13.4f}{r['speedup']:>8.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
