"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is timed on identical inputs with both backends; outputs are
checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from sparsedetnet.kernels import get_backend
from sparsedetnet.numerics import make_rng


def cases():
    rng = make_rng(0, 77)
    H30 = rng.standard_normal((2000, 30, 20))
    G = np.einsum("bnk,bnl->bkl", H30, H30)
    b = rng.standard_normal((2000, 20))
    H8 = rng.standard_normal((2000, 8, 4))
    y8 = rng.standard_normal((2000, 8))
    H16 = rng.standard_normal((20, 20, 12))
    y16 = rng.standard_normal((20, 20))
    A = rng.standard_normal((160, 100))
    v = rng.standard_normal(100)
    return [
        ("matvec 160x100", "matvec", (A, v)),
        ("gram_batch 2000x30x20", "gram_batch", (H30,)),
        ("solve_batch 2000x20x20", "solve_batch", (G, b)),
        ("ml_search K=4 x2000", "ml_search_batch", (H8, y8)),
        ("ml_search K=12 x20", "ml_search_batch", (H16, y16)),
    ]


def _agree(a, b):
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-9, atol=1e-9)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    py, cy = get_backend("python"), get_backend("cython")
    print(f"{'kernel':<26}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for label, name, inputs in cases():
        f_py, f_cy = getattr(py, name), getattr(cy, name)
        if not _agree(f_py(*inputs), f_cy(*inputs)):
            raise SystemExit(f"{label}: backends disagree")
        number = max(1, int(0.2 / max(timeit.timeit(lambda: f_py(*inputs), number=1), 1e-6)))
        t_py = min(timeit.repeat(lambda: f_py(*inputs), number=number, repeat=args.repeat)) / number
        t_cy = min(timeit.repeat(lambda: f_cy(*inputs), number=number, repeat=args.repeat)) / number
        print(f"{label:<26}{t_py * 1e3:>12.3f}{t_cy * 1e3:>12.3f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
