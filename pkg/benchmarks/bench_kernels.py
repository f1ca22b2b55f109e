"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from diffreg._kernels import _pykernels

try:
    from diffreg._kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    feats = rng.normal(size=(20000, 32))
    cand_small = np.sort(rng.choice(20000, 150, replace=False)).astype(np.int64)
    cand_large = np.arange(20000, dtype=np.int64)
    q = rng.normal(size=32)
    res = rng.normal(0, 4, 2000)
    grid = np.linspace(-25, 25, 2001)
    return {
        "pool: 150 candidates, P=30": lambda k: k.nearest_pool(feats, cand_small, q, 30),
        "pool: 20000 candidates, P=30": lambda k: k.nearest_pool(feats, cand_large, q, 30),
        "kde: 2000 residuals x 2001 points": lambda k: k.kde_density(grid, res, 0.7),
        "kde: 2000 residuals x 1 point": lambda k: k.kde_density(np.float64(0.3), res, 0.7),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy timings are shown")
    backends = {"numpy": _pykernels} | ({"cython": _ckernels} if _ckernels else {})
    print(f"{'case':38s} " + " ".join(f"{b:>12s}" for b in backends) + ("      speedup" if _ckernels else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for b, mod in backends.items():
            number = 20
            times[b] = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
        line = f"{name:38s} " + " ".join(f"{times[b] * 1e3:10.3f}ms" for b in backends)
        if _ckernels:
            line += f"  {times['numpy'] / times['cython']:10.1f}x"
        print(line)


if __name__ == "__main__":
    main()
