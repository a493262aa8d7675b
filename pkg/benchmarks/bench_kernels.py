"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-N wall time per kernel and backend, and the speed-up.
"""

import argparse
import timeit

import numpy as np

from rainreid import _kernels_py

try:
    from rainreid import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def cases(rng):
    img = rng.random((256, 128, 3))
    small = rng.random((64, 32, 3))
    q, g = rng.normal(size=(500, 256)), rng.normal(size=(400, 256))
    dist = rng.random((500, 400))
    qids = rng.integers(0, 100, 500)
    gids = rng.integers(0, 100, 400)
    return {
        "area_downsample 256x128 r=4": lambda k: k.area_downsample(img, 4),
        "bilinear_resize 64x32 -> 256x128": lambda k: k.bilinear_resize(small, 256, 128),
        "pairwise_euclidean 500x400x256": lambda k: k.pairwise_euclidean(q, g),
        "match_positions 500x400": lambda k: k.match_positions(dist, qids, gids),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    backends = [("python", _kernels_py)]
    if _kernels_c is not None:
        backends.append(("cython", _kernels_c))
    else:
        print("compiled extension not built; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} " + " ".join(f"{n:>12s}" for n, _ in backends) + "   speed-up")
    for name, fn in cases(rng).items():
        times = []
        for _, mod in backends:
            number = 3
            times.append(min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number)
        row = f"{name:36s} " + " ".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"   {times[0] / times[1]:6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
