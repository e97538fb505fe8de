"""Time each kernel on its numba and numpy paths.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The first numba call compiles (or loads the on-disk cache), so each path
gets one untimed warm-up call.
"""
import argparse
import timeit

import numpy as np

from retina_eit import _kernels as K


def cases(rng):
    img = rng.uniform(0, 255, (256, 256, 3))
    ys, xs = np.meshgrid(np.linspace(-3, 258, 256), np.linspace(-3, 258, 256), indexing="ij")
    lum = rng.integers(0, 256, (256, 256))
    probs = rng.dirichlet(np.ones(5), size=(90, 4))
    labels = rng.integers(0, 5, 90)
    lattice = rng.dirichlet(np.ones(4), size=1771)  # size of the 4-model lattice at step 0.05
    centres = rng.uniform(0, 64, (2, 40))
    return {
        "bilinear_sample 256x256x3": lambda flag: K.bilinear_sample(img, ys, xs, clamp=False, use_numba=flag),
        "clahe_luminance 256x256 8x8": lambda flag: K.clahe_luminance(lum, (8, 8), 2.0, use_numba=flag),
        "lattice_correct 1771 pts": lambda flag: K.lattice_correct(probs, labels, lattice, use_numba=flag),
        "stamp_discs 40 discs": lambda flag: K.stamp_discs(64, 64, centres[0], centres[1], 2.6, use_numba=flag),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if K.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':<30} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, fn in cases(np.random.default_rng(0)).items():
        best = {}
        for flag in (True, False):
            fn(flag)
            runs = timeit.repeat(lambda: fn(flag), number=1, repeat=args.repeat)
            best[flag] = 1e3 * min(runs)
        print(f"{name:<30} {best[True]:>10.2f} {best[False]:>10.2f} {best[False] / best[True]:>7.1f}x")


if __name__ == "__main__":
    main()
