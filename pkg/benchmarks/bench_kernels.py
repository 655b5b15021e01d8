"""Time the compiled and numpy im2col/col2im kernels on network-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so the comparison does not depend on
which one ``mgbp.kernels`` selected.
"""
import argparse
import timeit

import numpy as np

from mgbp import _kernels_py

try:
    from mgbp import _ckernels
except ImportError:
    _ckernels = None

CASES = [
    # (N, C, T, H, W), kernel, stride
    ((1, 16, 1, 66, 66), (1, 4, 4), (1, 2, 2)),
    ((1, 32, 1, 34, 34), (1, 3, 3), (1, 1, 1)),
    ((1, 8, 7, 18, 18), (3, 4, 4), (1, 2, 2)),
]


def out_extent(shape, kernel, stride):
    return tuple((n - k) // s + 1 for n, k, s in zip(shape[2:], kernel, stride))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = {"python": _kernels_py}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'case':<28}{'kernel':<8}" + "".join(f"{b:>12}" for b in backends) + "   speedup")
    for shape, kernel, stride in CASES:
        x = rng.standard_normal(shape)
        ext = out_extent(shape, kernel, stride)
        cols = _kernels_py.im2col(x, kernel, stride, ext)
        for name in ("im2col", "col2im"):
            times = {}
            for b, mod in backends.items():
                if name == "im2col":
                    fn = lambda mod=mod: mod.im2col(x, kernel, stride, ext)  # noqa: E731
                else:
                    fn = lambda mod=mod: mod.col2im(cols, shape, kernel, stride, ext)  # noqa: E731
                times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
            speed = (f"{times['python'] / times['cython']:9.2f}x" if "cython" in times else "")
            print(f"{str(shape):<28}{name:<8}" + "".join(f"{t:>10.3f}ms" for t in times.values())
                  + "  " + speed)


if __name__ == "__main__":
    main()
