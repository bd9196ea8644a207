"""Wall-clock comparison of the compiled and numpy kernel backends.

Run ``python3 benchmarks/bench_kernels.py`` after building the extension
(``pip install --no-build-isolation -e .``). Each kernel is timed on the
same inputs under every available backend and the best of ``--repeat``
runs is reported together with the speed-up over the numpy fallback.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from pvhnet import kernels
from pvhnet.geometry import FusionMode, VoxelGrid, pack_views

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from scenes import sphere_views  # noqa: E402


def _best(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(size: int, channels: int, dtype):
    rng = np.random.default_rng(0)
    xp = rng.normal(size=(2, size + 2, size + 2, size + 2, channels)).astype(dtype)
    w = rng.normal(size=(3, 3, 3, channels, channels)).astype(dtype)
    g = kernels.conv3d_forward(xp, w, (1, 1, 1))
    x = rng.normal(size=(2, size, size, size, channels)).astype(dtype)
    pooled, argmax = kernels.maxpool3d_forward(x, (2, 2, 2), (2, 2, 2))
    proj, mattes, sizes = pack_views(sphere_views(4))
    lo, hi = np.full(3, -600.0), np.full(3, 600.0)
    centers = np.ascontiguousarray(VoxelGrid(np.zeros((32, 32, 32)), lo, hi).centers())
    mode = FusionMode.PRODUCT.kernel_code
    return {
        "conv3d forward": lambda: kernels.conv3d_forward(xp, w, (1, 1, 1)),
        "conv3d grad input": lambda: kernels.conv3d_backward_input(g, w, (1, 1, 1), xp.shape[1:4]),
        "conv3d grad weight": lambda: kernels.conv3d_backward_weight(xp, g, (3, 3, 3), (1, 1, 1)),
        "maxpool3d forward": lambda: kernels.maxpool3d_forward(x, (2, 2, 2), (2, 2, 2)),
        "maxpool3d backward": lambda: kernels.maxpool3d_backward(pooled, argmax, x.shape),
        "pvh 32^3 x 4 views": lambda: kernels.pvh_occupancy(centers, proj, mattes, sizes, mode),
    }


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=16, help="spatial edge of the conv inputs")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)
    kernels.set_num_threads(args.threads)
    backends = kernels.available_backends()
    table = cases(args.size, args.channels, np.dtype(args.dtype))
    print(f"size {args.size}^3, {args.channels} channels, {args.dtype}, {args.threads} thread(s)")
    print(f"{'kernel':<22}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speed-up':>12}")
    for name, fn in table.items():
        times = {}
        for b in backends:
            with kernels.use_backend(b):
                fn()  # warm-up
                times[b] = _best(fn, args.repeat)
        row = f"{name:<22}" + "".join(f"{1e3 * times[b]:>14.2f}" for b in backends)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
