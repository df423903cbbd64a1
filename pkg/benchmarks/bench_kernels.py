"""Compiled kernels versus the numpy fallback.

Times each hot kernel on both backends, then one training epoch of the
desk network with each backend swapped in.  Usage:

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from trojscope import _kernels_py, kernels, netcore
from trojscope import synthdata as sd

try:
    from trojscope import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(rng):
    x = rng.random((32, 32, 32, 8), dtype=np.float32)
    cols = _kernels_py.im2col(x, 3, 1, 1)
    pooled, arg = _kernels_py.maxpool2(x)
    base = rng.random((64, 64, 3))
    patch = rng.random((12, 16, 3))
    mask = rng.random((12, 16)) > 0.3
    return {
        "im2col 32x32x32x8 k3": lambda m: m.im2col(x, 3, 1, 1),
        "col2im 32x32x32x8 k3": lambda m: m.col2im(cols, x.shape, 3, 1, 1),
        "maxpool2 32x32x32x8": lambda m: m.maxpool2(x),
        "maxpool2 backward": lambda m: m.maxpool2_backward(pooled, arg, x.shape),
        "masked_ssd 64x64 / 12x16": lambda m: m.masked_ssd(base, patch, mask),
    }


def epoch_time(backend, data):
    names = ("im2col", "col2im", "maxpool2", "maxpool2_backward", "masked_ssd")
    saved = {n: getattr(kernels, n) for n in names}
    for n in names:
        setattr(kernels, n, getattr(backend, n))
    try:
        net = netcore.desk_net(data.n_classes, (32, 32, 3), seed=0)
        cfg = netcore.TrainConfig(epochs=1, seed=0)
        t = time.perf_counter()
        netcore.train(net, data.train_x, data.train_y, cfg)
        return time.perf_counter() - t
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the fallback is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fn in kernel_cases(rng).items():
        c = best_of(lambda: fn(_ckernels), args.repeat)
        py = best_of(lambda: fn(_kernels_py), args.repeat)
        print(f"{name:28s} {c * 1e3:10.3f} {py * 1e3:10.3f} {py / c:7.1f}x")
    data = sd.gen_faces(1)
    c = epoch_time(_ckernels, data)
    py = epoch_time(_kernels_py, data)
    print(f"{'training epoch (720 images)':28s} {c * 1e3:10.1f} {py * 1e3:10.1f} {py / c:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
