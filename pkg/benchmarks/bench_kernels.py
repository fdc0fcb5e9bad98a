#!/usr/bin/env python3
"""Benchmark the compiled kernel extension against the numpy fallback.

Times the primitive kernels and the full denoiser forward/backward on a
training-shaped workload, printing one row per (operation, backend) plus
the speedup. Run from anywhere after installing the package:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from pderoll import kernels as K
from pderoll import net


def timeit(fn, repeats):
    fn()   # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench(name, make_fn, repeats):
    times = {}
    for backend in sorted(K._BACKENDS):
        K.set_backend(backend)
        times[backend] = timeit(make_fn(), repeats)
    base = times.get("numpy")
    for backend, t in sorted(times.items()):
        speed = f"{base / t:5.2f}x vs numpy" if backend != "numpy" else ""
        print(f"{name:34s} {backend:6s} {t * 1e3:9.3f} ms  {speed}")
    return times


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    print(f"extension built: {K.HAVE_EXT}")
    if not K.HAVE_EXT:
        print("compiled backend unavailable; numbers below are fallback-only")

    x32 = rng.standard_normal((16, 32, 32, 32)).astype(np.float32)
    bench("im2col 3x3 (16,32,32,32) f32", lambda: (lambda: K.im2col(x32, 3)),
          args.repeats)
    v = rng.standard_normal((16, 32, 32, 32)).astype(np.float32)
    bench("gelu+grad fused f32", lambda: (lambda: K.gelu_with_grad(v)),
          args.repeats)

    # full training step: default-shape denoiser on a batch of segments
    cfg = net.NetConfig(frames=10, channels=2, hidden_channels=32, depth=4,
                        embed_dim=16, level_scale=1000)
    params = net.init_params(cfg, 0)
    seg = rng.standard_normal((16, 10, 32, 32, 2)).astype(np.float32)
    levels = np.zeros((16, 10), dtype=np.int64)
    levels[:, 4:] = rng.integers(1, 1001, size=(16, 6))
    mask = np.arange(10) < 4
    cot = rng.standard_normal(seg.shape).astype(np.float32)

    def fwd():
        return net.forward(params, seg, levels, mask)

    def fwd_bwd():
        return net.backward(params, seg, levels, mask, cot)

    bench("denoiser forward (B=16)", lambda: fwd, max(3, args.repeats // 4))
    bench("denoiser forward+backward (B=16)", lambda: fwd_bwd,
          max(3, args.repeats // 4))
    K.set_backend("ext" if K.HAVE_EXT else "numpy")


if __name__ == "__main__":
    main()
