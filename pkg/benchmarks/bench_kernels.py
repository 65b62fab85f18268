"""Compare the compiled and numpy recurrent-cell kernels.

Times the raw cell kernels on the first ConvLSTM layer's shapes and a full
ConvLSTM layer forward+backward pass over 128 frames, for every available
backend and both precisions.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 32]
"""
import argparse
import statistics
import time

import numpy as np

from recdevid import kernels
from recdevid import tensor as T
from recdevid.layers import ConvLSTM1D
from recdevid.tensor import Tensor


def timeit(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def bench_cell(backend, dtype, batch, repeat, rng):
    k = kernels.get_backend(backend)
    p, s, f = batch, 24, 64
    z = rng.normal(size=(p, s, 4, f)).astype(dtype)
    c_prev = rng.normal(size=(p, s, f)).astype(dtype)
    peep = rng.normal(scale=0.1, size=(3, s, f)).astype(dtype)
    gates, c, tanh_c, h = (np.empty_like(z), np.empty_like(c_prev), np.empty_like(c_prev), np.empty_like(c_prev))
    dz, dc_prev, dpeep = np.empty_like(z), np.empty_like(c_prev), np.zeros_like(peep)
    fwd = timeit(lambda: k.cell_forward(z, c_prev, peep, gates, c, tanh_c, h), repeat * 20)
    bwd = timeit(lambda: k.cell_backward(h, c, gates, c_prev, c, tanh_c, peep, dz, dc_prev, dpeep), repeat * 20)
    return fwd, bwd


def bench_layer(backend, dtype, batch, repeat, rng):
    kernels.use_backend(backend)
    with T.precision(dtype):
        layer = ConvLSTM1D(73, 1, 64, kernel=3, stride=3, rng=rng)
        x = Tensor(rng.normal(size=(128, batch, 73, 1)))
        w = Tensor(rng.normal(size=(128, batch, 24, 64)))

        def step():
            layer.zero_grad()
            T.backward(T.sum(layer(x) * w))
        return timeit(step, repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    selected = kernels.BACKEND
    backends = kernels.available_backends()
    print(f"backends available: {', '.join(backends)} (selected at import: {selected})")
    print(f"{'backend':<8} {'dtype':<8} {'cell fwd ms':>12} {'cell bwd ms':>12} {'layer f+b s':>12}")
    rows = {}
    try:
        for dtype in (np.float32, np.float64):
            for b in backends:
                fwd, bwd = bench_cell(b, dtype, args.batch, args.repeat, rng)
                layer = bench_layer(b, dtype, args.batch, args.repeat, rng)
                rows[b, dtype] = layer
                print(f"{b:<8} {np.dtype(dtype).name:<8} {fwd * 1e3:12.3f} {bwd * 1e3:12.3f} {layer:12.3f}")
    finally:
        kernels.use_backend(selected)
    if "cython" in backends:
        for dtype in (np.float32, np.float64):
            speedup = rows["python", dtype] / rows["cython", dtype]
            print(f"layer speed-up, cython over python ({np.dtype(dtype).name}): {speedup:.2f}x")


if __name__ == "__main__":
    main()
