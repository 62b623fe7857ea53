"""Compare the compiled kernel extension against the numpy fallback.

Times the elementwise hot kernels at training-relevant sizes plus a whole
training step at two representative widths, under each available backend.

Run:  python3 benchmarks/bench_kernels.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from metabnn import backend
from metabnn.data import LabeledDataset
from metabnn.meta import MetaConfig, TrainState, train_step
from metabnn.nn import AdamState, BnnModel


def timeit(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for n in (512 * 512, 1024 * 1024):
        for dtype in (np.float32, np.float64):
            w = rng.standard_normal(n).astype(dtype)
            u = rng.standard_normal(n).astype(dtype)
            g = rng.standard_normal(n).astype(dtype)
            state = AdamState.for_param(w)
            cases = {
                "binarize": lambda: backend.binarize(w),
                "adam_step": lambda: backend.adam_step(
                    state.m1, state.m2, g, 1, 0.9, 0.999, 1e-8),
                "metaplastic": lambda: backend.metaplastic_update(
                    w.copy(), u, 1.35, 0.01),
                "hardtanh_gate": lambda: backend.hardtanh_gate(g, u),
                "ewc_accum": lambda: backend.ewc_accum(
                    g.copy(), w, u, np.abs(u), 5e-3),
            }
            for name, fn in cases.items():
                per_backend = {}
                for b in backend.available_backends():
                    backend.set_backend(b)
                    per_backend[b] = timeit(fn, repeats)
                rows.append((name, n, np.dtype(dtype).name, per_backend))
    return rows


def bench_train_step(repeats):
    rng = np.random.default_rng(1)
    rows = []
    for hidden in (512, 1024):
        batch = rng.uniform(-1, 1, (100, 784)).astype(np.float32)
        labels = rng.integers(0, 10, 100)
        per_backend = {}
        for b in backend.available_backends():
            backend.set_backend(b)
            model = BnnModel.create((784, hidden, hidden, 10), seed=0)
            opt = TrainState.for_model(model)
            cfg = MetaConfig(m=1.35, eta=0.01)
            per_backend[b] = timeit(
                lambda: train_step(model, batch, labels, opt, cfg), repeats)
        rows.append((f"train_step hidden={hidden}", 0, "float32", per_backend))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    initial = backend.active_backend()
    names = backend.available_backends()
    print(f"backends: {names}")
    header = f"{'kernel':<24} {'n':>9} {'dtype':<8}" + "".join(
        f" {b + ' (ms)':>14}" for b in names) + "   speedup"
    print(header)
    print("-" * len(header))
    for name, n, dtype, per_backend in bench_kernels(args.repeats) + \
            bench_train_step(max(3, args.repeats // 5)):
        cells = "".join(f" {per_backend[b] * 1e3:>14.3f}" for b in names)
        if "compiled" in per_backend:
            speedup = per_backend["numpy"] / per_backend["compiled"]
            note = f"   {speedup:>5.2f}x"
        else:
            note = "   (numpy only)"
        print(f"{name:<24} {n:>9} {dtype:<8}{cells}{note}")
    backend.set_backend(initial)


if __name__ == "__main__":
    main()
