#!/usr/bin/env python3
"""Time the numba kernels against the pure-numpy fallback.

Covers the three forward kernels on desknet-sized batches, one backward
kernel, and a short FxP-Flip campaign on the bundled model (the workload
that dominates real runs). JIT compilation is excluded by a warm-up call.

Usage:
    python benchmarks/bench_kernels.py [--batch N] [--repeats R] [--inj K]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from fmapguard import kernels
from fmapguard.analysis import split_dataset
from fmapguard.datasets import load_dataset
from fmapguard.formats import bundled_model_path, load_model
from fmapguard.injector import CampaignConfig, run_campaign
from fmapguard.quant import calibrate


def best_of(fn, repeats):
    fn()  # warm-up (compiles on the numba path)
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(batch, rng):
    x = rng.standard_normal((batch, 8, 10, 10)).astype(np.float32)
    w = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
    b = rng.standard_normal(16).astype(np.float32)
    g = rng.standard_normal((batch, 16, 8, 8)).astype(np.float32)
    p = rng.standard_normal((batch, 16, 8, 8)).astype(np.float32)
    d = rng.standard_normal((batch, 256)).astype(np.float32)
    dw = rng.standard_normal((10, 256)).astype(np.float32)
    db = rng.standard_normal(10).astype(np.float32)
    return {
        "conv2d": lambda: kernels.conv2d(x, w, b, 1),
        "conv2d_grad_input": lambda: kernels.conv2d_grad_input(g, w, 10, 10, 1),
        "maxpool2d": lambda: kernels.maxpool2d(p, 2, 2),
        "avgpool2d": lambda: kernels.avgpool2d(p, 2, 2),
        "dense": lambda: kernels.dense(d, dw, db),
    }


def campaign_case(inj):
    ds = load_dataset()
    net = load_model(bundled_model_path())
    prof = calibrate(net, ds.train_images)
    sp = split_dataset(net, ds.test_images, ds.test_labels, 0)
    cfg = CampaignConfig("fxp-flip", inj, master_seed=0)
    return lambda: run_campaign(net, ds.test_images, ds.test_labels, sp.ts_image_ids, cfg, prof)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--inj", type=int, default=128, help="injections per fmap for the campaign case")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.batch, rng)
    cases[f"campaign ({args.inj} inj/fmap)"] = campaign_case(args.inj)

    print(f"{'case':<28}" + "".join(f"{b:>12}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    prev = kernels.get_backend()
    try:
        for name, fn in cases.items():
            row = {}
            for b in backends:
                kernels.set_backend(b)
                row[b] = best_of(fn, args.repeats if "campaign" not in name else 1)
            line = f"{name:<28}" + "".join(f"{row[b] * 1e3:>10.2f}ms" for b in backends)
            if len(backends) > 1:
                line += f"   {row['numpy'] / row['numba']:>6.1f}x"
            print(line)
    finally:
        kernels.set_backend(prev)


if __name__ == "__main__":
    main()
