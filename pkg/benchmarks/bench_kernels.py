"""Compare the compiled and the numpy conv3x3+maxpool kernels.

Times forward and backward passes on the three attack ConvNet layers for
a batch of 32 pseudo-gradients (256x88 first-layer update), checks the two
backends agree, and prints one row per (layer, pass).

    python3 benchmarks/bench_kernels.py [--repeats 5] [--batch 32]
"""
import argparse
import time

import numpy as np

from fedleak import kernels

LAYERS = [("conv1", (1, 256, 88), 4), ("conv2", (4, 127, 43), 8), ("conv3", (8, 62, 20), 16)]


def _time(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)
    try:
        fast = kernels.backend_module("cython")
    except ImportError:
        print("compiled kernels are not built; nothing to compare")
        return 1
    slow = kernels.backend_module("numpy")
    rng = np.random.default_rng(0)
    print(f"{'layer':<6} {'pass':<8} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}  max |diff|")
    total = {"numpy": 0.0, "cython": 0.0}
    for name, (cin, h, w), cout in LAYERS:
        x = rng.normal(size=(args.batch, cin, h, w)).astype(np.float32)
        wt = (rng.normal(size=(cout, cin, 9)) / np.sqrt(9 * cin)).astype(np.float32)
        pf, af = fast.conv3x3_pool_forward(x, wt)
        ps, _ = slow.conv3x3_pool_forward(x, wt)
        d = rng.normal(size=pf.shape).astype(np.float32)
        need_dx = cin > 1
        dwf, _ = fast.conv3x3_pool_backward(x, wt, d, af, need_dx)
        dws, _ = slow.conv3x3_pool_backward(x, wt, d, af, need_dx)
        rows = [
            ("forward", lambda m: m.conv3x3_pool_forward(x, wt), float(np.abs(pf - ps).max())),
            ("backward", lambda m: m.conv3x3_pool_backward(x, wt, d, af, need_dx), float(np.abs(dwf - dws).max())),
        ]
        for label, call, diff in rows:
            ts = _time(lambda: call(slow), args.repeats)
            tf = _time(lambda: call(fast), args.repeats)
            total["numpy"] += ts
            total["cython"] += tf
            print(f"{name:<6} {label:<8} {ts * 1e3:9.2f} {tf * 1e3:10.2f} {ts / tf:7.1f}x  {diff:.1e}")
    print(f"{'total':<15} {total['numpy'] * 1e3:9.2f} {total['cython'] * 1e3:10.2f} "
          f"{total['numpy'] / total['cython']:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
