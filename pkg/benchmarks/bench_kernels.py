"""Time the hot kernels under the numba and pure-numpy backends.

    python benchmarks/bench_kernels.py [--repeat 20]

Each backend runs in its own interpreter because the choice is fixed at
import time by ``USJEPA_NUMBA``.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _time(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def worker(repeat):
    from usjepa import _accel
    from usjepa.frames import synth_frame

    rng = np.random.default_rng(0)
    frame, region, _ = synth_frame(0, 1, size=224)
    mask = np.zeros_like(region)
    mask[100:110, 60:90] = True
    k = np.exp(-0.5 * (np.arange(-6, 7) / 3.0) ** 2)
    k /= k.sum()
    x = rng.standard_normal((32, 64, 256)).astype(np.float32)
    _, t = _accel.gelu_fwd_np(x)
    g = np.ones_like(x)
    res = {
        "backend": _accel.backend(),
        "separable_conv 224x224 k13": _time(lambda: _accel.separable_conv(frame, k), repeat),
        "jacobi_inpaint 224x224": _time(lambda: _accel.jacobi_inpaint(frame, mask), max(repeat // 4, 1)),
        "patch_any 224x224 p16": _time(lambda: _accel.patch_any(region, 16), repeat),
        "gelu_backward 32x64x256": _time(lambda: _accel.gelu_backward(g, x, t), repeat),
    }
    print(json.dumps(res))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        worker(args.repeat)
        return
    rows = {}
    for flag in ("1", "0"):
        env = dict(os.environ, USJEPA_NUMBA=flag)
        out = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(args.repeat)], env=env,
                             capture_output=True, text=True, check=True)
        res = json.loads(out.stdout.strip().splitlines()[-1])
        rows[res.pop("backend")] = res
    names = list(next(iter(rows.values())))
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for n in names:
        a = rows.get("numba", {}).get(n, float("nan")) * 1e3
        b = rows["numpy"][n] * 1e3
        print(f"{n:32s} {a:10.3f} {b:10.3f} {b / a:8.1f}x")


if __name__ == "__main__":
    main()
