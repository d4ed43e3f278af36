"""Compare the numba and numpy kernel paths.

Part 1 times each kernel pair on shapes taken from the temporal encoder and
the transformer's normalization layers. Part 2 times a full training step in
a subprocess per ``MTEEG_KERNELS`` setting, which is what users actually feel.

    python3 benchmarks/bench_kernels.py [--repeats 20]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from mteeg import _kernels as K


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    # first conv block on a batch of 8 x 23-channel x 10-patch inputs
    n, cin, cout, k, s, L = 8 * 23 * 10, 1, 8, 15, 8, 200
    xp = rng.standard_normal((n, cin, L + 2 * (k // 2)))
    w = rng.standard_normal((cout, cin, k))
    y = K.conv1d_fwd_numpy(xp, w, s)
    g = rng.standard_normal(y.shape)
    # later conv block
    xp2 = rng.standard_normal((n, 8, 25 + 2))
    w2 = rng.standard_normal((8, 8, 3))
    g2 = rng.standard_normal(K.conv1d_fwd_numpy(xp2, w2, 1).shape)
    # layer norm over tokens
    x = rng.standard_normal((8 * 230, 64))
    xh, rs = K.rownorm_fwd_numpy(x, 1e-5)
    gx = rng.standard_normal(x.shape)
    return [
        ("conv1d_fwd k15 s8", lambda m: m.conv1d_fwd(xp, w, s), "conv1d_fwd"),
        ("conv1d_bwd_input k15 s8", lambda m: m.conv1d_bwd_input(g, w, s, xp.shape[2]), "conv1d_bwd_input"),
        ("conv1d_bwd_weight k15 s8", lambda m: m.conv1d_bwd_weight(g, xp, k, s), "conv1d_bwd_weight"),
        ("conv1d_fwd k3 s1", lambda m: m.conv1d_fwd(xp2, w2, 1), "conv1d_fwd"),
        ("conv1d_bwd_input k3 s1", lambda m: m.conv1d_bwd_input(g2, w2, 1, xp2.shape[2]), "conv1d_bwd_input"),
        ("conv1d_bwd_weight k3 s1", lambda m: m.conv1d_bwd_weight(g2, xp2, 3, 1), "conv1d_bwd_weight"),
        ("rownorm_fwd 1840x64", lambda m: m.rownorm_fwd(x, 1e-5), "rownorm_fwd"),
        ("rownorm_bwd 1840x64", lambda m: m.rownorm_bwd(gx, xh, rs), "rownorm_bwd"),
    ]


class _Path:
    def __init__(self, suffix):
        self.suffix = suffix

    def __getattr__(self, name):
        return getattr(K, f"{name}_{self.suffix}")


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
    return float(np.max(np.abs(a - b)))


STEP_SNIPPET = """
import time, numpy as np
from mteeg.backbone import BackboneConfig
from mteeg.model import build_model, TaskSpec
from mteeg.trainer import AdamW, Batch, train_step
cfg = BackboneConfig(d=64, heads=4, layers=4)
m = build_model(cfg, [TaskSpec(1, "t", 2)], "dc", seed=0)
rng = np.random.default_rng(0)
x = rng.standard_normal((8, 23, 10, 200))
b = Batch(1, x, np.array([0, 1] * 4), [f"S{i}" for i in range(23)])
opt = AdamW()
train_step(m, b, 1e-3, opt)
t = []
for _ in range({repeats}):
    t0 = time.perf_counter(); train_step(m, b, 1e-3, opt); t.append(time.perf_counter() - t0)
print(min(t))
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--step-repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    nb, npy = _Path("numba"), _Path("numpy")

    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for label, call, _ in kernel_cases(rng):
        call(nb)  # compile
        diff = _max_diff(call(nb), call(npy))
        t_np = best_of(lambda: call(npy), args.repeats)
        t_nb = best_of(lambda: call(nb), args.repeats)
        print(f"{label:28s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f} {diff:11.2e}")

    print()
    print("train step, d=64, 4 layers, batch 8 x 23 ch x 10 patches (best of %d):" % args.step_repeats)
    for backend in ("numpy", "numba"):
        env = dict(os.environ, MTEEG_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.replace("{repeats}", str(args.step_repeats))], env=env,
                             capture_output=True, text=True, check=True)
        print(f"  {backend:6s} {float(out.stdout.strip()) * 1e3:9.1f} ms")


if __name__ == "__main__":
    main()
