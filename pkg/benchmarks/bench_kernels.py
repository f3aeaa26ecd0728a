"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Also times a short training run under each backend in a subprocess, since the
backend is fixed at import time by MDCL_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mdcl import _kernels

TRAIN_SNIPPET = """
import time
from mdcl import data, _kernels
from mdcl.model import ModelConfig, init_model
from mdcl.train import TrainConfig, train_mdcl
spec = data.SyntheticSpec(num_domains=4, num_classes=2, dim=50, per_domain_n=400, seed=0)
ds = data.seed_labels(data.generate_synthetic(spec), 0.05, seed=0)
cfg = ModelConfig(input_dim=50, num_domains=4, num_classes=2)
t = TrainConfig.from_preset("mnist_usps")
t.max_epochs, t.iters_per_epoch = 10, 10
train_mdcl(init_model(cfg), ds, t)  # warm-up (jit compile)
t0 = time.perf_counter()
train_mdcl(init_model(cfg), ds, t)
print(_kernels.BACKEND, time.perf_counter() - t0)
"""


def best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench_contrastive(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for m in (16, 64, 256):
        u = rng.normal(size=(m, 32))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        lab = rng.integers(0, 2, size=m)
        pos = (lab[:, None] == lab[None, :]) & ~np.eye(m, dtype=bool)
        t_np = best(lambda: _kernels.contrastive_np(u, pos, 0.1), repeat, 50)
        t_nb = best(lambda: _kernels.contrastive_nb(u, pos, 0.1), repeat, 50) if _kernels.HAVE_NUMBA else float("nan")
        rows.append(("contrastive", m, t_np, t_nb))
    return rows


def bench_margins(repeat):
    rng = np.random.default_rng(1)
    rows = []
    for n in (100, 10_000, 200_000):
        p = rng.dirichlet(np.ones(4), size=n)
        t_np = best(lambda: _kernels.margins_np(p), repeat, 20)
        t_nb = best(lambda: _kernels.margins_nb(p), repeat, 20) if _kernels.HAVE_NUMBA else float("nan")
        rows.append(("margins", n, t_np, t_nb))
    return rows


def bench_training():
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, MDCL_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-train", action="store_true")
    args = ap.parse_args()

    if _kernels.HAVE_NUMBA:
        # compile outside the timed region
        u = np.eye(2)
        _kernels.contrastive_nb(u, ~np.eye(2, dtype=bool), 1.0)
        _kernels.margins_nb(np.eye(2))
    print(f"active backend: {_kernels.BACKEND}")
    print(f"{'kernel':<12}{'size':>8}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, size, t_np, t_nb in bench_contrastive(args.repeat) + bench_margins(args.repeat):
        print(f"{name:<12}{size:>8}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.2f}x")
    if not args.skip_train:
        t = bench_training()
        print("training, 10 epochs x 10 iterations:")
        for backend, secs in sorted(t.items()):
            print(f"  {backend:<6} {secs:.2f}s")


if __name__ == "__main__":
    main()
