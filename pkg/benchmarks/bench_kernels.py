"""Micro and end-to-end timings for the two kernel backends.

Usage:
    python3 benchmarks/bench_kernels.py            # full comparison table
    python3 benchmarks/bench_kernels.py --reps 50  # noisier but faster

The micro section times each dense kernel on model-typical shapes against
both implementations in-process.  The end-to-end section re-launches the
interpreter with DUALDYN_KERNELS pinned (the tape binds its backend at
import) and times a short training run per backend.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dualdyn.kernels import get_impl  # noqa: E402

BATCH, WIDTH, LATENT = 64, 32, 16


def _micro_cases(rng):
    x = rng.standard_normal((BATCH, LATENT + 1))
    w = rng.standard_normal((LATENT + 1, WIDTH))
    b = rng.standard_normal(WIDTH)
    gy = rng.standard_normal((BATCH, WIDTH))
    h = rng.standard_normal((BATCH, WIDTH))
    gh = rng.standard_normal((BATCH, WIDTH))
    pos = rng.uniform(0.1, 3.0, size=(BATCH, WIDTH))
    logits = rng.standard_normal((BATCH, 2))
    glog = rng.standard_normal((BATCH, 2))
    return [
        ("affine_forward", (x, w, b)),
        ("affine_backward", (x, w, gy)),
        ("matmul_forward", (x, w)),
        ("matmul_backward", (x, w, gy)),
        ("tanh_forward", (h,)),
        ("tanh_backward", (np.tanh(h), gh)),
        ("sigmoid_forward", (h,)),
        ("sigmoid_backward", (1.0 / (1.0 + np.exp(-h)), gh)),
        ("relu_forward", (h,)),
        ("relu_backward", (h, gh)),
        ("exp_forward", (h,)),
        ("exp_backward", (np.exp(h), gh)),
        ("log_forward", (pos,)),
        ("log_backward", (pos, gh)),
        ("softmax_forward", (logits,)),
        ("softmax_backward", (np.full((BATCH, 2), 0.5), glog)),
    ]


def run_micro(reps):
    ref = get_impl("reference")
    fast = get_impl("compiled")
    rng = np.random.default_rng(0)
    rows = []
    for name, args in _micro_cases(rng):
        t_ref = min(timeit.repeat(lambda: getattr(ref, name)(*args),
                                  number=reps, repeat=5)) / reps
        t_fast = min(timeit.repeat(lambda: getattr(fast, name)(*args),
                                   number=reps, repeat=5)) / reps
        rows.append((name, t_ref * 1e6, t_fast * 1e6, t_ref / t_fast))
    print(f"{'kernel':<18} {'reference us':>13} {'compiled us':>12} {'speedup':>8}")
    for name, us_ref, us_fast, speedup in rows:
        print(f"{name:<18} {us_ref:>13.2f} {us_fast:>12.2f} {speedup:>7.2f}x")
    geo = np.exp(np.mean([np.log(r[3]) for r in rows]))
    print(f"{'geomean':<18} {'':>13} {'':>12} {geo:>7.2f}x")


_EPOCH_SCRIPT = """
import json, time
from dualdyn.config import config_from_dict
from dualdyn.experiment import run_experiment
from dualdyn.kernels import BACKEND

cfg = config_from_dict({
    "task": "classify", "epochs": 3, "batch_size": 32, "d_z": 16,
    "n_h": 32, "n_l": 2, "seed": 0, "missing_rate": 0.3,
    "dataset": {"kind": "spirals", "n": 60, "length": 30, "noise_std": 0.05},
})
t0 = time.perf_counter()
report = run_experiment(cfg)
print(json.dumps({
    "backend": BACKEND,
    "seconds": time.perf_counter() - t0,
    "final_val_loss": report["val_loss"][-1],
}))
"""


def run_end_to_end():
    print()
    print("end-to-end: 3 epochs, spirals n=60 x 30 points, cde+coupling")
    results = {}
    for backend in ("reference", "compiled"):
        env = dict(os.environ, DUALDYN_KERNELS=backend,
                   PYTHONPATH=os.pathsep.join(
                       [os.path.join(os.path.dirname(__file__), "..", "src"),
                        os.environ.get("PYTHONPATH", "")]))
        proc = subprocess.run([sys.executable, "-c", _EPOCH_SCRIPT], env=env,
                              capture_output=True, text=True)
        if proc.returncode != 0:
            print(f"{backend}: failed\n{proc.stderr}")
            continue
        payload = json.loads(proc.stdout.strip().splitlines()[-1])
        results[backend] = payload
        print(f"{backend:<10} {payload['seconds']:.2f}s "
              f"(final val loss {payload['final_val_loss']:.6f})")
    if len(results) == 2:
        ratio = results["reference"]["seconds"] / results["compiled"]["seconds"]
        print(f"compiled backend is {ratio:.2f}x the reference on the full loop")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=200,
                        help="timer iterations per kernel")
    parser.add_argument("--skip-end-to-end", action="store_true")
    args = parser.parse_args()
    run_micro(args.reps)
    if not args.skip_end_to_end:
        run_end_to_end()


if __name__ == "__main__":
    main()
