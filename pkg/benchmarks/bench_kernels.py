"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 50]

Each kernel is first checked for agreement between the two paths, then timed
on representative shapes. A final section times a whole simulation in a
subprocess with ``AFLSIM_DISABLE_JIT=1`` against one with numba enabled.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from aflsim import kernels

SIM_SNIPPET = """
import time
from aflsim.experiments import make_run_spec, execute_run, SuiteParams
spec = make_run_spec(kind="{kind}", n=50, T=2000, suite=SuiteParams({suite}){extra})
execute_run(spec)  # warm-up: compile / suite build
t0 = time.perf_counter()
execute_run(spec)
print(time.perf_counter() - t0)
"""


def cases(rng):
    n, d = 100, 50
    rows = rng.standard_normal((n, d))
    mask = rng.random(n) < 0.7
    A = rng.standard_normal((n, 20, 20))
    centers = rng.standard_normal((n, 20))
    W = rng.standard_normal((n, 20))
    X = np.ascontiguousarray(np.hstack([rng.standard_normal((64, 10)), np.ones((64, 1))]))
    y = rng.integers(0, 10, 64)
    Wm = rng.standard_normal((11, 10))
    v = rng.standard_normal(1000)
    lo, scale = float(v.min()), float(v.max() - v.min()) / 255.0
    u = rng.random(1000)
    codes = kernels.stochastic_round_codes(v, lo, scale, u)
    return {
        "masked_mean": (kernels.masked_mean, (rows, mask)),
        "batched_quadratic_grad": (kernels.batched_quadratic_grad, (A, centers, W)),
        "softmax_xent": (kernels.softmax_xent, (X, y, Wm)),
        "stochastic_round_codes": (kernels.stochastic_round_codes, (v, lo, scale, u)),
        "dequantize_codes": (kernels.dequantize_codes, (codes, lo, scale)),
    }


def _close(a, b):
    if isinstance(a, tuple):
        return all(_close(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-10, atol=1e-12)


def bench_kernels(repeat):
    print(f"numba available: {kernels.HAS_NUMBA}")
    print(f"{'kernel':<26}{'numba us':>12}{'numpy us':>12}{'speedup':>10}  agree")
    for name, (fn, args) in cases(np.random.default_rng(0)).items():
        fallback = getattr(fn, "__wrapped_fallback__", fn)
        fn(*args)  # compile
        agree = _close(fn(*args), fallback(*args))
        t_jit = min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=5)) / repeat * 1e6
        t_np = min(timeit.repeat(lambda: fallback(*args), number=repeat, repeat=5)) / repeat * 1e6
        print(f"{name:<26}{t_jit:>12.1f}{t_np:>12.1f}{t_np / t_jit:>10.2f}  {agree}")


def bench_simulation():
    print()
    print(f"{'simulation (n=50, T=2000)':<40}{'numba s':>10}{'numpy s':>10}")
    for label, kind, suite in [
        ("ace_direct / quadratic d=10", "ace_direct", "dim=10"),
        ("fedbuff / quadratic d=10", "fedbuff", "dim=10"),
        ("ace_direct / logistic minibatch", "ace_direct", "kind='logistic', noise_model='minibatch'"),
    ]:
        extra = ", M=10, concurrency=20" if kind == "fedbuff" else ""
        code = SIM_SNIPPET.format(kind=kind, suite=suite, extra=extra)
        times = []
        for disable in ("0", "1"):
            env = dict(os.environ, AFLSIM_DISABLE_JIT=disable)
            out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
            times.append(float(out.stdout.strip().splitlines()[-1]))
        print(f"{label:<40}{times[0]:>10.3f}{times[1]:>10.3f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--no-sim", action="store_true", help="skip the end-to-end simulation timings")
    a = ap.parse_args()
    bench_kernels(a.repeat)
    if not a.no_sim:
        bench_simulation()
