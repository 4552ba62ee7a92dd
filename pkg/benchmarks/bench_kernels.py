"""Time the return-map and element-stiffness kernels with numba and with plain numpy.

    python benchmarks/bench_kernels.py [--points 20000] [--repeat 5]

Also times one full plate run per backend.  The first numba call (compile
or cache load) is excluded from the kernel timings.
"""
import argparse
import time

import numpy as np

from dualplast import kernels
from dualplast.bench import run_benchmark
from dualplast.checks import benchmark_model, random_increment, random_state
from dualplast.config import RunConfig


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def make_batch(n, seed=0):
    rng = np.random.default_rng(seed)
    model = benchmark_model()
    states = [random_state(model, rng) for _ in range(n)]
    regimes = ("elastic", "plastic")
    deps = np.array([random_increment(model, s, rng, regimes[i % 2]) for i, s in enumerate(states)])
    args = (np.array([s.sigma for s in states]), np.array([s.zeta_kh for s in states]),
            np.array([s.zeta_ih for s in states]), np.array([s.alpha_ih for s in states]), deps)
    return model, args


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    model, batch = make_batch(args.points)
    params = model.kernel_params()
    rng = np.random.default_rng(1)
    B = rng.normal(size=(args.points, 3, 8))
    K = np.broadcast_to(model.C, (args.points, 3, 3)).copy()
    w = rng.uniform(size=args.points)

    backends = ["numpy"] + (["numba"] if kernels.JIT_ENABLED else [])
    rows = []
    for name in backends:
        with kernels.use_backend(name):
            kernels.return_map_batch(*[a[:4] for a in batch], params)  # warm up
            kernels.ip_stiffness(B[:4], K[:4], w[:4])
            t_rm = best_of(lambda: kernels.return_map_batch(*batch, params), args.repeat)
            t_ke = best_of(lambda: kernels.ip_stiffness(B, K, w), args.repeat)
            t_run = best_of(lambda: run_benchmark(RunConfig(), write=False), 1)
        rows.append((name, t_rm, t_ke, t_run))

    print(f"{args.points} integration points, best of {args.repeat}")
    print(f"{'backend':<8} {'return map [ms]':>16} {'B^T K B [ms]':>14} {'plate run [s]':>14}")
    for name, t_rm, t_ke, t_run in rows:
        print(f"{name:<8} {1e3 * t_rm:16.2f} {1e3 * t_ke:14.2f} {t_run:14.2f}")
    if len(rows) == 2:
        base, jit = rows
        print(f"speedup  {base[1] / jit[1]:16.1f}x {base[2] / jit[2]:13.1f}x {base[3] / jit[3]:13.1f}x")
    else:
        print("numba disabled (DUALPLAST_DISABLE_NUMBA) or not installed")


if __name__ == "__main__":
    main()
