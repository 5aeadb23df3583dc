"""Time the compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from stn import numerics
from stn.metrics import kl_matrix


def workloads(rng):
    a = rng.normal(size=(64, 64, 64))
    spd = a @ a.transpose(0, 2, 1) + 64 * np.eye(64)
    feats = rng.normal(size=(5, 16, 64))
    query = rng.normal(size=(75, 16, 64))
    mu_s, sigma_s = numerics.fit_gaussian_batch(feats)
    mu_q, sigma_q = numerics.fit_gaussian_batch(query)
    return {
        "cholesky 64x(64,64)": lambda: numerics.cholesky(spd),
        "spd_solve 64x(64,64)": lambda: numerics.spd_solve(spd, spd[:, :, :8]),
        "log_det_spd 64x(64,64)": lambda: numerics.log_det_spd(spd),
        "symmetric_eig (64,64)": lambda: numerics.symmetric_eig(spd[0]),
        "kl_matrix 75 queries x 5 classes": lambda: kl_matrix(mu_q, sigma_q, mu_s, sigma_s),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats, best is reported (default: %(default)s)")
    args = ap.parse_args()
    backends = numerics.available_backends()
    timings = {}
    for backend in backends:
        numerics.set_backend(backend)
        for name, fn in workloads(np.random.default_rng(0)).items():
            fn()
            timings[(name, backend)] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'workload':36s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name in workloads(np.random.default_rng(0)):
        row = [timings[(name, b)] for b in backends]
        line = f"{name:36s}" + "".join(f"{t * 1e3:10.2f}ms" for t in row)
        if len(backends) == 2:
            line += f"{timings[(name, 'python')] / timings[(name, 'cython')]:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
