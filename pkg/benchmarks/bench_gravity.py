"""Compare the compiled and numpy gravity kernels.

Usage: ``python3 benchmarks/bench_gravity.py [--degree N] [--batch K] [--repeat R]``

Prints the median wall time per call for each backend, the speedup and the
largest relative difference between the two results.
"""
import argparse
import timeit

import numpy as np

from snac.dynamics.gravity import _inverse_kappa
from snac.kernels import _gravity_py

try:
    from snac.kernels import _gravity_cy
except ImportError:  # pragma: no cover
    _gravity_cy = None


def make_inputs(degree, batch, seed=0):
    rng = np.random.default_rng(seed)
    Cbar = np.zeros((batch, degree + 1, degree + 1))
    Sbar = np.zeros_like(Cbar)
    for n in range(2, degree + 1):
        sig = 0.045 * (n / 2.0) ** -1.84
        Cbar[:, n, : n + 1] = rng.normal(0.0, sig, (batch, n + 1))
        Sbar[:, n, 1 : n + 1] = rng.normal(0.0, sig, (batch, n))
    inv = _inverse_kappa(degree)
    C = Cbar * inv
    S = Sbar * inv
    C[:, 0, 0] = 1.0
    pos = rng.normal(0.0, 1.0, (batch, 3))
    pos = 45000.0 * pos / np.linalg.norm(pos, axis=1)[:, None]
    mu = np.full(batch, 4.4628e5)
    return pos, mu, 16000.0, C, S


def bench(fn, args, repeat):
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    times = timer.repeat(repeat=repeat, number=number)
    return float(np.median(times)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--degree", type=int, nargs="+", default=[4, 8, 15])
    parser.add_argument("--batch", type=int, nargs="+", default=[1, 64, 683])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _gravity_cy is None:
        print("compiled kernel not built; only the numpy backend is available")
    print(f"{'degree':>6} {'batch':>6} {'numpy [us]':>12} {'cython [us]':>12} {'speedup':>8} {'max rel diff':>13}")
    for degree in args.degree:
        for batch in args.batch:
            inputs = make_inputs(degree, batch)
            t_py = bench(_gravity_py.sh_accel_body, inputs, args.repeat)
            if _gravity_cy is None:
                print(f"{degree:>6} {batch:>6} {t_py * 1e6:>12.1f} {'-':>12} {'-':>8} {'-':>13}")
                continue
            t_cy = bench(_gravity_cy.sh_accel_body, inputs, args.repeat)
            a = _gravity_py.sh_accel_body(*inputs)
            b = _gravity_cy.sh_accel_body(*inputs)
            diff = float(np.max(np.abs(a - b)) / np.max(np.abs(a)))
            print(f"{degree:>6} {batch:>6} {t_py * 1e6:>12.1f} {t_cy * 1e6:>12.1f} {t_py / t_cy:>8.1f} {diff:>13.1e}")


if __name__ == "__main__":
    main()
