"""Time the compiled and numpy kernel backends on the same inputs.

    python3 benchmarks/bench_kernels.py [--batch 100] [--repeat 20]

Prints per-call times and checks that both backends agree to 1e-12.
"""
import argparse
import timeit

import numpy as np

from carl_fdia import kernels
from carl_fdia.grid import default_grid_path, load_grid


def inputs(batch, steps, seed=0):
    model = load_grid(default_grid_path())
    n = model.n
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-0.2, 0.2, (batch, n))
    omega = rng.uniform(-0.1, 0.1, (batch, n))
    droop = np.broadcast_to(model.droop_nominal, (steps, batch, n)) * rng.choice([-1.0, 0.0, 1.0], (steps, batch, n))
    return (theta, omega, 1.0 / model.inertia, model.damping, model.injection, model.susceptance,
            np.ascontiguousarray(droop), 0.01)


def bench(backend, args, repeat):
    kernels.use_backend(backend)
    window = timeit.repeat(lambda: kernels.euler_window(*args), number=10, repeat=repeat)
    power = timeit.repeat(lambda: kernels.electric_power(args[0], args[5]), number=100, repeat=repeat)
    return min(window) / 10, min(power) / 100, kernels.euler_window(*args)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=100)
    parser.add_argument("--steps", type=int, default=6)
    parser.add_argument("--repeat", type=int, default=20)
    opts = parser.parse_args()
    args = inputs(opts.batch, opts.steps)
    original = kernels.BACKEND
    results = {}
    for backend in ("python", "cython"):
        try:
            results[backend] = bench(backend, args, opts.repeat)
        except ImportError:
            print(f"{backend}: extension not built, skipped")
    kernels.use_backend(original)
    print(f"batch={opts.batch} steps={opts.steps}")
    for backend, (window, power, _) in results.items():
        print(f"{backend:>7}: euler_window {window * 1e6:9.1f} us   electric_power {power * 1e6:8.1f} us")
    if len(results) == 2:
        py, cy = results["python"], results["cython"]
        err = max(float(np.max(np.abs(a - b))) for a, b in zip(py[2], cy[2]))
        print(f"speedup: euler_window {py[0] / cy[0]:.1f}x, electric_power {py[1] / cy[1]:.1f}x; max abs diff {err:.2e}")
        assert err < 1e-12


if __name__ == "__main__":
    main()
