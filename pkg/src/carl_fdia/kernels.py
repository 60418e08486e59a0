"""Kernel dispatch.

The compiled extension is used when it was built; otherwise the numpy
fallback is imported. Set ``CARL_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CARL_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def use_backend(name):
    """Switch the active backend ("cython" or "python"); returns the previous one."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif name == "cython":
        from . import _kernels as _compiled

        _impl, BACKEND = _compiled, "cython"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return previous


def electric_power(theta, susceptance):
    """Per-bus electric power for a batch of angle vectors, shape (batch, n)."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    return _impl.electric_power(theta, np.ascontiguousarray(susceptance, dtype=np.float64))


def euler_window(theta0, omega0, inv_mass, damping, injection, susceptance, droop, dt):
    """Integrate ``droop.shape[0]`` Euler steps for a batch of states.

    ``droop`` has shape (steps, batch, n) and holds the effective droop used
    on each transition. Returns the states after every step, each of shape
    (steps, batch, n).
    """
    f64 = np.float64
    # a diverged state turns into inf/nan here; callers check for that
    with np.errstate(invalid="ignore", over="ignore"):
        return _impl.euler_window(
            np.ascontiguousarray(theta0, dtype=f64),
            np.ascontiguousarray(omega0, dtype=f64),
            np.ascontiguousarray(inv_mass, dtype=f64),
            np.ascontiguousarray(damping, dtype=f64),
            np.ascontiguousarray(injection, dtype=f64),
            np.ascontiguousarray(susceptance, dtype=f64),
            np.ascontiguousarray(droop, dtype=f64),
            float(dt),
        )
