"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def electric_power(theta, susceptance):
    diff = theta[:, :, None] - theta[:, None, :]
    return np.sum(susceptance[None, :, :] * np.sin(diff), axis=2)


def euler_window(theta0, omega0, inv_mass, damping, injection, susceptance, droop, dt):
    steps = droop.shape[0]
    thetas = np.empty((steps,) + theta0.shape)
    omegas = np.empty((steps,) + theta0.shape)
    th = theta0
    om = omega0
    for s in range(steps):
        sn = np.sin(th)
        cn = np.cos(th)
        # sin(a - b) expanded so the coupling term is two matrix products
        pe = sn * (cn @ susceptance) - cn * (sn @ susceptance)
        th, om = (
            th + dt * om,
            om + dt * inv_mass * (injection - pe - damping * om - droop[s] * om),
        )
        thetas[s] = th
        omegas[s] = om
    return thetas, omegas
