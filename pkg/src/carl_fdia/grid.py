"""Swing-equation frequency dynamics under primary droop control.

Buses are numbered 1..n in every public structure (actions, logs, CSV);
arrays are indexed 0..n-1 internally.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import InvalidInputError, NumericalDivergenceError

SCHEMA_VERSION = "1.0"
ALTERED_DROOP_VALUES = (-1.0, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class GridModel:
    """Static network description (per-unit)."""

    inertia: np.ndarray
    damping: np.ndarray
    injection: np.ndarray
    susceptance: np.ndarray
    droop_nominal: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("inertia", "damping", "injection", "droop_nominal"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).copy()
            if arr.ndim != 1:
                raise InvalidInputError(f"{name} must be a vector")
            arrays[name] = arr
        b = np.asarray(self.susceptance, dtype=np.float64).copy()
        n = arrays["inertia"].size
        if n < 1:
            raise InvalidInputError("grid needs at least one bus")
        for name, arr in arrays.items():
            if arr.size != n:
                raise InvalidInputError(f"{name} has {arr.size} entries, expected {n}")
        if b.shape != (n, n):
            raise InvalidInputError(f"susceptance must be {n}x{n}, got {b.shape}")
        if not np.array_equal(b, b.T):
            raise InvalidInputError("susceptance must be symmetric")
        if np.any(np.diag(b) != 0.0):
            raise InvalidInputError("susceptance diagonal must be zero")
        if np.any(arrays["inertia"] <= 0):
            raise InvalidInputError("inertia must be positive")
        if np.any(arrays["damping"] < 0):
            raise InvalidInputError("damping must be non-negative")
        for arr in list(arrays.values()) + [b]:
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError("grid parameters must be finite")
            arr.setflags(write=False)
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "susceptance", b)

    @property
    def n(self) -> int:
        return self.inertia.size

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n": self.n,
            "inertia": self.inertia.tolist(),
            "damping": self.damping.tolist(),
            "injection": self.injection.tolist(),
            "susceptance": self.susceptance.tolist(),
            "droop_nominal": self.droop_nominal.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridModel":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise InvalidInputError(f"unsupported grid schema_version {version!r}")
        model = cls(
            inertia=data["inertia"],
            damping=data["damping"],
            injection=data["injection"],
            susceptance=data["susceptance"],
            droop_nominal=data["droop_nominal"],
        )
        if int(data["n"]) != model.n:
            raise InvalidInputError(f"n={data['n']} does not match parameter lengths ({model.n})")
        return model


def load_grid(path) -> GridModel:
    with open(path) as fh:
        return GridModel.from_dict(json.load(fh))


def save_grid(model: GridModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def default_grid_path() -> Path:
    return Path(__file__).parent / "data" / "grid10.json"


def generate_grid(
    n: int = 10,
    seed: int = 0,
    inertia_range=(0.2, 0.8),
    damping_range=(0.5, 1.0),
    susceptance_range=(1.0, 3.0),
    extra_lines: int = 4,
    injection_scale: float = 0.5,
    injection_total: float = 3.0,
) -> GridModel:
    """Draw a connected random network with ranges suited to the threat model.

    Topology is a ring plus ``extra_lines`` random chords. Injections are
    drawn around zero and shifted so they sum to ``injection_total``.
    """
    if n < 2:
        raise InvalidInputError("need at least two buses")
    rng = np.random.default_rng(seed)
    inertia = rng.uniform(*inertia_range, size=n)
    damping = rng.uniform(*damping_range, size=n)
    b = np.zeros((n, n))
    edges = {(i, (i + 1) % n) for i in range(n)} if n > 2 else {(0, 1)}
    candidates = [(i, j) for i in range(n) for j in range(i + 2, n) if (i, j) != (0, n - 1)]
    if candidates and extra_lines > 0:
        picks = rng.choice(len(candidates), size=min(extra_lines, len(candidates)), replace=False)
        edges |= {candidates[k] for k in sorted(picks)}
    for i, j in sorted(edges):
        value = rng.uniform(*susceptance_range)
        b[i, j] = b[j, i] = value
    injection = rng.uniform(-injection_scale, injection_scale, size=n)
    injection += (injection_total - injection.sum()) / n
    return GridModel(
        inertia=np.round(inertia, 4),
        damping=np.round(damping, 4),
        injection=np.round(injection, 6),
        susceptance=np.round(b, 4),
        droop_nominal=np.ones(n),
    )


@dataclass(frozen=True, eq=False)
class GridState:
    theta: np.ndarray
    omega: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).copy()
        omega = np.asarray(self.omega, dtype=np.float64).copy()
        if theta.ndim != 1 or theta.shape != omega.shape:
            raise InvalidInputError("theta and omega must be vectors of equal length")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(omega))):
            raise InvalidInputError("state entries must be finite")
        theta.setflags(write=False)
        omega.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "omega", omega)

    @property
    def n(self) -> int:
        return self.theta.size

    @classmethod
    def zeros(cls, n: int) -> "GridState":
        return cls(np.zeros(n), np.zeros(n), 0.0)

    def __eq__(self, other):
        if not isinstance(other, GridState):
            return NotImplemented
        return (
            self.t == other.t
            and np.array_equal(self.theta, other.theta)
            and np.array_equal(self.omega, other.omega)
        )


def default_initial_state(n: int, seed: int = 0, amplitude: float = 0.1) -> GridState:
    """Zero angles, frequency deviations uniform in +/- ``amplitude``."""
    rng = np.random.default_rng(seed)
    return GridState(np.zeros(n), rng.uniform(-amplitude, amplitude, size=n), 0.0)


class DroopVector:
    """Effective droop coefficients with at most one tampered entry."""

    __slots__ = ("values", "nominal")

    def __init__(self, values, nominal):
        values = np.asarray(values, dtype=np.float64).copy()
        nominal = np.asarray(nominal, dtype=np.float64)
        if values.shape != nominal.shape:
            raise InvalidInputError("droop vector length mismatch")
        changed = np.flatnonzero(values != nominal)
        if changed.size > 1:
            raise InvalidInputError("at most one droop coefficient may be altered")
        if changed.size == 1 and values[changed[0]] not in ALTERED_DROOP_VALUES:
            raise InvalidInputError(f"altered droop must be one of {ALTERED_DROOP_VALUES}")
        values.setflags(write=False)
        self.values = values
        self.nominal = nominal

    @property
    def altered_bus(self) -> Optional[int]:
        changed = np.flatnonzero(self.values != self.nominal)
        return int(changed[0]) + 1 if changed.size else None

    def __eq__(self, other):
        return isinstance(other, DroopVector) and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"DroopVector({self.values.tolist()})"


@dataclass
class Trajectory:
    """Time-ordered states; ``attacked_bus[k]`` is the bus tampered on step k -> k+1."""

    states: list
    dt: float
    attacked_bus: list = field(default_factory=list)

    def __post_init__(self):
        if not self.attacked_bus:
            self.attacked_bus = [None] * max(len(self.states) - 1, 0)
        if len(self.attacked_bus) != len(self.states) - 1:
            raise InvalidInputError("attacked_bus must have one entry per step")

    def __len__(self):
        return len(self.states)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def theta(self) -> np.ndarray:
        return np.stack([s.theta for s in self.states])

    @property
    def omega(self) -> np.ndarray:
        return np.stack([s.omega for s in self.states])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "bus", "theta", "omega", "attacked_bus"])
            for k, state in enumerate(self.states):
                attacked = self.attacked_bus[k] if k < len(self.attacked_bus) else None
                for i in range(state.n):
                    writer.writerow(
                        [repr(state.t), i + 1, repr(float(state.theta[i])),
                         repr(float(state.omega[i])), "" if attacked is None else attacked]
                    )

    @classmethod
    def from_csv(cls, path, dt: float) -> "Trajectory":
        rows = {}
        attacked = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                t = float(row["t"])
                rows.setdefault(t, []).append((int(row["bus"]), float(row["theta"]), float(row["omega"])))
                attacked[t] = int(row["attacked_bus"]) if row["attacked_bus"] else None
        states = []
        for t in sorted(rows):
            entries = sorted(rows[t])
            states.append(GridState([e[1] for e in entries], [e[2] for e in entries], t))
        marks = [attacked[s.t] for s in states[:-1]]
        return cls(states, dt, marks)


def _check_dims(model: GridModel, state: GridState) -> None:
    if state.n != model.n:
        raise InvalidInputError(f"state has {state.n} buses, model has {model.n}")


def electric_power(model: GridModel, state: GridState) -> np.ndarray:
    """p_e,i = sum_{j != i} B_ij sin(theta_i - theta_j)."""
    _check_dims(model, state)
    return kernels.electric_power(state.theta[None, :], model.susceptance)[0]


def swing_step(model: GridModel, state: GridState, droop: DroopVector, dt: float) -> GridState:
    """One explicit Euler step of the swing equation with effective droop ``droop``."""
    _check_dims(model, state)
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    if not isinstance(droop, DroopVector):
        droop = DroopVector(droop, model.droop_nominal)
    if droop.values.size != model.n:
        raise InvalidInputError("droop vector length mismatch")
    thetas, omegas = kernels.euler_window(
        state.theta[None, :], state.omega[None, :], 1.0 / model.inertia, model.damping,
        model.injection, model.susceptance, droop.values[None, None, :], dt,
    )
    if not (np.all(np.isfinite(thetas)) and np.all(np.isfinite(omegas))):
        raise NumericalDivergenceError(
            f"non-finite state after step at t={state.t}", step=int(round(state.t / dt))
        )
    return GridState(thetas[0, 0], omegas[0, 0], state.t + dt)


def apply_fdia(model: GridModel, target_bus: Optional[int], altered_k: float = 0.0) -> DroopVector:
    """Nominal droop with the entry of ``target_bus`` (1-based) replaced by ``altered_k``."""
    values = model.droop_nominal.copy()
    if target_bus is not None:
        if not 1 <= int(target_bus) <= model.n:
            raise InvalidInputError(f"bus {target_bus} outside 1..{model.n}")
        if float(altered_k) not in ALTERED_DROOP_VALUES:
            raise InvalidInputError(f"altered droop must be one of {ALTERED_DROOP_VALUES}")
        values[int(target_bus) - 1] = float(altered_k)
    return DroopVector(values, model.droop_nominal)


def simulate(
    model: GridModel,
    initial: GridState,
    dt: float,
    schedule: Sequence[tuple],
) -> Trajectory:
    """Integrate one step per schedule entry ``(bus or None, altered_k)``."""
    _check_dims(model, initial)
    horizon = len(schedule)
    droop = np.empty((horizon, 1, model.n))
    marks = []
    for k, (bus, value) in enumerate(schedule):
        droop[k, 0] = apply_fdia(model, bus, value).values
        marks.append(None if bus is None else int(bus))
    thetas, omegas = kernels.euler_window(
        initial.theta[None, :], initial.omega[None, :], 1.0 / model.inertia, model.damping,
        model.injection, model.susceptance, droop, dt,
    )
    bad = ~(np.isfinite(thetas[:, 0]).all(axis=1) & np.isfinite(omegas[:, 0]).all(axis=1))
    if bad.any():
        step = int(np.argmax(bad))
        raise NumericalDivergenceError(f"non-finite state at step {step}", step=step)
    states = [initial]
    for k in range(horizon):
        states.append(GridState(thetas[k, 0], omegas[k, 0], initial.t + (k + 1) * dt))
    return Trajectory(states, dt, marks)


def rollout_reference(model: GridModel, initial: GridState, horizon: int, dt: float) -> Trajectory:
    """Trajectory of ``horizon`` steps with nominal droop everywhere."""
    if horizon < 1:
        raise InvalidInputError("horizon must be at least 1")
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    return simulate(model, initial, dt, [(None, 0.0)] * horizon)
