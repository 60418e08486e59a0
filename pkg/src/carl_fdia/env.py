"""FDI^A and FDI^D environments, the synthetic attacker A0, and episode logs.

Both environments are batched: every array carries a leading batch axis and
all episodes in a batch start from the same initial condition. Bus numbers
are 1-based; ``NO_ATTACK`` (0) is the no-attack class / "no bus".

Timing: the adversary decides at each window start ``t = 0, d, 2d, ...``
and holds its action for the window; detections happen at
``t = d, 2d, ...`` on the states ``t-d+1 .. t``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import InvalidInputError, ProtocolError
from .grid import GridModel, GridState, rollout_reference
from .nn import dumps_json

NO_ATTACK = 0
ATTACK_FRACTIONS = (0.16, 0.2, 0.4, 0.6, 0.8)
K_VALUES = np.array([-1.0, 0.0, 1.0])


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = 500
    dt: float = 0.01
    detection_period: int = 6
    penalty: float = 0.1
    scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.detection_period < 2:
            raise InvalidInputError("horizon must be >= 1 and detection period >= 2")
        if self.horizon < self.detection_period:
            raise InvalidInputError("detection period must fit into the horizon at least once")
        if not (self.penalty > 0 and self.scale > 0 and self.dt > 0):
            raise InvalidInputError("penalty, scale and dt must be positive")

    @property
    def n_windows(self) -> int:
        """Adversary decisions per episode."""
        return math.ceil(self.horizon / self.detection_period)

    @property
    def n_detections(self) -> int:
        """Detector decisions per episode."""
        return self.horizon // self.detection_period


@dataclass(frozen=True)
class SyntheticAttackerConfig:
    attack_fraction: float
    target_bus: int
    altered_k: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.attack_fraction <= 1.0:
            raise InvalidInputError("attack fraction must lie in [0, 1]")
        if self.target_bus < 1:
            raise InvalidInputError("target bus is 1-based")
        if float(self.altered_k) not in (-1.0, 0.0, 1.0):
            raise InvalidInputError("altered droop must be -1, 0 or 1")


@dataclass
class AttackSchedule:
    """Per-step bus (0 = none) and altered droop."""

    bus: np.ndarray
    altered_k: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.bus != NO_ATTACK


def schedule_synthetic_attack(config: SyntheticAttackerConfig, horizon: int) -> AttackSchedule:
    """Exactly ``round(T_a * horizon)`` attacked steps drawn without replacement."""
    rng = np.random.default_rng(config.seed)
    return _draw_schedule(rng, config.attack_fraction, config.target_bus, config.altered_k, horizon)


def _draw_schedule(rng, fraction, bus, k, horizon) -> AttackSchedule:
    count = int(round(fraction * horizon))
    steps = rng.choice(horizon, size=count, replace=False)
    buses = np.zeros(horizon, dtype=np.int64)
    buses[steps] = bus
    ks = np.zeros(horizon)
    ks[steps] = k
    return AttackSchedule(buses, ks)


def window_ground_truth(step_bus: np.ndarray, window_index: int, period: int) -> int:
    """Bus attacked anywhere in window ``window_index`` or ``NO_ATTACK``."""
    step_bus = np.asarray(step_bus)
    lo = window_index * period
    hi = lo + period
    if hi > step_bus.shape[-1]:
        raise ProtocolError(f"window {window_index} has not fully elapsed")
    attacked = np.unique(step_bus[lo:hi])
    attacked = attacked[attacked != NO_ATTACK]
    if attacked.size > 1:
        raise ProtocolError(f"window {window_index} attacks several buses {attacked.tolist()}")
    return int(attacked[0]) if attacked.size else NO_ATTACK


def _batch_truth(bus_steps: np.ndarray) -> np.ndarray:
    """Row-wise window truth for a (batch, steps) block."""
    truth = bus_steps.max(axis=1)
    lowest = np.where(bus_steps == NO_ATTACK, np.iinfo(np.int64).max, bus_steps).min(axis=1)
    if np.any((truth != NO_ATTACK) & (lowest != truth)):
        raise ProtocolError("more than one bus attacked inside a detection window")
    return truth


# --- adversary / detector behaviours -----------------------------------------


@dataclass
class WindowAction:
    """What an adversary does during one window, for a batch.

    ``bus``/``altered_k``/``mute`` are the per-episode decision (logged);
    ``step_bus``/``step_k`` are the per-step effects (batch, steps).
    """

    bus: np.ndarray
    altered_k: np.ndarray
    mute: np.ndarray
    step_bus: np.ndarray
    step_k: np.ndarray


def decode_adversary(actions: np.ndarray):
    """(bus 1..n, altered k, mute flag) from adversary head indices."""
    actions = np.asarray(actions)
    return actions[:, 0] + 1, K_VALUES[actions[:, 1]], actions[:, 2].astype(bool)


def encode_adversary(bus, altered_k, mute) -> np.ndarray:
    k_idx = np.searchsorted(K_VALUES, np.asarray(altered_k, dtype=np.float64))
    return np.stack([np.asarray(bus) - 1, k_idx, np.asarray(mute, dtype=np.int64)], axis=1)


def held_action(bus, altered_k, mute, steps: int) -> WindowAction:
    bus = np.asarray(bus, dtype=np.int64)
    altered_k = np.asarray(altered_k, dtype=np.float64)
    mute = np.asarray(mute, dtype=bool)
    active = np.where(mute, NO_ATTACK, bus)
    return WindowAction(bus, altered_k, mute, np.repeat(active[:, None], steps, axis=1),
                        np.repeat(altered_k[:, None], steps, axis=1))


class SyntheticAdversary:
    """A0: fixed bus and droop per episode, attacks a random fraction of steps."""

    name = "A0"

    def __init__(self, n: int, fractions=ATTACK_FRACTIONS, altered_values=(-1.0, 0.0, 1.0),
                 buses: Optional[Sequence[int]] = None):
        self.n = n
        self.fractions = tuple(fractions)
        self.altered_values = tuple(altered_values)
        self.buses = tuple(range(1, n + 1)) if buses is None else tuple(buses)

    def start(self, size: int, rng: np.random.Generator, horizon: int):
        fractions = rng.choice(self.fractions, size=size)
        buses = rng.choice(self.buses, size=size)
        ks = rng.choice(self.altered_values, size=size)
        sched = [_draw_schedule(rng, f, b, k, horizon) for f, b, k in zip(fractions, buses, ks)]
        return {
            "bus": np.array(buses, dtype=np.int64),
            "k": np.array(ks, dtype=np.float64),
            "fraction": np.array(fractions),
            "step_bus": np.stack([s.bus for s in sched]) if sched else np.zeros((0, horizon), np.int64),
            "step_k": np.stack([s.altered_k for s in sched]) if sched else np.zeros((0, horizon)),
        }

    def act(self, state, t0: int, steps: int, obs, rng) -> WindowAction:
        step_bus = state["step_bus"][:, t0:t0 + steps]
        step_k = state["step_k"][:, t0:t0 + steps]
        mute = ~(step_bus != NO_ATTACK).any(axis=1)
        return WindowAction(state["bus"].copy(), state["k"].copy(), mute, step_bus, step_k)


class ScriptedAdversary:
    """Deterministic adversary from a function ``f(window_index) -> (bus, k, mute)``."""

    def __init__(self, fn, name: str = "scripted", period: int = 6):
        self.fn = fn
        self.name = name
        self.period = period

    def start(self, size, rng, horizon):
        return {"size": size}

    def act(self, state, t0, steps, obs, rng) -> WindowAction:
        bus, k, mute = self.fn(t0 // self.period)
        size = state["size"]
        return held_action(np.full(size, bus), np.full(size, k), np.full(size, mute), steps)


class NullDetector:
    """Always answers no-attack."""

    name = "null"

    def decide(self, features, truth=None):
        return np.zeros(features.shape[0], dtype=np.int64)


class ConstantDetector:
    name = "constant"

    def __init__(self, answer: int):
        self.answer = int(answer)

    def decide(self, features, truth=None):
        return np.full(features.shape[0], self.answer, dtype=np.int64)


class OracleDetector:
    """Reads the window ground truth; a ceiling for accuracy checks."""

    name = "oracle"

    def decide(self, features, truth=None):
        return np.asarray(truth, dtype=np.int64).copy()


# --- simulation core ---------------------------------------------------------


class GridBatch:
    """Full state history of a batch of episodes from one initial condition."""

    def __init__(self, model: GridModel, config: EpisodeConfig, initial: GridState, batch: int,
                 reference_omega: Optional[np.ndarray] = None):
        if initial.n != model.n:
            raise InvalidInputError("initial state does not match the grid")
        T, n = config.horizon, model.n
        self.model = model
        self.config = config
        self.batch = batch
        self.theta = np.empty((T + 1, batch, n))
        self.omega = np.empty((T + 1, batch, n))
        self.theta[0] = initial.theta
        self.omega[0] = initial.omega
        self.step_bus = np.zeros((T, batch), dtype=np.int64)
        self.step_k = np.zeros((T, batch))
        self.diverged_at = np.full(batch, T + 1, dtype=np.int64)
        if reference_omega is None:
            reference_omega = rollout_reference(model, initial, T, config.dt).omega
        self.reference_omega = reference_omega
        self._inv_mass = 1.0 / model.inertia
        self.t = 0

    def advance(self, step_bus: np.ndarray, step_k: np.ndarray) -> None:
        steps = step_bus.shape[1]
        t0 = self.t
        if t0 + steps > self.config.horizon:
            raise ProtocolError("advancing past the horizon")
        droop = np.broadcast_to(self.model.droop_nominal, (steps, self.batch, self.model.n)).copy()
        rows, cols = np.nonzero(step_bus != NO_ATTACK)
        droop[cols, rows, step_bus[rows, cols] - 1] = step_k[rows, cols]
        th, om = kernels.euler_window(
            self.theta[t0], self.omega[t0], self._inv_mass, self.model.damping,
            self.model.injection, self.model.susceptance, droop, self.config.dt,
        )
        bad = ~(np.isfinite(th).all(axis=2) & np.isfinite(om).all(axis=2))  # (steps, batch)
        if bad.any():
            for b in np.flatnonzero(bad.any(axis=0)):
                first = int(np.argmax(bad[:, b]))
                self.diverged_at[b] = min(self.diverged_at[b], t0 + first + 1)
                hold_th = th[first - 1, b] if first else self.theta[t0, b]
                hold_om = om[first - 1, b] if first else self.omega[t0, b]
                th[first:, b] = hold_th
                om[first:, b] = hold_om
        self.theta[t0 + 1:t0 + steps + 1] = th
        self.omega[t0 + 1:t0 + steps + 1] = om
        self.step_bus[t0:t0 + steps] = step_bus.T
        self.step_k[t0:t0 + steps] = step_k.T
        self.t = t0 + steps

    @property
    def alive(self) -> np.ndarray:
        return self.diverged_at > self.t

    def state_window(self, t: int) -> np.ndarray:
        """States ``t-d+1 .. t`` as (batch, d, 2n) ``[omega, theta]`` rows."""
        d = self.config.detection_period
        om = self.omega[t - d + 1:t + 1]
        th = self.theta[t - d + 1:t + 1]
        return np.concatenate([om, th], axis=2).transpose(1, 0, 2)

    def frequency_excess(self, t0: int, t1: int) -> np.ndarray:
        """sum_i |omega_i| - |omega_ref_i| for states t0+1..t1, (batch, t1-t0); zero after divergence."""
        excess = (np.abs(self.omega[t0 + 1:t1 + 1]).sum(axis=2)
                  - np.abs(self.reference_omega[t0 + 1:t1 + 1]).sum(axis=1)[:, None])
        steps = np.arange(t0 + 1, t1 + 1)[:, None]
        excess = np.where(steps < self.diverged_at[None, :], excess, 0.0)
        return excess.T

    def adversary_observation(self) -> np.ndarray:
        t = self.t
        frac = np.full((self.batch, 1), t / self.config.horizon)
        return np.concatenate([self.omega[t], self.theta[t], frac], axis=1)


def _group_call(assign: np.ndarray, count: int, fn):
    """Call ``fn(index, rows)`` for every opponent that owns some rows."""
    for idx in range(count):
        rows = np.flatnonzero(assign == idx)
        if rows.size:
            fn(idx, rows)


def _sample_assignment(rng, count, batch, probs):
    if count == 1:
        return np.zeros(batch, dtype=np.int64)
    return rng.choice(count, size=batch, p=probs)


class _EnvBase:
    def __init__(self, model, config, extractor, initial):
        self.model = model
        self.config = config
        self.extractor = extractor
        self.initial = initial
        self.reference_omega = rollout_reference(model, initial, config.horizon, config.dt).omega
        self.core: Optional[GridBatch] = None
        self.done = True

    def features(self, t: int) -> np.ndarray:
        return self.extractor(self.core.state_window(t))

    def _new_core(self, batch):
        self.core = GridBatch(self.model, self.config, self.initial, batch, self.reference_omega)
        T = self.config.horizon
        self.window_decisions = {
            "bus": np.zeros((batch, self.config.n_windows), dtype=np.int64),
            "k": np.zeros((batch, self.config.n_windows)),
            "mute": np.zeros((batch, self.config.n_windows), dtype=bool),
        }
        self.detector_decision = np.full((T, batch), -1, dtype=np.int64)
        self.step_rewards = np.zeros((T, batch))

    def _record_window(self, w, action: WindowAction):
        self.window_decisions["bus"][:, w] = action.bus
        self.window_decisions["k"][:, w] = action.altered_k
        self.window_decisions["mute"][:, w] = action.mute

    def episode_log(self, b: int, opponent: str = "", role: str = "") -> "EpisodeLog":
        core = self.core
        d = self.config.detection_period
        win = np.arange(core.t) // d
        return EpisodeLog(
            role=role,
            omega=core.omega[:core.t + 1, b].copy(),
            theta=core.theta[:core.t + 1, b].copy(),
            reference_omega=self.reference_omega[:core.t + 1].copy(),
            step_bus=core.step_bus[:core.t, b].copy(),
            step_k=core.step_k[:core.t, b].copy(),
            mute=self.window_decisions["mute"][b, win].copy(),
            decision_bus=self.window_decisions["bus"][b, win].copy(),
            detector_decision=self.detector_decision[:core.t, b].copy(),
            rewards=self.step_rewards[:core.t, b].copy(),
            config=self.config,
            opponent=opponent,
        )


class AdversaryEnv(_EnvBase):
    """FDI^A: a trainable adversary against frozen detector(s).

    ``step`` consumes one held window action; its reward is the sum of the
    window's per-step rewards, where the detection step's reward is replaced
    by ``-p`` when the detector names the attacked bus.
    """

    def __init__(self, model: GridModel, config: EpisodeConfig, extractor, detectors,
                 initial: GridState, detector_probs=None):
        super().__init__(model, config, extractor, initial)
        self.detectors = list(detectors) if isinstance(detectors, (list, tuple)) else [detectors]
        if not self.detectors:
            raise InvalidInputError("at least one detector is required")
        self.detector_probs = detector_probs

    @property
    def observation_size(self) -> int:
        return 2 * self.model.n + 1

    def reset(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        self._new_core(batch)
        self.assign = _sample_assignment(rng, len(self.detectors), batch, self.detector_probs)
        self.window = 0
        self.done = False
        return self.core.adversary_observation()

    def step(self, bus, altered_k, mute):
        if self.done:
            raise ProtocolError("episode finished; call reset()")
        bus = np.asarray(bus, dtype=np.int64)
        if np.any((bus < 1) | (bus > self.model.n)):
            raise InvalidInputError("bus outside 1..n")
        if not np.all(np.isin(altered_k, K_VALUES)):
            raise InvalidInputError("altered droop must be -1, 0 or 1")
        cfg = self.config
        core = self.core
        t0 = core.t
        steps = min(cfg.detection_period, cfg.horizon - t0)
        action = held_action(bus, altered_k, mute, steps)
        self._record_window(self.window, action)
        core.advance(action.step_bus, action.step_k)
        rewards = cfg.scale * core.frequency_excess(t0, t0 + steps)
        decision = None
        truth = np.where(action.mute, NO_ATTACK, action.bus)
        t1 = t0 + steps
        if steps == cfg.detection_period and t1 % cfg.detection_period == 0:
            feats = self.features(t1)
            decision = np.zeros(core.batch, dtype=np.int64)

            def query(idx, rows):
                decision[rows] = self.detectors[idx].decide(feats[rows], truth[rows])

            _group_call(self.assign, len(self.detectors), query)
            detected = (decision == truth) & (truth != NO_ATTACK) & core.alive
            rewards[:, -1] = np.where(detected, -cfg.penalty, rewards[:, -1])
            self.detector_decision[t1 - 1] = decision
        self.step_rewards[t0:t1] = rewards.T
        self.window += 1
        self.done = self.window >= cfg.n_windows
        info = {"detector_decision": decision, "ground_truth": truth, "step_rewards": rewards,
                "alive": core.alive.copy(), "diverged": ~core.alive}
        return core.adversary_observation(), rewards.sum(axis=1), self.done, info

    def step_encoded(self, actions):
        return self.step(*decode_adversary(actions))


class DefenderEnv(_EnvBase):
    """FDI^D: a trainable detector against frozen adversary(ies).

    After ``reset`` the first window has elapsed and the returned
    observation is the detector input at ``t = d``. Each ``step`` takes the
    decision for the pending detection instant.
    """

    def __init__(self, model: GridModel, config: EpisodeConfig, extractor, adversaries,
                 initial: GridState, adversary_probs=None):
        super().__init__(model, config, extractor, initial)
        self.adversaries = list(adversaries) if isinstance(adversaries, (list, tuple)) else [adversaries]
        if not self.adversaries:
            raise InvalidInputError("at least one adversary is required")
        self.adversary_probs = adversary_probs
        self.pending = False

    @property
    def observation_size(self) -> int:
        return self.extractor.size

    def reset(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        self._new_core(batch)
        self.rng = rng
        self.assign = _sample_assignment(rng, len(self.adversaries), batch, self.adversary_probs)
        self.adv_states = {}

        def start(idx, rows):
            self.adv_states[idx] = self.adversaries[idx].start(rows.size, rng, self.config.horizon)

        _group_call(self.assign, len(self.adversaries), start)
        self.window = 0
        self.done = False
        self.truth_log = np.zeros((batch, self.config.n_windows), dtype=np.int64)
        self._advance_window()
        self.pending = True
        return self.features(self.core.t)

    def _advance_window(self):
        cfg = self.config
        core = self.core
        t0 = core.t
        steps = min(cfg.detection_period, cfg.horizon - t0)
        obs = core.adversary_observation()
        batch = core.batch
        step_bus = np.zeros((batch, steps), dtype=np.int64)
        step_k = np.zeros((batch, steps))
        bus = np.zeros(batch, dtype=np.int64)
        k = np.zeros(batch)
        mute = np.zeros(batch, dtype=bool)

        def act(idx, rows):
            a = self.adversaries[idx].act(self.adv_states[idx], t0, steps, obs[rows], self.rng)
            step_bus[rows], step_k[rows] = a.step_bus, a.step_k
            bus[rows], k[rows], mute[rows] = a.bus, a.altered_k, a.mute

        _group_call(self.assign, len(self.adversaries), act)
        self._record_window(self.window, WindowAction(bus, k, mute, step_bus, step_k))
        core.advance(step_bus, step_k)
        self.truth_log[:, self.window] = _batch_truth(step_bus)
        self.window += 1

    @property
    def ground_truth(self) -> np.ndarray:
        """Truth for the window that just elapsed."""
        return self.truth_log[:, self.window - 1]

    def step(self, decision):
        if self.done:
            raise ProtocolError("episode finished; call reset()")
        if not self.pending:
            raise ProtocolError("decision supplied off the detection schedule")
        cfg = self.config
        core = self.core
        decision = np.asarray(decision, dtype=np.int64)
        truth = self.ground_truth
        alive = core.alive
        reward = np.where(decision == truth, cfg.penalty, -cfg.penalty) * alive
        self.detector_decision[core.t - 1] = decision
        self.step_rewards[core.t - 1] = reward
        if core.t + cfg.detection_period <= cfg.horizon:
            self._advance_window()
            obs = self.features(core.t)
        else:
            while core.t < cfg.horizon:
                self._advance_window()
            self.pending = False
            self.done = True
            obs = None
        info = {"ground_truth": truth, "alive": alive}
        return obs, reward, self.done, info

    def step_encoded(self, actions):
        return self.step(np.asarray(actions)[:, 0])


# --- episode logs ------------------------------------------------------------


@dataclass
class EpisodeLog:
    """One episode, step by step; row ``s`` is the transition s -> s+1."""

    role: str
    omega: np.ndarray
    theta: np.ndarray
    reference_omega: np.ndarray
    step_bus: np.ndarray
    step_k: np.ndarray
    mute: np.ndarray
    decision_bus: np.ndarray
    detector_decision: np.ndarray
    rewards: np.ndarray
    config: EpisodeConfig
    opponent: str = ""
    seeds: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)

    def write(self, csv_path, manifest_path=None) -> None:
        n = self.omega.shape[1]
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step"] + [f"omega_{i + 1}" for i in range(n)]
                            + [f"theta_{i + 1}" for i in range(n)]
                            + ["attacked_bus", "altered_k", "mute", "detector_decision", "reward"])
            for s in range(self.step_bus.size):
                dec = int(self.detector_decision[s])
                writer.writerow(
                    [s] + [repr(float(x)) for x in self.omega[s + 1]]
                    + [repr(float(x)) for x in self.theta[s + 1]]
                    + [int(self.step_bus[s]), repr(float(self.step_k[s])), int(bool(self.mute[s])),
                       "" if dec < 0 else dec, repr(float(self.rewards[s]))]
                )
        if manifest_path is not None:
            manifest = {
                "role": self.role,
                "opponent": self.opponent,
                "seeds": self.seeds,
                "hashes": self.hashes,
                "config": self.config.__dict__,
                "initial_omega": self.omega[0].tolist(),
                "initial_theta": self.theta[0].tolist(),
                "reference_omega": self.reference_omega.tolist(),
                "total_reward": float(self.rewards.sum()),
                "steps": int(self.step_bus.size),
            }
            Path(manifest_path).write_text(dumps_json(manifest))


def read_episode_log(csv_path) -> dict:
    """Parse an episode CSV into column arrays."""
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n = sum(1 for key in rows[0] if key.startswith("omega_"))
    return {
        "omega": np.array([[float(r[f"omega_{i + 1}"]) for i in range(n)] for r in rows]),
        "theta": np.array([[float(r[f"theta_{i + 1}"]) for i in range(n)] for r in rows]),
        "attacked_bus": np.array([int(r["attacked_bus"]) for r in rows]),
        "altered_k": np.array([float(r["altered_k"]) for r in rows]),
        "mute": np.array([int(r["mute"]) for r in rows]),
        "detector_decision": np.array(
            [-1 if r["detector_decision"] == "" else int(r["detector_decision"]) for r in rows]),
        "reward": np.array([float(r["reward"]) for r in rows]),
    }


@dataclass
class Scenario:
    """Everything needed to build either environment for one experiment."""

    model: GridModel
    config: EpisodeConfig
    extractor: object
    initial: GridState

    def adversary_env(self, detectors, probs=None) -> AdversaryEnv:
        return AdversaryEnv(self.model, self.config, self.extractor, detectors, self.initial, probs)

    def defender_env(self, adversaries, probs=None) -> DefenderEnv:
        return DefenderEnv(self.model, self.config, self.extractor, adversaries, self.initial, probs)

    def adversary_obs_stats(self):
        """Mean/std of ``[omega, theta, t/T]`` along the unattacked trajectory."""
        ref = rollout_reference(self.model, self.initial, self.config.horizon, self.config.dt)
        frac = np.arange(len(ref))[:, None] / self.config.horizon
        obs = np.concatenate([ref.omega, ref.theta, frac], axis=1)
        std = obs.std(axis=0)
        std[std < 1e-6] = 1.0
        return obs.mean(axis=0), std
