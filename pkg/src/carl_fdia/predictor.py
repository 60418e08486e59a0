"""Next-state predictor over a sliding window, and detector feature vectors.

A state vector is ``concat(omega, theta)`` (length 2n). The predictor sees
the flattened previous ``d - 1`` states and outputs the next state; the
network itself models the standardized increment over the last state.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .grid import GridModel, GridState, Trajectory, rollout_reference
from .nn import MLP, Adam, Checkpoint, NetworkSpec, content_hash, dumps_json, load_checkpoint, save_checkpoint


def state_matrix(traj: Trajectory) -> np.ndarray:
    """(len, 2n) array of ``[omega, theta]`` rows."""
    return np.concatenate([traj.omega, traj.theta], axis=1)


@dataclass
class PredictorConfig:
    window: int = 6  # detection period d; the predictor consumes d - 1 states
    hidden: tuple = ()
    activation: str = "tanh"
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.2
    seed: int = 0


@dataclass
class PredictorModel:
    net: MLP
    window: int  # d
    n: int
    in_shift: np.ndarray
    in_scale: np.ndarray
    out_scale: np.ndarray
    holdout_mse: float = float("nan")
    target_variance: float = float("nan")
    losses: list = field(default_factory=list)

    @property
    def history(self) -> int:
        return self.window - 1

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """``windows``: (batch, d-1, 2n) -> predicted next states (batch, 2n)."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1:] != (self.history, 2 * self.n):
            raise InvalidInputError(
                f"expected windows of shape (*, {self.history}, {2 * self.n}), got {windows.shape}"
            )
        flat = windows.reshape(windows.shape[0], -1)
        x = (flat - self.in_shift) / self.in_scale
        return windows[:, -1, :] + self.net.forward(x) * self.out_scale

    def content_hash(self) -> str:
        blob = np.concatenate([self.net.params, self.in_shift, self.in_scale, self.out_scale])
        return content_hash(self.net.spec, blob)

    def to_checkpoint(self) -> Checkpoint:
        meta = {
            "kind": "state-predictor",
            "window": self.window,
            "n": self.n,
            "in_shift": self.in_shift.tolist(),
            "in_scale": self.in_scale.tolist(),
            "out_scale": self.out_scale.tolist(),
            "holdout_mse": self.holdout_mse,
            "target_variance": self.target_variance,
            "predictor_hash": self.content_hash(),
        }
        return Checkpoint(self.net.spec, self.net.params, metadata=meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PredictorModel":
        meta = ckpt.metadata
        model = cls(
            MLP(ckpt.spec, ckpt.params), int(meta["window"]), int(meta["n"]),
            np.asarray(meta["in_shift"]), np.asarray(meta["in_scale"]), np.asarray(meta["out_scale"]),
            float(meta.get("holdout_mse", "nan")), float(meta.get("target_variance", "nan")),
        )
        if meta.get("predictor_hash") and meta["predictor_hash"] != model.content_hash():
            raise InvalidInputError("predictor checkpoint hash mismatch")
        return model

    def save(self, path) -> None:
        save_checkpoint(self.to_checkpoint(), path)

    @classmethod
    def load(cls, path) -> "PredictorModel":
        return cls.from_checkpoint(load_checkpoint(path))


def sliding_windows(states: np.ndarray, window: int):
    """All (d-1 history, next) pairs from one (len, 2n) state array."""
    count = states.shape[0] - window + 1
    idx = np.arange(window - 1)[None, :] + np.arange(count)[:, None]
    return states[idx], states[window - 1:]


def train_predictor(trajectories: Sequence[Trajectory], config: PredictorConfig = PredictorConfig()) -> PredictorModel:
    """Fit the predictor by Adam on next-state mean squared error."""
    d = config.window
    if d < 2:
        raise InvalidInputError("window must be at least 2")
    if not trajectories:
        raise InvalidInputError("no trajectories supplied")
    hist, targets = [], []
    n = trajectories[0].states[0].n
    for traj in trajectories:
        if any(bus is not None for bus in traj.attacked_bus):
            raise InvalidInputError("predictor training data must be unattacked")
        if len(traj) < d:
            raise InvalidInputError(f"trajectory shorter than window {d}")
        x, y = sliding_windows(state_matrix(traj), d)
        hist.append(x)
        targets.append(y)
    hist = np.concatenate(hist)
    targets = np.concatenate(targets)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(hist.shape[0])
    n_hold = int(round(config.holdout_fraction * hist.shape[0]))
    if hist.shape[0] - n_hold < 1:
        raise InvalidInputError("insufficient data for training")
    hold, train = order[:n_hold], order[n_hold:]

    flat = hist.reshape(hist.shape[0], -1)
    in_shift = flat[train].mean(axis=0)
    in_scale = flat[train].std(axis=0)
    in_scale[in_scale < 1e-12] = 1.0
    increments = targets - hist[:, -1, :]
    out_scale = increments[train].std(axis=0)
    out_scale[out_scale < 1e-12] = 1.0

    spec = NetworkSpec((flat.shape[1],) + tuple(config.hidden) + (2 * n,), config.activation)
    net = MLP.init(spec, rng, output_gain=0.0)  # starts as the persistence forecast
    opt = Adam(net, config.learning_rate)
    x_all = (flat - in_shift) / in_scale
    y_all = increments / out_scale
    losses = []
    for _ in range(config.epochs):
        perm = rng.permutation(train)
        for start in range(0, perm.size, config.batch_size):
            batch = perm[start:start + config.batch_size]
            out, cache = net.forward(x_all[batch], keep_cache=True)
            err = out - y_all[batch]
            losses.append(float(np.mean(err * err)))
            grad, _ = net.backward(cache, 2.0 * err / err.size)
            opt.step(grad)

    model = PredictorModel(net, d, n, in_shift, in_scale, out_scale, losses=losses)
    if n_hold:
        pred = model.predict(hist[hold])
        model.holdout_mse = float(np.mean((pred - targets[hold]) ** 2))
        model.target_variance = float(np.mean(np.var(targets[hold], axis=0)))
    return model


def residual_at(model: PredictorModel, window) -> np.ndarray:
    """Observed last state minus the prediction from the preceding d-1 states.

    ``window`` is a (d, 2n) array of states or a sequence of d GridStates.
    """
    if isinstance(window, (list, tuple)) and window and isinstance(window[0], GridState):
        window = np.stack([np.concatenate([s.omega, s.theta]) for s in window])
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[0] != model.window or window.shape[1] != 2 * model.n:
        raise InvalidInputError(f"window must have shape ({model.window}, {2 * model.n})")
    return window[-1] - model.predict(window[None, :-1])[0]


class FeatureExtractor:
    """Detector observation: raw d-state window plus the end-of-window residual."""

    def __init__(self, predictor: PredictorModel):
        self.predictor = predictor
        self.window = predictor.window
        self.n = predictor.n

    @property
    def size(self) -> int:
        return 2 * self.n * self.window + 2 * self.n

    def __call__(self, windows: np.ndarray) -> np.ndarray:
        """``windows``: (batch, d, 2n) -> features (batch, 2nd + 2n)."""
        windows = np.asarray(windows, dtype=np.float64)
        residual = windows[:, -1, :] - self.predictor.predict(windows[:, :-1, :])
        return np.concatenate([windows.reshape(windows.shape[0], -1), residual], axis=1)


def reference_dataset(
    model: GridModel,
    initial: GridState,
    count: int,
    horizon: int,
    dt: float,
    seed: int,
    perturbation: float = 0.05,
) -> list:
    """Unattacked rollouts from seeded perturbations of ``initial``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        start = GridState(
            initial.theta + rng.uniform(-perturbation, perturbation, model.n),
            initial.omega + rng.uniform(-perturbation, perturbation, model.n),
            initial.t,
        )
        out.append(rollout_reference(model, start, horizon, dt))
    return out


def write_dataset(trajectories: Sequence[Trajectory], directory) -> Path:
    """One trajectory CSV per rollout plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for k, traj in enumerate(trajectories):
        name = f"traj_{k:04d}.csv"
        traj.to_csv(directory / name)
        files.append(name)
    manifest = {"count": len(files), "dt": trajectories[0].dt if trajectories else None, "files": files}
    (directory / "manifest.json").write_text(dumps_json(manifest))
    return directory / "manifest.json"


def read_dataset(directory) -> list:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [Trajectory.from_csv(directory / name, manifest["dt"]) for name in manifest["files"]]
