"""Dense networks, categorical heads, Adam, and JSON checkpoints.

Everything is float64 numpy. Inputs are batched as (batch, features); the
single-vector helpers ``forward``/``backward`` wrap the batched class.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import IncompatibleCheckpointError, InvalidInputError, NumericalDivergenceError

ACTIVATIONS = ("tanh", "relu", "linear")


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple
    activation: str = "tanh"
    head_splits: Optional[tuple] = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise InvalidInputError(f"invalid layer sizes {sizes}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        if self.head_splits is not None:
            heads = tuple(int(h) for h in self.head_splits)
            if any(h <= 0 for h in heads) or sum(heads) != sizes[-1]:
                raise InvalidInputError(f"head splits {heads} do not partition {sizes[-1]} outputs")
            object.__setattr__(self, "head_splits", heads)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def parameter_count(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def shapes(self):
        return [(a, b) for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "head_splits": None if self.head_splits is None else list(self.head_splits),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        return cls(tuple(data["layer_sizes"]), data.get("activation", "tanh"),
                   None if data.get("head_splits") is None else tuple(data["head_splits"]))


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


class MLP:
    """Fully connected network over a single flat parameter vector.

    Hidden layers use ``spec.activation``; the output layer is linear.
    Weight views are (fan_in, fan_out) so ``h @ W + b`` maps a batch forward.
    """

    def __init__(self, spec: NetworkSpec, params: Optional[np.ndarray] = None):
        self.spec = spec
        if params is None:
            params = np.zeros(spec.parameter_count)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (spec.parameter_count,):
            raise InvalidInputError(
                f"parameter vector has {params.size} entries, spec needs {spec.parameter_count}"
            )
        self.params = params.copy()

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator, output_gain: float = 1.0) -> "MLP":
        """Xavier-uniform weights, zero biases; ``output_gain`` scales the last layer."""
        net = cls(spec)
        shapes = spec.shapes()
        for idx, ((w, b), (fan_in, fan_out)) in enumerate(zip(net.layers(), shapes)):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            if idx == len(shapes) - 1:
                limit *= output_gain
            w[...] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            b[...] = 0.0
        return net

    def layers(self, flat: Optional[np.ndarray] = None):
        """(weight, bias) views into ``flat`` (defaults to own parameters)."""
        flat = self.params if flat is None else flat
        views = []
        offset = 0
        for fan_in, fan_out in self.spec.shapes():
            w = flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = flat[offset:offset + fan_out]
            offset += fan_out
            views.append((w, b))
        return views

    def copy(self) -> "MLP":
        return MLP(self.spec, self.params)

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.n_inputs:
            raise InvalidInputError(
                f"expected input of width {self.spec.n_inputs}, got shape {x.shape}"
            )
        return x

    def forward(self, x, keep_cache: bool = False):
        x = self._check_input(x)
        layers = self.layers()
        cache = [x]
        pre = []
        h = x
        for idx, (w, b) in enumerate(layers):
            z = h @ w + b
            if idx < len(layers) - 1:
                pre.append(z)
                h = _act(self.spec.activation, z)
                cache.append(h)
            else:
                h = z
        if keep_cache:
            return h, (cache, pre)
        return h

    def backward(self, cache, grad_out):
        """Gradient of ``sum(grad_out * output)`` w.r.t. parameters and input."""
        acts, pre = cache
        grad_out = np.asarray(grad_out, dtype=np.float64)
        layers = self.layers()
        if grad_out.shape != (acts[0].shape[0], self.spec.n_outputs):
            raise InvalidInputError(f"output gradient has shape {grad_out.shape}")
        grad = np.zeros_like(self.params)
        grad_layers = self.layers(grad)
        delta = grad_out
        for idx in range(len(layers) - 1, -1, -1):
            w, _ = layers[idx]
            gw, gb = grad_layers[idx]
            gw[...] = acts[idx].T @ delta
            gb[...] = delta.sum(axis=0)
            delta = delta @ w.T
            if idx > 0:
                delta = delta * _act_grad(self.spec.activation, pre[idx - 1], acts[idx])
        return grad, delta

    def content_hash(self) -> str:
        return content_hash(self.spec, self.params)


def forward(spec: NetworkSpec, params, x) -> np.ndarray:
    """Single-vector forward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != spec.n_inputs:
        raise InvalidInputError(f"expected input of length {spec.n_inputs}, got shape {x.shape}")
    return MLP(spec, params).forward(x[None, :])[0]


def backward(spec: NetworkSpec, params, x, output_gradient):
    """Single-vector backward pass; returns (parameter gradient, input gradient)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(output_gradient, dtype=np.float64)
    if x.ndim != 1 or x.size != spec.n_inputs:
        raise InvalidInputError(f"expected input of length {spec.n_inputs}, got shape {x.shape}")
    if g.ndim != 1 or g.size != spec.n_outputs:
        raise InvalidInputError(f"expected output gradient of length {spec.n_outputs}")
    net = MLP(spec, params)
    _, cache = net.forward(x[None, :], keep_cache=True)
    grad, dx = net.backward(cache, g[None, :])
    return grad, dx[0]


def logsumexp(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))).squeeze(axis)


class Categorical:
    """Batched categorical distribution over the last axis of ``logits``."""

    def __init__(self, logits):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.size == 0 or logits.shape[-1] == 0:
            raise InvalidInputError("categorical needs at least one logit")
        if not np.all(np.isfinite(logits)):
            raise InvalidInputError("logits must be finite")
        self.logits = logits
        shifted = logits - logits.max(axis=-1, keepdims=True)
        self.log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        self.probs = np.exp(self.log_probs)

    def sample(self, rng: np.random.Generator):
        u = rng.random(self.probs.shape[:-1] + (1,))
        cdf = np.cumsum(self.probs, axis=-1)
        idx = (u > cdf).sum(axis=-1)
        idx = np.minimum(idx, self.probs.shape[-1] - 1)
        return idx if idx.ndim else int(idx)

    def mode(self):
        return np.argmax(self.logits, axis=-1)

    def log_prob(self, index):
        index = np.asarray(index)
        if self.log_probs.ndim == 1:
            return float(self.log_probs[int(index)])
        return np.take_along_axis(self.log_probs, index[..., None].astype(np.intp), axis=-1)[..., 0]

    def entropy(self):
        ent = -np.sum(self.probs * self.log_probs, axis=-1)
        return np.maximum(ent, 0.0)

    def log_prob_grad(self, index):
        """d log_prob(index) / d logits."""
        grad = -self.probs.copy()
        index = np.asarray(index).astype(np.intp)
        if grad.ndim == 1:
            grad[index] += 1.0
        else:
            np.put_along_axis(grad, index[..., None],
                              np.take_along_axis(grad, index[..., None], axis=-1) + 1.0, axis=-1)
        return grad

    def entropy_grad(self):
        """d entropy / d logits."""
        ent = -np.sum(self.probs * self.log_probs, axis=-1, keepdims=True)
        return -self.probs * (self.log_probs + ent)


def categorical_from_logits(logits) -> Categorical:
    return Categorical(logits)


def split_heads(logits, head_splits: Sequence[int]):
    """Split the last axis into one Categorical per head."""
    bounds = np.cumsum((0,) + tuple(head_splits))
    return [Categorical(logits[..., a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass
class OptimizerState:
    """Adam moments; ``step`` counts applied updates."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n_params: int, learning_rate: float = 1e-4) -> "OptimizerState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0, learning_rate)

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "step": self.step,
                "learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerState":
        return cls(np.asarray(data["m"], dtype=np.float64), np.asarray(data["v"], dtype=np.float64),
                   int(data["step"]), float(data["learning_rate"]), float(data["beta1"]),
                   float(data["beta2"]), float(data["eps"]))


def optimizer_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray):
    """Adam with bias correction. Returns (new_params, new_state); inputs untouched."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise InvalidInputError("gradient/moment shapes do not match parameters")
    if not np.all(np.isfinite(grad)):
        raise NumericalDivergenceError("non-finite gradient rejected")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.all(np.isfinite(new_params)):
        raise NumericalDivergenceError("non-finite parameters after update")
    return new_params, OptimizerState(m, v, step, state.learning_rate, state.beta1, state.beta2, state.eps)


class Adam:
    """Stateful convenience wrapper over ``optimizer_step`` for one network."""

    def __init__(self, net: MLP, learning_rate: float = 1e-4):
        self.net = net
        self.state = OptimizerState.zeros(net.params.size, learning_rate)

    def step(self, grad):
        self.net.params, self.state = optimizer_step(self.state, self.net.params, grad)


def content_hash(spec: NetworkSpec, params: np.ndarray) -> str:
    """Git-style blob hash over the spec and the exact parameter bytes."""
    payload = json.dumps(spec.to_dict(), sort_keys=True).encode() + np.ascontiguousarray(
        params, dtype="<f8").tobytes()
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: np.ndarray
    optimizer: Optional[OptimizerState] = None
    seed: Optional[int] = None
    metadata: dict = field(default_factory=dict)

    @property
    def content_hash(self) -> str:
        return content_hash(self.spec, self.params)

    def to_dict(self) -> dict:
        meta = dict(self.metadata)
        meta["content_hash"] = self.content_hash
        return {
            "format": "carl-checkpoint/1",
            "spec": self.spec.to_dict(),
            "params": [float(x) for x in self.params],
            "optimizer": None if self.optimizer is None else self.optimizer.to_dict(),
            "seed": self.seed,
            "metadata": meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Checkpoint":
        if data.get("format") != "carl-checkpoint/1":
            raise IncompatibleCheckpointError(f"unknown checkpoint format {data.get('format')!r}")
        spec = NetworkSpec.from_dict(data["spec"])
        params = np.asarray(data["params"], dtype=np.float64)
        if params.size != spec.parameter_count:
            raise IncompatibleCheckpointError("parameter count does not match spec")
        opt = None if data.get("optimizer") is None else OptimizerState.from_dict(data["optimizer"])
        ckpt = cls(spec, params, opt, data.get("seed"), dict(data.get("metadata", {})))
        stored = ckpt.metadata.get("content_hash")
        if stored is not None and stored != ckpt.content_hash:
            raise IncompatibleCheckpointError("checkpoint content hash mismatch")
        return ckpt


def dumps_json(data, compact: bool = False) -> str:
    """Canonical JSON text used for every artifact written by the package."""
    if compact:
        return json.dumps(data, sort_keys=True, separators=(",", ":")) + "\n"
    return json.dumps(data, indent=1, sort_keys=True) + "\n"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    write_atomic(path, dumps_json(ckpt.to_dict(), compact=True))


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        return Checkpoint.from_dict(json.load(fh))


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
