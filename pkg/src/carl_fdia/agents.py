"""Policy/value agents and their adapters as frozen environment opponents."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .env import WindowAction, decode_adversary, encode_adversary, held_action
from .errors import IncompatibleCheckpointError
from .nn import MLP, Checkpoint, NetworkSpec, content_hash, dumps_json, load_checkpoint, save_checkpoint, split_heads, write_atomic

ADVERSARY = "adversary"
DETECTOR = "detector"


def adversary_spec(n: int, hidden=(256, 256), activation="tanh") -> NetworkSpec:
    return NetworkSpec((2 * n + 1,) + tuple(hidden) + (n + 3 + 2,), activation, (n, 3, 2))


def detector_spec(n: int, d: int, hidden=(256, 256), activation="tanh") -> NetworkSpec:
    return NetworkSpec((2 * n * d + 2 * n,) + tuple(hidden) + (n + 1,), activation, (n + 1,))


def value_spec(policy: NetworkSpec) -> NetworkSpec:
    return NetworkSpec((policy.n_inputs,) + policy.layer_sizes[1:-1] + (1,), policy.activation)


class Agent:
    """A stochastic categorical policy with a separate value network.

    Observations are standardized with ``obs_shift``/``obs_scale`` before
    reaching either network; these are frozen at creation.
    """

    def __init__(self, name: str, kind: str, policy: MLP, value: Optional[MLP],
                 obs_shift, obs_scale, lineage=None, metadata=None):
        self.name = name
        self.kind = kind
        self.policy = policy
        self.value = value
        self.obs_shift = np.asarray(obs_shift, dtype=np.float64)
        self.obs_scale = np.asarray(obs_scale, dtype=np.float64)
        self.lineage = list(lineage or [])
        self.metadata = dict(metadata or {})

    @classmethod
    def create(cls, name, kind, spec: NetworkSpec, rng, obs_shift=None, obs_scale=None,
               output_gain: float = 0.01) -> "Agent":
        policy = MLP.init(spec, rng, output_gain=output_gain)
        value = MLP.init(value_spec(spec), rng)
        shift = np.zeros(spec.n_inputs) if obs_shift is None else obs_shift
        scale = np.ones(spec.n_inputs) if obs_scale is None else obs_scale
        return cls(name, kind, policy, value, shift, scale)

    @property
    def heads(self):
        return self.policy.spec.head_splits or (self.policy.spec.n_outputs,)

    @property
    def policy_hash(self) -> str:
        blob = np.concatenate([self.policy.params, self.obs_shift, self.obs_scale])
        return content_hash(self.policy.spec, blob)

    def normalize(self, obs):
        return (np.asarray(obs, dtype=np.float64) - self.obs_shift) / self.obs_scale

    def distributions(self, obs):
        return split_heads(self.policy.forward(self.normalize(obs)), self.heads)

    def sample(self, obs, rng):
        """Return (actions (batch, heads), joint log-prob (batch,))."""
        dists = self.distributions(obs)
        actions = np.stack([dist.sample(rng) for dist in dists], axis=1)
        logp = sum(dist.log_prob(actions[:, h]) for h, dist in enumerate(dists))
        return actions, logp

    def greedy(self, obs):
        return np.stack([dist.mode() for dist in self.distributions(obs)], axis=1)

    def values(self, obs):
        return self.value.forward(self.normalize(obs))[:, 0]

    # -- persistence --------------------------------------------------------

    def save(self, directory, optimizers=None, seed=None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        optimizers = optimizers or {}
        meta = {"name": self.name, "kind": self.kind}
        meta.update(self.metadata)
        save_checkpoint(Checkpoint(self.policy.spec, self.policy.params, optimizers.get("policy"),
                                   seed, dict(meta, role="policy")), directory / "policy.json")
        if self.value is not None:
            save_checkpoint(Checkpoint(self.value.spec, self.value.params, optimizers.get("value"),
                                       seed, dict(meta, role="value")), directory / "value.json")
        manifest = {
            "name": self.name,
            "kind": self.kind,
            "obs_shift": self.obs_shift.tolist(),
            "obs_scale": self.obs_scale.tolist(),
            "lineage": self.lineage,
            "metadata": self.metadata,
            "policy_hash": self.policy_hash,
        }
        write_atomic(directory / "agent.json", dumps_json(manifest))

    @classmethod
    def load(cls, directory) -> "Agent":
        directory = Path(directory)
        manifest = json.loads((directory / "agent.json").read_text())
        policy_ckpt = load_checkpoint(directory / "policy.json")
        value = None
        if (directory / "value.json").exists():
            vc = load_checkpoint(directory / "value.json")
            value = MLP(vc.spec, vc.params)
        agent = cls(manifest["name"], manifest["kind"], MLP(policy_ckpt.spec, policy_ckpt.params), value,
                    manifest["obs_shift"], manifest["obs_scale"], manifest["lineage"], manifest["metadata"])
        if agent.policy_hash != manifest["policy_hash"]:
            raise IncompatibleCheckpointError(f"policy hash mismatch in {directory}")
        return agent


def warm_start(source: Agent, name: str, rng=None, lineage_entry=None, copy_value: bool = True) -> Agent:
    """New agent with ``source``'s parameters copied exactly.

    A fresh value network is drawn when the source has none (e.g. a
    supervised detector) or when ``copy_value`` is false.
    """
    policy = source.policy.copy()
    if source.value is not None and copy_value:
        value = source.value.copy()
    else:
        value = MLP.init(value_spec(policy.spec), rng if rng is not None else np.random.default_rng(0))
    lineage = list(source.lineage)
    entry = {"warm_start_from": source.name, "source_hash": source.policy_hash}
    if lineage_entry:
        entry.update(lineage_entry)
    lineage.append(entry)
    return Agent(name, source.kind, policy, value, source.obs_shift.copy(), source.obs_scale.copy(),
                 lineage, dict(source.metadata))


def check_compatible(agent: Agent, spec: NetworkSpec) -> None:
    if agent.policy.spec != spec:
        raise IncompatibleCheckpointError(
            f"agent {agent.name} has spec {agent.policy.spec.layer_sizes}, expected {spec.layer_sizes}"
        )


class PolicyAdversary:
    """Frozen RL adversary acting inside FDI^D (samples its stochastic policy)."""

    def __init__(self, agent: Agent, greedy: bool = False):
        self.agent = agent
        self.name = agent.name
        self.greedy = greedy

    def start(self, size, rng, horizon):
        return None

    def act(self, state, t0, steps, obs, rng) -> WindowAction:
        actions = self.agent.greedy(obs) if self.greedy else self.agent.sample(obs, rng)[0]
        bus, k, mute = decode_adversary(actions)
        return held_action(bus, k, mute, steps)


class PolicyDetector:
    """Frozen detector: argmax class of the policy head (0 = no attack)."""

    def __init__(self, agent: Agent):
        self.agent = agent
        self.name = agent.name

    def decide(self, features, truth=None):
        return self.agent.greedy(features)[:, 0].astype(np.int64)
