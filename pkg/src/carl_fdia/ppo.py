"""Proximal policy optimization over factorized categorical actions."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .agents import Agent
from .errors import InvalidInputError, NumericalDivergenceError
from .nn import OptimizerState, optimizer_step, split_heads

log = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    learning_rate: float = 1e-4
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs_per_batch: int = 4
    minibatch_size: int = 512
    rollout_batch_episodes: int = 20
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise InvalidInputError("clip_epsilon must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise InvalidInputError("gamma and gae_lambda must lie in (0, 1]")
        if self.learning_rate < 0:
            raise InvalidInputError("learning rate must be non-negative")
        if self.minibatch_size < 1 or self.rollout_batch_episodes < 1 or self.epochs_per_batch < 1:
            raise InvalidInputError("batch sizes and epoch counts must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "PpoConfig":
        return cls(**data)


@dataclass
class RolloutBuffer:
    """Decision records in episode-major order."""

    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    episode_ids: np.ndarray
    episode_returns: np.ndarray = field(default_factory=lambda: np.zeros(0))
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self):
        return self.rewards.size


def collect_rollouts(agent: Agent, env, episodes: int, rng: np.random.Generator,
                     batch_size: Optional[int] = None) -> RolloutBuffer:
    """Run ``episodes`` complete episodes of ``env`` with ``agent`` sampling actions.

    ``env`` follows the batched protocol ``reset(batch, rng) -> obs`` and
    ``step_encoded(actions) -> (obs, reward, done, info)``.
    """
    if episodes < 1:
        raise InvalidInputError("need at least one episode")
    batch_size = batch_size or episodes
    parts = []
    ep_offset = 0
    remaining = episodes
    while remaining > 0:
        size = min(batch_size, remaining)
        parts.append(_collect_batch(agent, env, size, rng, ep_offset))
        ep_offset += size
        remaining -= size
    fields = ("obs", "actions", "logp", "values", "rewards", "dones", "episode_ids")
    merged = {f: np.concatenate([getattr(p, f) for p in parts]) for f in fields}
    merged["episode_returns"] = np.concatenate([p.episode_returns for p in parts])
    return RolloutBuffer(**merged)


def _collect_batch(agent, env, size, rng, ep_offset) -> RolloutBuffer:
    obs = env.reset(size, rng)
    rec = {k: [] for k in ("obs", "actions", "logp", "values", "rewards", "alive")}
    done = False
    while not done:
        actions, logp = agent.sample(obs, rng)
        values = agent.values(obs)
        next_obs, reward, done, info = env.step_encoded(actions)
        alive = np.asarray(info.get("alive", np.ones(size, dtype=bool)), dtype=bool)
        rec["obs"].append(obs)
        rec["actions"].append(actions)
        rec["logp"].append(logp)
        rec["values"].append(values)
        rec["rewards"].append(np.asarray(reward, dtype=np.float64))
        rec["alive"].append(alive)
        obs = next_obs
    steps = len(rec["rewards"])
    # (steps, batch, ...) -> (batch, steps, ...) so each episode is contiguous
    stacked = {k: np.swapaxes(np.stack(v), 0, 1) for k, v in rec.items()}
    keep = stacked["alive"]
    dones = np.zeros((size, steps), dtype=bool)
    last = steps - 1 - np.argmax(keep[:, ::-1], axis=1)
    dones[np.arange(size), last] = True
    ep_ids = np.repeat(np.arange(size)[:, None] + ep_offset, steps, axis=1)
    flat_keep = keep.reshape(-1)

    def flat(arr):
        return arr.reshape((size * steps,) + arr.shape[2:])[flat_keep]

    returns = (stacked["rewards"] * keep).sum(axis=1)
    return RolloutBuffer(flat(stacked["obs"]), flat(stacked["actions"]), flat(stacked["logp"]),
                         flat(stacked["values"]), flat(stacked["rewards"]), flat(dones),
                         flat(ep_ids), returns)


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float, normalize: bool = True):
    """Generalized advantage estimates; returns (advantages, returns, raw advantages).

    Return targets use the raw advantages; the (optionally) normalized
    advantages feed the policy loss. Results are also stored on the buffer.
    """
    n = len(buffer)
    if n == 0:
        raise InvalidInputError("empty rollout buffer")
    raw = np.zeros(n)
    gae = 0.0
    next_value = 0.0
    for i in range(n - 1, -1, -1):
        if buffer.dones[i]:
            next_value = 0.0
            gae = 0.0
        delta = buffer.rewards[i] + gamma * next_value - buffer.values[i]
        gae = delta + gamma * lam * gae
        raw[i] = gae
        next_value = buffer.values[i]
    returns = raw + buffer.values
    adv = raw.copy()
    if normalize and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    buffer.advantages = adv
    buffer.returns = returns
    return adv, returns, raw


class PpoLearner:
    """Owns the optimizer states for one agent's policy and value networks."""

    def __init__(self, agent: Agent, config: PpoConfig):
        self.agent = agent
        self.config = config
        self.policy_opt = OptimizerState.zeros(agent.policy.params.size, config.learning_rate)
        self.value_opt = OptimizerState.zeros(agent.value.params.size, config.learning_rate)

    def optimizers(self):
        return {"policy": self.policy_opt, "value": self.value_opt}

    def update(self, buffer: RolloutBuffer, rng: np.random.Generator) -> dict:
        return ppo_update(self, buffer, rng)


def _clip_norm(grad, max_norm):
    norm = float(np.sqrt(np.sum(grad * grad)))
    if max_norm and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def policy_loss_and_grad(agent: Agent, obs, actions, old_logp, adv, clip_eps, entropy_coef):
    """Clipped surrogate + entropy bonus for a minibatch; returns (loss, grad, stats)."""
    policy = agent.policy
    x = agent.normalize(obs)
    logits, cache = policy.forward(x, keep_cache=True)
    dists = split_heads(logits, agent.heads)
    logp = sum(dist.log_prob(actions[:, h]) for h, dist in enumerate(dists))
    entropy = sum(dist.entropy() for dist in dists)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surr = np.minimum(ratio * adv, clipped * adv)
    m = obs.shape[0]
    loss = -surr.mean() - entropy_coef * entropy.mean()
    # gradient flows through the unclipped branch only where it is the minimum
    active = (ratio * adv) <= (clipped * adv)
    dlogp = np.where(active, -adv * ratio, 0.0) / m
    grad_logits = np.empty_like(logits)
    offset = 0
    for h, dist in enumerate(dists):
        width = agent.heads[h]
        grad_logits[:, offset:offset + width] = (
            dlogp[:, None] * dist.log_prob_grad(actions[:, h])
            - (entropy_coef / m) * dist.entropy_grad()
        )
        offset += width
    grad, _ = policy.backward(cache, grad_logits)
    stats = {
        "approx_kl": float(np.mean(old_logp - logp)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
        "entropy": float(entropy.mean()),
    }
    return float(loss), grad, stats


def value_loss_and_grad(agent: Agent, obs, returns, value_coef):
    x = agent.normalize(obs)
    out, cache = agent.value.forward(x, keep_cache=True)
    err = out[:, 0] - returns
    loss = value_coef * float(np.mean(err * err))
    grad, _ = agent.value.backward(cache, (2.0 * value_coef * err / err.size)[:, None])
    return loss, grad


def ppo_update(learner: PpoLearner, buffer: RolloutBuffer, rng: np.random.Generator) -> dict:
    """Several epochs of minibatch PPO on ``buffer`` (advantages must be computed)."""
    if buffer.advantages is None:
        raise InvalidInputError("compute advantages before updating")
    cfg = learner.config
    agent = learner.agent
    n = len(buffer)
    stats = {"policy_loss": [], "value_loss": [], "approx_kl": [], "clip_fraction": [], "entropy": []}
    for _ in range(cfg.epochs_per_batch):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            p_loss, p_grad, p_stats = policy_loss_and_grad(
                agent, buffer.obs[idx], buffer.actions[idx], buffer.logp[idx],
                buffer.advantages[idx], cfg.clip_epsilon, cfg.entropy_coef)
            v_loss, v_grad = value_loss_and_grad(agent, buffer.obs[idx], buffer.returns[idx], cfg.value_coef)
            if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
                raise NumericalDivergenceError(
                    f"non-finite PPO loss (policy {p_loss}, value {v_loss})")
            p_grad, _ = _clip_norm(p_grad, cfg.max_grad_norm)
            v_grad, _ = _clip_norm(v_grad, cfg.max_grad_norm)
            agent.policy.params, learner.policy_opt = optimizer_step(learner.policy_opt, agent.policy.params, p_grad)
            agent.value.params, learner.value_opt = optimizer_step(learner.value_opt, agent.value.params, v_grad)
            stats["policy_loss"].append(p_loss)
            stats["value_loss"].append(v_loss)
            for key in ("approx_kl", "clip_fraction", "entropy"):
                stats[key].append(p_stats[key])
    return {key: float(np.mean(vals)) for key, vals in stats.items()}


CURVE_FIELDS = ("update", "episodes", "mean_episode_reward", "approx_kl", "clip_fraction",
                "entropy", "policy_loss", "value_loss")


def train_ppo(agent: Agent, env, config: PpoConfig, episodes: int, rng: np.random.Generator,
              early_stop: bool = False, progress: Optional[Callable[[dict], None]] = None):
    """Train ``agent`` in ``env`` for ``episodes`` episodes; returns (learner, curve rows).

    With ``early_stop`` the phase ends once the 100-episode moving average of
    episode reward has stayed within 1% for 500 episodes.
    """
    learner = PpoLearner(agent, config)
    curve = []
    history = []
    done_eps = 0
    update = 0
    while done_eps < episodes:
        size = min(config.rollout_batch_episodes, episodes - done_eps)
        buffer = collect_rollouts(agent, env, size, rng)
        compute_gae(buffer, config.gamma, config.gae_lambda)
        diag = learner.update(buffer, rng)
        done_eps += size
        update += 1
        history.extend(buffer.episode_returns.tolist())
        row = {"update": update, "episodes": done_eps,
               "mean_episode_reward": float(np.mean(buffer.episode_returns))}
        row.update(diag)
        curve.append(row)
        if progress:
            progress(row)
        if early_stop and _plateaued(history):
            log.info("reward plateau after %d episodes", done_eps)
            break
    return learner, curve


def _plateaued(history, window=100, span=500, tol=0.01) -> bool:
    """True when the ``window``-episode moving average stayed within ``tol``
    (relative) of its current value over the last ``span`` episodes."""
    if len(history) < span + window:
        return False
    h = np.asarray(history[-(span + window):], dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(h)])
    moving = (csum[window:] - csum[:-window]) / window
    ref = moving[-1]
    return bool(np.all(np.abs(moving - ref) <= tol * max(abs(ref), 1e-12)))


def write_curve(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
