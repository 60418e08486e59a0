"""Hand-built environments following the batched env protocol."""
import numpy as np


class TwoArmedBandit:
    """One decision per episode; arm ``good`` pays +1, the other -1.

    The observation is a random context in [-1, 1] that carries no
    information about the payout, so the optimal policy is context-free.
    """

    observation_size = 1

    def __init__(self, good: int = 1):
        self.good = good

    def reset(self, batch, rng):
        self.batch = batch
        return rng.uniform(-1, 1, (batch, 1))

    def step_encoded(self, actions):
        arm = np.asarray(actions)[:, 0]
        reward = np.where(arm == self.good, 1.0, -1.0)
        return None, reward, True, {}


class CountingEnv:
    """``length`` decisions per episode with reward 1 each."""

    observation_size = 2

    def __init__(self, length: int):
        self.length = length

    def reset(self, batch, rng):
        self.batch = batch
        self.t = 0
        return np.zeros((batch, 2))

    def step_encoded(self, actions):
        self.t += 1
        done = self.t >= self.length
        obs = None if done else np.full((self.batch, 2), float(self.t))
        return obs, np.ones(self.batch), done, {}
