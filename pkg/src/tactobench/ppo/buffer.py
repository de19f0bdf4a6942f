"""Fixed-horizon on-policy storage."""
from __future__ import annotations

import numpy as np

from .gae import compute_gae


class RolloutBuffer:
    """Time-major ``(horizon, n_envs, ...)`` arrays filled one step at a time.

    Observations are stored already normalised; ``u`` is the pre-squash
    Gaussian sample and ``act`` its ``tanh``.
    """

    def __init__(self, horizon: int, n_envs: int, obs_dim: int, act_dim: int, aux_dim: int = 0):
        self.horizon, self.n_envs = horizon, n_envs
        self.obs = np.zeros((horizon, n_envs, obs_dim))
        self.u = np.zeros((horizon, n_envs, act_dim))
        self.act = np.zeros((horizon, n_envs, act_dim))
        self.logp = np.zeros((horizon, n_envs))
        self.values = np.zeros((horizon, n_envs))
        self.rewards = np.zeros((horizon, n_envs))
        self.terminated = np.zeros((horizon, n_envs), dtype=bool)
        self.truncated = np.zeros((horizon, n_envs), dtype=bool)
        self.final_values = np.zeros((horizon, n_envs))
        self.aux_target = np.zeros((horizon, n_envs, aux_dim))
        self.aux_mask = np.zeros((horizon, n_envs), dtype=bool)
        self.bootstrap = np.zeros(n_envs)
        self.t = 0

    @property
    def full(self) -> bool:
        return self.t == self.horizon

    @property
    def n_samples(self) -> int:
        return self.t * self.n_envs

    def add(self, **fields) -> None:
        if self.full:
            raise RuntimeError("rollout buffer is full")
        for k, v in fields.items():
            getattr(self, k)[self.t] = v
        self.t += 1

    def clear(self) -> None:
        self.t = 0

    def advantages(self, gamma: float, lam: float):
        # recomputed from stored fields only
        return compute_gae(self.rewards, self.values, self.terminated, self.truncated,
                           self.bootstrap, gamma, lam, final_values=self.final_values)

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape(self.horizon * self.n_envs, *a.shape[2:])
