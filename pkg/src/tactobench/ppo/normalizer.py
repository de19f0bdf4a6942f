"""Streaming per-dimension observation statistics."""
from __future__ import annotations

import numpy as np


class RunningNormState:
    """Count / mean / M2 accumulator merged batch-wise (Chan et al.).

    ``frozen`` makes :meth:`update` a no-op, which is how evaluation rollouts
    read the statistics without touching them.
    """

    def __init__(self, dim: int, clip: float = 5.0, eps: float = 1e-8):
        self.dim = dim
        self.clip = clip
        self.eps = eps
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.frozen = False

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count > 0 else np.ones(self.dim)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.var, 0.0))

    def update(self, x: np.ndarray) -> None:
        if self.frozen:
            return
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        n = x.shape[0]
        if n == 0:
            return
        b_mean = x.mean(axis=0)
        b_m2 = ((x - b_mean) ** 2).sum(axis=0)
        tot = self.count + n
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (n / tot)
        self.m2 = self.m2 + b_m2 + delta * delta * (self.count * n / tot)
        self.count = tot

    def normalize(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(z, -self.clip, self.clip)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"count": np.array([self.count]), "mean": self.mean, "m2": self.m2,
                "clip": np.array([self.clip, self.eps])}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.count = float(arrays["count"][0])
        self.mean = np.array(arrays["mean"], dtype=np.float64)
        self.m2 = np.array(arrays["m2"], dtype=np.float64)
        self.clip, self.eps = (float(v) for v in arrays["clip"])
        self.dim = self.mean.size

    def digest_bytes(self) -> bytes:
        return np.array([self.count]).tobytes() + self.mean.tobytes() + self.m2.tobytes()
