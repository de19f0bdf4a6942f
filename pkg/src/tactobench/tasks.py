"""Bounce and Baoding reward machines and termination rules.

All functions are batched over envs and run once per control step.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

TASKS = ("bounce", "baoding")


class Status(IntEnum):
    RUNNING = 0
    TRUNCATED = 1
    TERMINATED = 2


@dataclass(frozen=True)
class TaskConfig:
    task: str = "bounce"
    r_bounce: float = 10.0
    r_rotation: float = 10.0
    switch_radius: float = 0.01
    min_gap_steps: int = 5
    max_episode_steps: int = 600
    dist_weight: float = 0.05
    dist_sharpness: float = 30.0
    # None: +/- max(2 cm, ball radius + 1 mm) along the palm's lateral axis
    target_positions: tuple[tuple[float, float, float], tuple[float, float, float]] | None = None
    out_of_reach_halfextent: float = 0.25

    @property
    def n_balls(self) -> int:
        return 2 if self.task == "baoding" else 1

    def targets(self, ball_radius: float) -> np.ndarray:
        if self.target_positions is not None:
            return np.asarray(self.target_positions, dtype=np.float64)
        y = max(0.02, ball_radius + 0.001)
        return np.array([[0.0, -y, ball_radius], [0.0, y, ball_radius]])

    def validate(self) -> list[str]:
        problems = []
        if self.task not in TASKS:
            problems.append(f"task must be one of {TASKS}, got {self.task!r}")
        if self.min_gap_steps < 0 or self.max_episode_steps < 1:
            problems.append("min_gap_steps must be >= 0 and max_episode_steps >= 1")
        if self.switch_radius <= 0 or self.out_of_reach_halfextent <= 0:
            problems.append("switch_radius and out_of_reach_halfextent must be positive")
        return problems


@dataclass
class TaskState:
    no_contact_streak: np.ndarray
    bounce_count: np.ndarray
    target_parity: np.ndarray
    switch_count: np.ndarray
    steps_elapsed: np.ndarray

    @classmethod
    def zeros(cls, n_envs: int) -> "TaskState":
        z = lambda: np.zeros(n_envs, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z(), z())

    def clear(self, mask: np.ndarray | slice = slice(None)) -> None:
        for arr in self.arrays().values():
            arr[mask] = 0

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "no_contact_streak": self.no_contact_streak, "bounce_count": self.bounce_count,
            "target_parity": self.target_parity, "switch_count": self.switch_count,
            "steps_elapsed": self.steps_elapsed,
        }

    @property
    def rotations(self) -> np.ndarray:
        # one full revolution of the pair = two target switches
        return self.switch_count / 2.0


def update_bounce(state: TaskState, any_contact, cfg: TaskConfig) -> tuple[TaskState, np.ndarray]:
    """A contact after at least ``min_gap_steps`` contact-free steps is a bounce."""
    c = np.asarray(any_contact, dtype=bool)
    bounce = c & (state.no_contact_streak >= cfg.min_gap_steps)
    state.bounce_count += bounce
    state.no_contact_streak[...] = np.where(c, 0, state.no_contact_streak + 1)
    return state, np.where(bounce, cfg.r_bounce, 0.0)


def assigned_targets(parity: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """(n_envs, 2, 3) targets per ball; parity 1 swaps the assignment."""
    t = np.broadcast_to(targets, (len(parity), 2, 3))
    return np.where(np.asarray(parity, bool)[:, None, None], t[:, ::-1], t)


def compute_baoding_step(state: TaskState, ball_pos: np.ndarray, cfg: TaskConfig,
                         targets: np.ndarray) -> tuple[TaskState, np.ndarray, np.ndarray]:
    """Dense distance reward for both balls plus the rotation bonus.

    When both balls are within ``switch_radius`` (inclusive) of their
    assigned targets, the assignment swaps and ``r_rotation`` is paid.
    Envs with non-finite ball positions get zero reward and never switch;
    :func:`check_termination` ends them.
    """
    ball_pos = np.asarray(ball_pos, dtype=np.float64)
    d = np.linalg.norm(ball_pos - assigned_targets(state.target_parity, targets), axis=-1)
    finite = np.isfinite(d).all(axis=1)
    dense = cfg.dist_weight * np.exp(-cfg.dist_sharpness * d[:, 0]) \
        + cfg.dist_weight * np.exp(-cfg.dist_sharpness * d[:, 1])
    switched = finite & (d[:, 0] <= cfg.switch_radius) & (d[:, 1] <= cfg.switch_radius)
    reward = np.where(finite, dense + np.where(switched, cfg.r_rotation, 0.0), 0.0)
    state.target_parity ^= switched.astype(np.int64)
    state.switch_count += switched
    return state, reward, switched


def check_termination(state: TaskState, ball_pos: np.ndarray, cfg: TaskConfig) -> np.ndarray:
    """Per-env :class:`Status`; leaving the palm-frame box (or a non-finite
    position) terminates, reaching ``max_episode_steps`` truncates."""
    p = np.asarray(ball_pos, dtype=np.float64)
    inside = (np.abs(p) <= cfg.out_of_reach_halfextent).all(axis=(-1, -2))
    status = np.where(state.steps_elapsed >= cfg.max_episode_steps, Status.TRUNCATED, Status.RUNNING)
    return np.where(~inside, Status.TERMINATED, status).astype(np.int64)


def replay_contact_schedule(schedule, cfg: TaskConfig, n_episodes: int = 1) -> dict:
    """Drive the Bounce machine with a fixed contact pattern (no physics).

    ``schedule`` is a boolean sequence repeated cyclically from step 1 of
    every episode; episodes run to truncation.  Used for scripted-oracle
    checks of the reward and reporting path.
    """
    pattern = np.asarray(schedule, dtype=bool)
    state = TaskState.zeros(n_episodes)
    ret = np.zeros(n_episodes)
    for t in range(cfg.max_episode_steps):
        state.steps_elapsed += 1
        state, r = update_bounce(state, np.full(n_episodes, pattern[t % len(pattern)]), cfg)
        ret += r
    return {"returns": ret, "bounces": state.bounce_count.copy(),
            "lengths": state.steps_elapsed.copy()}


# the schedule attaining the maximum Bounce return: five airborne steps, then a contact
PERIOD6_SCHEDULE = (False,) * 5 + (True,)
