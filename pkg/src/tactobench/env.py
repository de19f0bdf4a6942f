"""Vectorised tactile-manipulation environment.

One :class:`VecEnv` holds a batch of independent worlds stepped together at
the control rate.  Training and evaluation use separate instances with
separate random streams (``stream`` 0 and 1), so stepping one never touches
the other's randomness.

Observation frame layout (oldest frame first in the stacked vector)::

    [tactile bits | joint pos | joint vel | command error | last action]
    (+ [ball positions | ball velocities] in state mode)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .morphology import MorphologyConfig, action_to_joint_targets, command_error
from .physics import PhysicsConfig, Stepper, WorldBatch
from .tasks import (Status, TaskConfig, TaskState, check_termination, compute_baoding_step,
                    update_bounce)

TRAIN_STREAM, EVAL_STREAM = 0, 1
MODES = ("blind", "state")


@dataclass(frozen=True)
class EnvBatchConfig:
    n_train: int = 8092
    n_eval: int = 100
    seed: int = 0
    morphology: str = "shadow"
    task: str = "bounce"
    observation_mode: str = "blind"
    stack_k: int = 4
    # reset distribution
    joint_noise: float = 0.05
    bounce_height: float = 0.08
    baoding_jitter: float = 0.003


@dataclass
class StepResult:
    observations: np.ndarray
    rewards: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    info: dict = field(default_factory=dict)


def episode_rng(seed: int, stream: int, env_index: int, episode: int) -> np.random.Generator:
    """Counter-based generator for one (seed, stream, env, episode) cell."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream], dtype=np.uint64)
    counter = np.array([0, 0, env_index, episode], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def frame_width(morph: MorphologyConfig, task: TaskConfig, mode: str) -> int:
    return morph.frame_width + (6 * task.n_balls if mode == "state" else 0)


def assemble_frame(world: WorldBatch, morph: MorphologyConfig, mode: str,
                   last_action: np.ndarray) -> np.ndarray:
    """Single-timestep observation for every env (blocks in table row order)."""
    n = world.n_envs
    parts = [
        world.tactile.astype(np.float64),
        world.q,
        world.qdot,
        command_error(world.q_cmd, world.q, morph),
        last_action,
    ]
    if mode == "state":
        parts += [world.ball_pos.reshape(n, -1), world.ball_vel.reshape(n, -1)]
    return np.concatenate(parts, axis=1)


class VecEnv:
    """Batch of ``n_envs`` environments with auto-reset."""

    def __init__(self, morph: MorphologyConfig, task: TaskConfig, physics: PhysicsConfig,
                 n_envs: int, seed: int = 0, stream: int = TRAIN_STREAM, mode: str = "blind",
                 stack_k: int = 4, joint_noise: float = 0.05, bounce_height: float = 0.08,
                 baoding_jitter: float = 0.003, backend: str | None = None, n_threads: int = 1):
        if mode not in MODES:
            raise ValueError(f"observation mode must be one of {MODES}, got {mode!r}")
        self.morph, self.task, self.physics = morph, task, physics
        self.n_envs, self.seed, self.stream, self.mode, self.k = n_envs, seed, stream, mode, stack_k
        self.joint_noise, self.bounce_height, self.baoding_jitter = joint_noise, bounce_height, baoding_jitter
        e = physics.restitution_baoding_ball if task.task == "baoding" else physics.restitution_bounce_ball
        self.stepper = Stepper(morph, physics, e, backend=backend, n_threads=n_threads)
        self.world = WorldBatch.allocate(n_envs, morph, task.n_balls)
        self.state = TaskState.zeros(n_envs)
        self.targets = task.targets(morph.ball_radius)
        self.frame_width = frame_width(morph, task, mode)
        self.obs_width = stack_k * self.frame_width
        la_width = morph.n_actions if morph.last_action_in_action_space else morph.n_joints
        self.last_action = np.zeros((n_envs, la_width))
        self.stack = np.zeros((n_envs, stack_k, self.frame_width))
        self.episode = np.zeros(n_envs, dtype=np.int64)
        self.ep_return = np.zeros(n_envs)
        self.env_steps = 0
        self._started = False

    @classmethod
    def from_config(cls, cfg: EnvBatchConfig, morph: MorphologyConfig, task: TaskConfig,
                    physics: PhysicsConfig, eval_batch: bool = False, **kw) -> "VecEnv":
        return cls(morph, task, physics, cfg.n_eval if eval_batch else cfg.n_train, seed=cfg.seed,
                   stream=EVAL_STREAM if eval_batch else TRAIN_STREAM, mode=cfg.observation_mode,
                   stack_k=cfg.stack_k, joint_noise=cfg.joint_noise, bounce_height=cfg.bounce_height,
                   baoding_jitter=cfg.baoding_jitter, **kw)

    @property
    def n_threads(self) -> int:
        return self.stepper.n_threads

    @n_threads.setter
    def n_threads(self, n: int) -> None:
        self.stepper.close()
        self.stepper.n_threads = max(1, int(n))

    # -- reset ---------------------------------------------------------------
    def reset(self, env_mask: np.ndarray | None = None) -> np.ndarray:
        """Reset the selected envs (all when ``env_mask`` is None); returns the
        full observation batch."""
        idx = np.arange(self.n_envs) if env_mask is None else np.flatnonzero(env_mask)
        if idx.size:
            self._reset_idx(idx)
        self._started = True
        return self.observations()

    def _reset_idx(self, idx: np.ndarray) -> None:
        m, w = self.morph, self.world
        nj, nb = m.n_joints, self.task.n_balls
        u = np.empty((idx.size, nj + 3 * nb))
        for row, i in enumerate(idx):
            u[row] = episode_rng(self.seed, self.stream, int(i), int(self.episode[i])).uniform(
                -1.0, 1.0, nj + 3 * nb)
        self.episode[idx] += 1
        lim = m.joint_limits
        q = np.clip(m.joint_mid + self.joint_noise * u[:, :nj], lim[:, 0], lim[:, 1])
        w.q[idx] = q
        w.q_cmd[idx] = q
        w.qdot[idx] = 0.0
        jit = u[:, nj:].reshape(idx.size, nb, 3)
        r = m.ball_radius
        if self.task.task == "bounce":
            pos = np.zeros((idx.size, 1, 3))
            pos[:, 0, 0] = m.bounce_jitter[0] * jit[:, 0, 0]
            pos[:, 0, 1] = m.bounce_jitter[1] * jit[:, 0, 1]
            pos[:, 0, 2] = self.bounce_height + r
        else:
            # planar jitter with norm <= baoding_jitter
            off = jit.copy()
            off[..., 2] = 0.0
            off *= self.baoding_jitter / np.sqrt(2.0)
            pos = self.targets[None] + off
        w.ball_pos[idx] = pos
        w.ball_vel[idx] = 0.0
        w.corrupt[idx] = 0
        w.tactile[idx] = 0
        sub = WorldBatch(**{k: np.ascontiguousarray(v[idx]) for k, v in w.arrays().items()})
        self.stepper.forward_kinematics(sub)
        for k in ("link_a", "link_b", "link_rot", "joint_origin", "joint_axis"):
            getattr(w, k)[idx] = getattr(sub, k)
        self.state.clear(idx)
        if self.morph.last_action_in_action_space:
            self.last_action[idx] = 0.0
        else:
            self.last_action[idx] = q
        self.ep_return[idx] = 0.0
        frame = assemble_frame(sub, m, self.mode, self.last_action[idx])
        self.stack[idx] = frame[:, None, :]

    def observations(self) -> np.ndarray:
        return self.stack.reshape(self.n_envs, -1).copy()

    # -- step ----------------------------------------------------------------
    def step(self, actions: np.ndarray) -> StepResult:
        if not self._started:
            self.reset()
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n_envs, self.morph.n_actions):
            raise ValueError(f"actions must have shape {(self.n_envs, self.morph.n_actions)}, "
                             f"got {actions.shape}")
        bad_action = ~np.isfinite(actions).all(axis=1)
        actions = np.clip(np.where(bad_action[:, None], 0.0, actions), -1.0, 1.0)
        w, st, cfg = self.world, self.state, self.task
        w.q_cmd[...] = action_to_joint_targets(actions, self.morph)
        self.stepper.step(w)
        st.steps_elapsed += 1
        corrupt = w.corrupt.astype(bool)
        if cfg.task == "bounce":
            st, reward = update_bounce(st, w.tactile.any(axis=1), cfg)
        else:
            st, reward, _ = compute_baoding_step(st, w.ball_pos, cfg, self.targets)
        status = check_termination(st, w.ball_pos, cfg)
        failed = bad_action | corrupt
        reward = np.where(failed, 0.0, reward)
        status[failed] = Status.TERMINATED
        terminated = status == Status.TERMINATED
        truncated = status == Status.TRUNCATED
        self.last_action[...] = actions if self.morph.last_action_in_action_space else w.q_cmd
        frame = assemble_frame(w, self.morph, self.mode, self.last_action)
        if failed.any():
            frame[failed] = 0.0
        self.stack[:, :-1] = self.stack[:, 1:]
        self.stack[:, -1] = frame
        self.ep_return += reward
        self.env_steps += self.n_envs
        done = terminated | truncated
        info = {
            "bounces": st.bounce_count.copy(),
            "switches": st.switch_count.copy(),
            "invalid_action": bad_action,
            "corrupt": corrupt,
            "done": done,
        }
        if done.any():
            info["final_observation"] = self.stack[done].reshape(int(done.sum()), -1).copy()
            info["episode_return"] = self.ep_return[done].copy()
            info["episode_length"] = st.steps_elapsed[done].copy()
            info["episode_bounces"] = st.bounce_count[done].copy()
            info["episode_switches"] = st.switch_count[done].copy()
            self._reset_idx(np.flatnonzero(done))
        return StepResult(self.observations(), reward, terminated, truncated, info)

    # -- persistence ---------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"world.{k}": v for k, v in self.world.arrays().items()}
        out.update({f"task.{k}": v for k, v in self.state.arrays().items()})
        out.update({"last_action": self.last_action, "stack": self.stack, "episode": self.episode,
                    "ep_return": self.ep_return,
                    "meta": np.array([self.env_steps, int(self._started)], dtype=np.int64)})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k == "meta":
                self.env_steps, started = (int(x) for x in v)
                self._started = bool(started)
                continue
            head, _, name = k.partition(".")
            if head == "world":
                getattr(self.world, name)[...] = v
            elif head == "task":
                getattr(self.state, name)[...] = v
            else:
                getattr(self, k)[...] = v

    def close(self) -> None:
        self.stepper.close()
