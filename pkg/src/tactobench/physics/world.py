"""Physical state containers for a batch of environments."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from ..morphology import MorphologyConfig


@dataclass(frozen=True)
class PhysicsConfig:
    dt_sim: float = 1.0 / 240.0
    substeps_per_control: int = 4
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    restitution_bounce_ball: float = 0.8
    restitution_baoding_ball: float = 0.1
    friction_mu: float = 0.5
    pd_kp: float = 20.0
    pd_kd: float = 0.5
    max_joint_torque: float = 2.0
    # below this approach speed (m/s) contacts are treated as inelastic
    rest_velocity_threshold: float = 0.1
    contact_slop: float = 1e-4
    position_correction: float = 0.8

    @property
    def control_dt(self) -> float:
        return self.dt_sim * self.substeps_per_control

    def validate(self) -> list[str]:
        problems = []
        if not self.dt_sim > 0:
            problems.append("dt_sim must be positive")
        if self.substeps_per_control < 1:
            problems.append("substeps_per_control must be >= 1")
        for name in ("restitution_bounce_ball", "restitution_baoding_ball"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if self.friction_mu < 0:
            problems.append("friction_mu must be >= 0")
        if self.max_joint_torque <= 0:
            problems.append("max_joint_torque must be positive")
        return problems

    def kernel_params(self, restitution: float) -> np.ndarray:
        """Pack the scalars consumed by the stepping kernels (fixed order)."""
        g = self.gravity
        return np.array([
            self.dt_sim, g[0], g[1], g[2], self.pd_kp, self.pd_kd, self.max_joint_torque,
            restitution, self.friction_mu, self.rest_velocity_threshold, self.contact_slop,
            self.position_correction,
        ], dtype=np.float64)


@dataclass
class WorldBatch:
    """Field-major state of ``n_envs`` parallel worlds.

    Every array has the env index as its leading dimension.  Link geometry
    (``link_a``/``link_b`` capsule endpoints, ``link_rot`` frames) and the
    world-frame joint origins/axes are derived from ``q`` by forward
    kinematics and kept current by the stepping kernels.
    """

    q: np.ndarray
    qdot: np.ndarray
    q_cmd: np.ndarray
    ball_pos: np.ndarray
    ball_vel: np.ndarray
    ball_radius: np.ndarray
    ball_mass: np.ndarray
    link_a: np.ndarray
    link_b: np.ndarray
    link_rot: np.ndarray
    joint_origin: np.ndarray
    joint_axis: np.ndarray
    tactile: np.ndarray
    corrupt: np.ndarray

    @classmethod
    def allocate(cls, n_envs: int, morph: MorphologyConfig, n_balls: int,
                 ball_radius: float | None = None, ball_mass: float = 0.055) -> "WorldBatch":
        j, l = morph.n_joints, morph.n_links
        r = morph.ball_radius if ball_radius is None else ball_radius
        z = np.zeros
        return cls(
            q=z((n_envs, j)), qdot=z((n_envs, j)), q_cmd=z((n_envs, j)),
            ball_pos=z((n_envs, n_balls, 3)), ball_vel=z((n_envs, n_balls, 3)),
            ball_radius=np.full((n_envs, n_balls), r), ball_mass=np.full((n_envs, n_balls), ball_mass),
            link_a=z((n_envs, l, 3)), link_b=z((n_envs, l, 3)), link_rot=z((n_envs, l, 3, 3)),
            joint_origin=z((n_envs, j, 3)), joint_axis=z((n_envs, j, 3)),
            tactile=z((n_envs, morph.n_tactile), dtype=np.uint8),
            corrupt=z(n_envs, dtype=np.uint8),
        )

    @property
    def n_envs(self) -> int:
        return self.q.shape[0]

    @property
    def n_balls(self) -> int:
        return self.ball_pos.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "WorldBatch":
        return WorldBatch(**{k: v.copy() for k, v in self.arrays().items()})

    def digest(self) -> str:
        """SHA-256 over every state array; equal digests mean bitwise-equal worlds."""
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def check_consistent(self) -> None:
        n = self.n_envs
        for name, arr in self.arrays().items():
            if arr.shape[0] != n:
                raise ValueError(f"{name} has leading dimension {arr.shape[0]}, expected {n}")


@dataclass(frozen=True)
class ContactRecord:
    env_index: int
    sensor_link_index: int
    ball_index: int
    contact_normal: tuple[float, float, float]
    penetration_depth: float
