"""Hand descriptions: joint/link layout, action coupling and observation widths.

Each hand is a set of serial capsule chains hung off an optional palm box.
Link frames are expressed in base-aligned coordinates at ``q = 0``, so a
link only needs an offset from its parent origin, a joint axis and a capsule
direction; no fixed rotations are required.

The palm frame has ``+z`` up (palm facing up), ``+x`` towards the fingers
and ``+y`` lateral.  The palm surface sits at ``z = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

# Single-frame blind observation widths per hand:
# (tactile, joint positions, joint velocities, joint command error, last action)
TABLE_WIDTHS: dict[str, tuple[int, int, int, int, int]] = {
    "shadow": (17, 20, 20, 20, 20),
    "shadow_lite": (14, 16, 16, 13, 13),
    "allegro": (20, 16, 16, 16, 16),
    "orca": (17, 17, 17, 17, 17),
}
TABLE_ACTIONS: dict[str, int] = {"shadow": 20, "shadow_lite": 13, "allegro": 10, "orca": 17}

INCH = 0.0254

BLOCK_NAMES = ("tactile", "joint_pos", "joint_vel", "cmd_error", "last_action")


class MorphologyError(ValueError):
    """Raised for malformed hand descriptions or mismatched inputs."""


@dataclass(frozen=True)
class Link:
    parent: int
    joint: int  # -1 for a link rigidly attached to its parent
    offset: tuple[float, float, float]
    axis: tuple[float, float, float]
    direction: tuple[float, float, float]
    length: float
    radius: float
    sensor: bool


@dataclass(frozen=True)
class Palm:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    sensor: bool = True


@dataclass(frozen=True, eq=False)
class MorphologyConfig:
    """Immutable description of one hand.

    ``coupling`` maps an action vector (after scaling) to joint offsets from
    the joint-range midpoints; rows are joints, columns are actions.
    """

    name: str
    links: tuple[Link, ...]
    joint_limits: np.ndarray
    coupling: np.ndarray
    action_scale: np.ndarray
    joint_inertia: np.ndarray
    palm: Palm | None
    ball_radius: float
    bounce_jitter: tuple[float, float] = (0.005, 0.005)
    obs_block_widths: tuple[int, int, int, int, int] = field(default=())  # type: ignore[assignment]

    def __post_init__(self):
        if not self.obs_block_widths:
            object.__setattr__(self, "obs_block_widths", self.derived_widths())
        for name in ("joint_limits", "coupling", "action_scale", "joint_inertia"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- sizes ---------------------------------------------------------------
    @property
    def n_joints(self) -> int:
        return int(self.coupling.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.coupling.shape[1])

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_tactile(self) -> int:
        return int(self.palm is not None and self.palm.sensor) + sum(l.sensor for l in self.links)

    @property
    def frame_width(self) -> int:
        return int(sum(self.obs_block_widths))

    def stacked_width(self, k: int = 4) -> int:
        return k * self.frame_width

    def derived_widths(self) -> tuple[int, int, int, int, int]:
        j, a = self.n_joints, self.n_actions
        return (self.n_tactile, j, j, j if self.cmd_error_in_joint_space else a,
                a if self.last_action_in_action_space else j)

    @property
    def cmd_error_in_joint_space(self) -> bool:
        if self.obs_block_widths:
            return self.obs_block_widths[3] == self.n_joints
        return True

    @property
    def last_action_in_action_space(self) -> bool:
        # When both readings fit (identity coupling) the raw action is reported.
        if self.obs_block_widths:
            return self.obs_block_widths[4] == self.n_actions
        return True

    @property
    def joint_mid(self) -> np.ndarray:
        return 0.5 * (self.joint_limits[:, 0] + self.joint_limits[:, 1])

    # -- flattened kinematic arrays used by the physics kernels --------------
    def kinematic_arrays(self) -> dict[str, np.ndarray]:
        links = self.links
        sensor_index = np.full(len(links), -1, dtype=np.int64)
        s = 1 if (self.palm is not None and self.palm.sensor) else 0
        for i, l in enumerate(links):
            if l.sensor:
                sensor_index[i] = s
                s += 1
        palm = self.palm
        return {
            "parent": np.array([l.parent for l in links], dtype=np.int64),
            "joint": np.array([l.joint for l in links], dtype=np.int64),
            "offset": np.array([l.offset for l in links], dtype=np.float64).reshape(-1, 3),
            "axis": np.array([_unit(l.axis) for l in links], dtype=np.float64).reshape(-1, 3),
            "direction": np.array([_unit(l.direction) for l in links], dtype=np.float64).reshape(-1, 3),
            "length": np.array([l.length for l in links], dtype=np.float64),
            "radius": np.array([l.radius for l in links], dtype=np.float64),
            "sensor_index": sensor_index,
            "has_palm": np.int64(palm is not None),
            "palm_lo": np.subtract(palm.center, palm.half_extents) if palm else np.zeros(3),
            "palm_hi": np.add(palm.center, palm.half_extents) if palm else np.zeros(3),
            "palm_sensor_index": np.int64(0 if (palm is not None and palm.sensor) else -1),
            "inertia": np.asarray(self.joint_inertia, dtype=np.float64),
            "limits": np.asarray(self.joint_limits, dtype=np.float64),
        }

    # -- serialisation -------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "ball_radius": float(self.ball_radius),
            "bounce_jitter": list(self.bounce_jitter),
            "obs_block_widths": list(self.obs_block_widths),
            "joint_limits": self.joint_limits.tolist(),
            "joint_inertia": self.joint_inertia.tolist(),
            "action_scale": self.action_scale.tolist(),
            "coupling": self.coupling.tolist(),
            "palm": None if self.palm is None else {
                "center": list(self.palm.center),
                "half_extents": list(self.palm.half_extents),
                "sensor": self.palm.sensor,
            },
            "links": [
                {
                    "parent": l.parent, "joint": l.joint, "offset": list(l.offset),
                    "axis": list(l.axis), "direction": list(l.direction),
                    "length": l.length, "radius": l.radius, "sensor": l.sensor,
                }
                for l in self.links
            ],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MorphologyConfig":
        try:
            links = tuple(
                Link(
                    parent=int(l["parent"]), joint=int(l.get("joint", -1)),
                    offset=tuple(map(float, l["offset"])),
                    axis=tuple(map(float, l.get("axis", (0.0, 0.0, 1.0)))),
                    direction=tuple(map(float, l["direction"])),
                    length=float(l["length"]), radius=float(l["radius"]),
                    sensor=bool(l.get("sensor", False)),
                )
                for l in d["links"]
            )
            limits = np.asarray(d["joint_limits"], dtype=np.float64)
            n_joints = limits.shape[0]
            coupling = d.get("coupling", "identity")
            coupling = np.eye(n_joints) if isinstance(coupling, str) else np.asarray(coupling, float)
            n_actions = coupling.shape[1]
            scale = np.broadcast_to(np.asarray(d.get("action_scale", 1.0), float), (n_actions,))
            inertia = np.broadcast_to(np.asarray(d.get("joint_inertia", DEFAULT_INERTIA), float), (n_joints,))
            palm = d.get("palm")
            palm = None if palm is None else Palm(
                tuple(map(float, palm["center"])), tuple(map(float, palm["half_extents"])),
                bool(palm.get("sensor", True)))
            widths = tuple(int(w) for w in d.get("obs_block_widths", ()))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise MorphologyError(f"malformed morphology description: {exc!r}") from exc
        return cls(
            name=str(d["name"]), links=links, joint_limits=limits, coupling=coupling,
            action_scale=scale.copy(), joint_inertia=inertia.copy(), palm=palm,
            ball_radius=float(d["ball_radius"]),
            bounce_jitter=tuple(map(float, d.get("bounce_jitter", (0.005, 0.005)))),
            obs_block_widths=widths,  # type: ignore[arg-type]
        )


def _unit(v: Sequence[float]) -> tuple[float, float, float]:
    a = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0:
        return (0.0, 0.0, 1.0)
    return tuple((a / n).tolist())  # type: ignore[return-value]


def load_morphology(path: str | Path) -> MorphologyConfig:
    with open(path) as fh:
        return MorphologyConfig.from_dict(yaml.safe_load(fh))


def save_morphology(morph: MorphologyConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(morph.to_dict(), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def action_to_joint_targets(action: np.ndarray, morph: MorphologyConfig) -> np.ndarray:
    """Map actions in ``[-1, 1]`` to joint position targets.

    Works on a single action vector or a ``(n_envs, n_actions)`` batch.
    """
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != morph.n_actions:
        raise MorphologyError(
            f"{morph.name}: action has {action.shape[-1]} entries, expected {morph.n_actions}")
    scaled = morph.action_scale * np.clip(action, -1.0, 1.0)
    q_cmd = morph.joint_mid + scaled @ morph.coupling.T
    return np.clip(q_cmd, morph.joint_limits[:, 0], morph.joint_limits[:, 1])


def command_error(q_cmd: np.ndarray, q: np.ndarray, morph: MorphologyConfig) -> np.ndarray:
    """Command error block: ``q_cmd - q`` in joint space, or its
    coupling-weighted average per action when the block is action-sized."""
    err = q_cmd - q
    if morph.cmd_error_in_joint_space:
        return err
    c = morph.coupling
    return (err @ c) / c.sum(axis=0)


def validate_config(morph: MorphologyConfig) -> list[str]:
    """Return a list of invariant violations (empty when the config is sound)."""
    problems: list[str] = []
    j, a = morph.n_joints, morph.n_actions
    lim = morph.joint_limits
    if lim.shape != (j, 2):
        problems.append(f"joint_limits shape {lim.shape} != ({j}, 2)")
    else:
        for i in np.flatnonzero(~(lim[:, 0] <= lim[:, 1])):
            problems.append(f"joint {i}: lower limit {lim[i, 0]} > upper limit {lim[i, 1]}")
    c = morph.coupling
    if np.any(c < 0):
        problems.append("coupling has negative entries")
    if not np.allclose(c.sum(axis=1), 1.0):
        problems.append("coupling rows do not sum to 1")
    if np.any(c.sum(axis=0) <= 0):
        problems.append("an action column drives no joint")
    if j == a and not np.array_equal(c, np.eye(j)):
        problems.append("coupling must be the identity when n_joints == n_actions")
    if morph.action_scale.shape != (a,):
        problems.append(f"action_scale shape {morph.action_scale.shape} != ({a},)")
    if morph.joint_inertia.shape != (j,) or np.any(morph.joint_inertia <= 0):
        problems.append("joint_inertia must be positive, one entry per joint")
    seen_joints: list[int] = []
    for i, l in enumerate(morph.links):
        if not -1 <= l.parent < i:
            problems.append(f"link {i}: parent {l.parent} must precede it")
        if l.joint >= 0:
            if l.joint >= j:
                problems.append(f"link {i}: joint index {l.joint} out of range")
            seen_joints.append(l.joint)
        if l.length < 0 or l.radius < 0:
            problems.append(f"link {i}: negative length or radius")
    if sorted(seen_joints) != list(range(j)):
        problems.append("every joint must drive exactly one link")
    w = tuple(morph.obs_block_widths)
    if len(w) != 5:
        problems.append(f"obs_block_widths must have 5 entries, got {len(w)}")
    else:
        if w[0] != morph.n_tactile:
            problems.append(f"tactile width {w[0]} != number of sensors {morph.n_tactile}")
        if w[1] != j or w[2] != j:
            problems.append("joint position/velocity widths must equal n_joints")
        if w[3] not in (j, a) or w[4] not in (j, a):
            problems.append("command-error and last-action widths must equal n_joints or n_actions")
    if morph.name in TABLE_WIDTHS:
        if w != TABLE_WIDTHS[morph.name]:
            problems.append(f"{morph.name}: widths {w} != reference {TABLE_WIDTHS[morph.name]}")
        if a != TABLE_ACTIONS[morph.name]:
            problems.append(f"{morph.name}: {a} actions != reference {TABLE_ACTIONS[morph.name]}")
    if morph.ball_radius <= 0:
        problems.append("ball_radius must be positive")
    return problems


# ---------------------------------------------------------------------------
# builtin hands
# ---------------------------------------------------------------------------

DEFAULT_INERTIA = 3.125e-3  # critically damps kp=20, kd=0.5
PADDLE_INERTIA = 0.02  # heavy enough to bat a 55 g ball

FLEX_X = (0.0, -1.0, 0.0)  # curls a +x finger upwards
ABD = (0.0, 0.0, 1.0)
FLEX_THUMB = (-1.0, 0.0, 0.0)  # curls a -y thumb upwards
ROT_THUMB = (0.0, 1.0, 0.0)


class _Builder:
    def __init__(self):
        self.links: list[Link] = []
        self.limits: list[tuple[float, float]] = []
        self.groups: list[list[int]] = []  # joints driven by each action

    def chain(self, base, direction, segments, radius, couple: Sequence[Sequence[int]] = ()):
        """Append a serial chain.

        ``segments`` holds ``(axis | None, length, sensor, (lo, hi))`` tuples;
        ``couple`` lists groups of segment indices sharing one action.
        """
        parent, offset, first_joint = -1, tuple(base), len(self.limits)
        local: list[int] = []
        for axis, length, sensor, lim in segments:
            if axis is None:
                joint = -1
                axis = (0.0, 0.0, 1.0)
            else:
                joint = len(self.limits)
                self.limits.append(lim)
            local.append(joint)
            self.links.append(Link(parent, joint, offset, axis, direction, length,
                                   radius if length > 0 else 0.0, sensor))
            parent = len(self.links) - 1
            offset = tuple(float(d) * length for d in direction)
        coupled = {i for g in couple for i in g}
        groups = [[local[i] for i in g] for g in couple]
        for i, jnt in enumerate(local):
            if jnt >= 0 and i not in coupled:
                groups.append([jnt])
        self.groups.extend(sorted(groups))
        assert all(j >= first_joint for g in groups for j in g)

    def build(self, name, palm, ball_radius, **kw) -> MorphologyConfig:
        n_j = len(self.limits)
        groups = sorted(self.groups)
        coupling = np.zeros((n_j, len(groups)))
        for a, g in enumerate(groups):
            coupling[g, a] = 1.0
        limits = np.array(self.limits)
        half = 0.5 * (limits[:, 1] - limits[:, 0])
        scale = np.array([half[g[0]] for g in groups])
        return MorphologyConfig(
            name=name, links=tuple(self.links), joint_limits=limits, coupling=coupling,
            action_scale=scale, joint_inertia=np.full(n_j, DEFAULT_INERTIA), palm=palm,
            ball_radius=ball_radius, obs_block_widths=TABLE_WIDTHS.get(name, ()), **kw)


def _finger(b: _Builder, y: float, lengths, radius, palm_x, abd=True, tip=0.0, abd_len=0.0,
            couple=()):
    segs = []
    if abd:
        segs.append((ABD, abd_len, abd_len > 0, (-0.35, 0.35)))
    for L in lengths:
        segs.append((FLEX_X, L, True, (-0.2, 1.6)))
    if tip > 0:
        segs.append((None, tip, True, None))
    b.chain((palm_x, y, radius), (1.0, 0.0, 0.0), segs, radius, couple)


def _thumb(b: _Builder, x: float, palm_y, segments, radius, couple=()):
    b.chain((x, -palm_y, radius), (0.0, -1.0, 0.0), segments, radius, couple)


def shadow() -> MorphologyConfig:
    b = _Builder()
    r, hx, hy = 0.0095, 0.045, 0.045
    _thumb(b, -0.01, hy, [
        (ROT_THUMB, 0.030, True, (-1.0, 1.0)),
        (FLEX_THUMB, 0.038, True, (0.0, 1.2)),
        (FLEX_THUMB, 0.032, True, (-0.5, 1.2)),
        (FLEX_THUMB, 0.0275, True, (-0.2, 1.5)),
    ], r)
    for y in (-0.033, -0.011, 0.011, 0.033):
        _finger(b, y, (0.045, 0.025, 0.026), r, hx)
    palm = Palm((0.0, 0.0, -0.01), (hx, hy, 0.01), sensor=True)
    return b.build("shadow", palm, 1.5 * INCH / 2)


def shadow_lite() -> MorphologyConfig:
    b = _Builder()
    r, hx, hy = 0.0095, 0.045, 0.04
    _thumb(b, -0.01, hy, [
        (ROT_THUMB, 0.030, True, (-1.0, 1.0)),
        (FLEX_THUMB, 0.038, True, (0.0, 1.2)),
        (FLEX_THUMB, 0.032, True, (-0.5, 1.2)),
        (FLEX_THUMB, 0.0275, True, (-0.2, 1.5)),
    ], r)
    for y in (-0.025, 0.0, 0.025):
        # middle and distal flexion share one action
        _finger(b, y, (0.045, 0.025, 0.026), r, hx, couple=[(2, 3)])
    palm = Palm((0.0, 0.0, -0.01), (hx, hy, 0.01), sensor=True)
    return b.build("shadow_lite", palm, 1.2 * INCH / 2)


def allegro() -> MorphologyConfig:
    b = _Builder()
    r, hx, hy = 0.014, 0.055, 0.06
    _thumb(b, -0.02, hy, [
        (ROT_THUMB, 0.030, True, (-0.3, 1.4)),
        (FLEX_THUMB, 0.025, True, (-0.2, 1.2)),
        (FLEX_THUMB, 0.051, True, (-0.2, 1.7)),
        (FLEX_THUMB, 0.042, True, (-0.2, 1.6)),
    ], r)
    for y in (-0.045, 0.0, 0.045):
        # proximal, middle and distal flexion share one action
        _finger(b, y, (0.054, 0.0384, 0.0267), r, hx, tip=0.02, abd_len=0.0164,
                couple=[(1, 2, 3)])
    palm = Palm((0.0, 0.0, -0.01), (hx, hy, 0.01), sensor=True)
    return b.build("allegro", palm, 2.0 * INCH / 2)


def orca() -> MorphologyConfig:
    b = _Builder()
    r, hx, hy = 0.01, 0.045, 0.045
    _thumb(b, -0.01, hy, [
        (ROT_THUMB, 0.0, False, (-1.0, 1.0)),
        (FLEX_THUMB, 0.030, True, (-0.3, 1.2)),
        (ABD, 0.035, True, (-0.5, 0.5)),
        (FLEX_THUMB, 0.030, True, (-0.2, 1.4)),
        (FLEX_THUMB, 0.028, True, (-0.2, 1.5)),
    ], r)
    for y in (-0.033, -0.011, 0.011, 0.033):
        _finger(b, y, (0.045, 0.03), r, hx, tip=0.025)
    palm = Palm((0.0, 0.0, -0.01), (hx, hy, 0.01), sensor=True)
    return b.build("orca", palm, 1.5 * INCH / 2)


def paddle() -> MorphologyConfig:
    """Two-joint planar arm carrying a single sensing paddle.

    The paddle's top surface lies on ``z = 0`` at ``q = 0`` and the arm
    moves in the x-z plane, so a ball dropped with zero lateral ``y``
    offset stays in that plane.
    """
    r = 0.015
    links = (
        Link(-1, 0, (-0.16, 0.0, -r), FLEX_X, (1.0, 0.0, 0.0), 0.08, r, False),
        Link(0, 1, (0.08, 0.0, 0.0), FLEX_X, (1.0, 0.0, 0.0), 0.16, r, True),
    )
    limits = np.array([[-0.5, 0.5], [-0.6, 0.6]])
    return MorphologyConfig(
        name="paddle", links=links, joint_limits=limits, coupling=np.eye(2),
        action_scale=np.array([0.5, 0.6]), joint_inertia=np.full(2, PADDLE_INERTIA),
        palm=None, ball_radius=0.02, bounce_jitter=(0.01, 0.0))


BUILTINS = {
    "shadow": shadow,
    "shadow_lite": shadow_lite,
    "allegro": allegro,
    "orca": orca,
    "paddle": paddle,
}


def get_morphology(name: str) -> MorphologyConfig:
    if name in BUILTINS:
        return BUILTINS[name]()
    path = Path(name)
    if path.suffix in (".yaml", ".yml") and path.exists():
        return load_morphology(path)
    raise MorphologyError(f"unknown morphology {name!r}; builtins are {sorted(BUILTINS)}")
