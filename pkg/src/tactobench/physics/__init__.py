"""Batched capsule-hand / sphere physics.

Two interchangeable backends advance a :class:`WorldBatch`:

``compiled``
    Cython/OpenMP kernel (``_kernels``), one env per thread iteration.
``python``
    numpy reference (``_reference``), vectorised across envs and split into
    contiguous env chunks across a thread pool.

The compiled kernel is used when it imports; set ``TACTOBENCH_BACKEND=python``
to force the fallback.  Either way, results are bitwise independent of the
number of worker threads.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..morphology import MorphologyConfig
from . import _reference
from .world import ContactRecord, PhysicsConfig, WorldBatch

try:
    from . import _kernels
except ImportError:  # pragma: no cover - exercised only without a build
    _kernels = None

__all__ = [
    "PhysicsConfig", "WorldBatch", "ContactRecord", "Stepper", "apply_pd_control",
    "detect_contacts", "step_substep", "available_backends", "default_backend", "max_threads",
]

THREADS_ENV = "TACTOBENCH_MAX_THREADS"


def available_backends() -> list[str]:
    return (["compiled"] if _kernels is not None else []) + ["python"]


def default_backend() -> str:
    forced = os.environ.get("TACTOBENCH_BACKEND", "").strip().lower()
    if forced in ("python", "compiled"):
        if forced == "compiled" and _kernels is None:
            raise ImportError("TACTOBENCH_BACKEND=compiled but the extension is not built")
        return forced
    return "compiled" if _kernels is not None else "python"


def max_threads() -> int:
    cap = os.environ.get(THREADS_ENV)
    n = os.cpu_count() or 1
    return max(1, min(n, int(cap))) if cap else n


class Stepper:
    """Binds a morphology and physics config to a backend and thread count."""

    def __init__(self, morph: MorphologyConfig, cfg: PhysicsConfig, restitution: float,
                 backend: str | None = None, n_threads: int = 1):
        self.morph = morph
        self.cfg = cfg
        self.backend = backend or default_backend()
        if self.backend not in available_backends():
            raise ValueError(f"backend {self.backend!r} unavailable; have {available_backends()}")
        self.n_threads = max(1, int(n_threads))
        self.params = cfg.kernel_params(restitution)
        self.kin = _reference.prepare(morph.kinematic_arrays())
        self._pool: ThreadPoolExecutor | None = None

    def _chunks(self, n: int) -> list[slice]:
        k = min(self.n_threads, max(n, 1))
        edges = np.linspace(0, n, k + 1).astype(int)
        return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]

    def _map(self, fn, world: WorldBatch) -> None:
        chunks = self._chunks(world.n_envs)
        if len(chunks) <= 1:
            fn(world)
            return
        if self._pool is None:
            self._pool = ThreadPoolExecutor(self.n_threads)
        views = [WorldBatch(**{k: v[s] for k, v in world.arrays().items()}) for s in chunks]
        for f in [self._pool.submit(fn, v) for v in views]:
            f.result()

    def forward_kinematics(self, world: WorldBatch) -> None:
        if self.backend == "compiled":
            _kernels.control_step(world, self.kin, self.params, 0, self.n_threads, False, True)
        else:
            self._map(lambda w: _reference.forward_kinematics(w, self.kin), world)

    def step(self, world: WorldBatch, n_substeps: int | None = None, reset_tactile: bool = True) -> None:
        """Advance all envs in place; tactile bits are OR-ed over the substeps."""
        n = self.cfg.substeps_per_control if n_substeps is None else n_substeps
        if self.backend == "compiled":
            _kernels.control_step(world, self.kin, self.params, n, self.n_threads, reset_tactile, False)
            return

        def run(w: WorldBatch) -> None:
            if reset_tactile:
                w.tactile[...] = 0
            frozen = np.flatnonzero(w.corrupt)
            saved = {k: v[frozen].copy() for k, v in w.arrays().items()} if frozen.size else None
            for _ in range(n):
                _reference.substep(w, self.kin, self.params)
            if saved is not None:
                # envs corrupt at entry are not advanced (matches the compiled kernel)
                for k, v in saved.items():
                    if k != "tactile":
                        getattr(w, k)[frozen] = v

        self._map(run, world)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __del__(self):
        self.close()


def step_substep(world: WorldBatch, cfg: PhysicsConfig, morph: MorphologyConfig,
                 restitution: float | None = None, backend: str | None = None) -> WorldBatch:
    """Advance ``world`` by one physics substep (in place) and return it.

    Tactile bits accumulate: callers clear ``world.tactile`` at the start of
    a control step.
    """
    e = cfg.restitution_bounce_ball if restitution is None else restitution
    Stepper(morph, cfg, e, backend=backend).step(world, 1, reset_tactile=False)
    return world


def apply_pd_control(q, qdot, q_cmd, cfg: PhysicsConfig):
    """Clamped PD torque towards ``q_cmd``."""
    tau = cfg.pd_kp * (np.asarray(q_cmd) - np.asarray(q)) - cfg.pd_kd * np.asarray(qdot)
    return np.clip(tau, -cfg.max_joint_torque, cfg.max_joint_torque)


def detect_contacts(world: WorldBatch, morph: MorphologyConfig) -> list[ContactRecord]:
    """Sensor contacts for the current geometry, ordered by (env, sensor, ball).

    A pair touches when the centre distance is strictly below the radii sum.
    """
    kin = morph.kinematic_arrays()
    found: list[tuple[int, int, int, np.ndarray, float]] = []
    for b in range(world.n_balls):
        if kin["has_palm"] and kin["palm_sensor_index"] >= 0:
            m, nx, ny, nz, pen = _reference._palm_contact(world, b, kin)
            for i in np.flatnonzero(m):
                found.append((int(i), int(kin["palm_sensor_index"]), b,
                              np.array([nx[i], ny[i], nz[i]]), float(pen[i])))
        for l in range(morph.n_links):
            s = int(kin["sensor_index"][l])
            if s < 0 or kin["radius"][l] <= 0:
                continue
            m, nx, ny, nz, pen = _reference._capsule_contact(world, l, b, kin)
            for i in np.flatnonzero(m):
                found.append((int(i), s, b, np.array([nx[i], ny[i], nz[i]]), float(pen[i])))
    found.sort(key=lambda r: r[:3])
    return [ContactRecord(i, s, b, tuple(float(x) for x in n), max(pen, 0.0))
            for i, s, b, n, pen in found]
