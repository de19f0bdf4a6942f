"""Pure numpy stepping backend.

Vectorised across envs, sequential over contact pairs.  Mirrors the
arithmetic of the compiled kernel term by term; the two backends agree to
rounding of the transcendental functions.
"""
from __future__ import annotations

import numpy as np

from .world import WorldBatch

# indices into the packed parameter vector (see PhysicsConfig.kernel_params)
DT, GX, GY, GZ, KP, KD, TMAX, REST, MU, REST_V, SLOP, BETA = range(12)


def _dot(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


def forward_kinematics(w: WorldBatch, kin: dict) -> None:
    """Recompute link frames, capsule endpoints and joint axes from ``w.q``."""
    n = w.q.shape[0]
    parent, joint = kin["parent"], kin["joint"]
    for l in range(len(parent)):
        p = parent[l]
        ox, oy, oz = kin["offset"][l]
        if p < 0:
            rp = None
            px = np.full(n, ox)
            py = np.full(n, oy)
            pz = np.full(n, oz)
        else:
            rp = w.link_rot[:, p]
            a = w.link_a[:, p]
            px = a[:, 0] + (rp[:, 0, 0] * ox + rp[:, 0, 1] * oy + rp[:, 0, 2] * oz)
            py = a[:, 1] + (rp[:, 1, 0] * ox + rp[:, 1, 1] * oy + rp[:, 1, 2] * oz)
            pz = a[:, 2] + (rp[:, 2, 0] * ox + rp[:, 2, 1] * oy + rp[:, 2, 2] * oz)
        w.link_a[:, l, 0] = px
        w.link_a[:, l, 1] = py
        w.link_a[:, l, 2] = pz
        jn = joint[l]
        rl = w.link_rot[:, l]
        if jn >= 0:
            ax, ay, az = kin["axis"][l]
            if rp is None:
                wx, wy, wz = np.full(n, ax), np.full(n, ay), np.full(n, az)
            else:
                wx = rp[:, 0, 0] * ax + rp[:, 0, 1] * ay + rp[:, 0, 2] * az
                wy = rp[:, 1, 0] * ax + rp[:, 1, 1] * ay + rp[:, 1, 2] * az
                wz = rp[:, 2, 0] * ax + rp[:, 2, 1] * ay + rp[:, 2, 2] * az
            w.joint_axis[:, jn, 0] = wx
            w.joint_axis[:, jn, 1] = wy
            w.joint_axis[:, jn, 2] = wz
            w.joint_origin[:, jn, 0] = px
            w.joint_origin[:, jn, 1] = py
            w.joint_origin[:, jn, 2] = pz
            th = w.q[:, jn]
            c = np.cos(th)
            s = np.sin(th)
            t = 1.0 - c
            rot = np.empty((n, 3, 3))
            rot[:, 0, 0] = c + t * ax * ax
            rot[:, 0, 1] = t * ax * ay - s * az
            rot[:, 0, 2] = t * ax * az + s * ay
            rot[:, 1, 0] = t * ay * ax + s * az
            rot[:, 1, 1] = c + t * ay * ay
            rot[:, 1, 2] = t * ay * az - s * ax
            rot[:, 2, 0] = t * az * ax - s * ay
            rot[:, 2, 1] = t * az * ay + s * ax
            rot[:, 2, 2] = c + t * az * az
            if rp is None:
                rl[...] = rot
            else:
                for r in range(3):
                    for k in range(3):
                        rl[:, r, k] = (rp[:, r, 0] * rot[:, 0, k] + rp[:, r, 1] * rot[:, 1, k]
                                       + rp[:, r, 2] * rot[:, 2, k])
        else:
            if rp is None:
                rl[...] = np.eye(3)
            else:
                rl[...] = rp
        dx, dy, dz = kin["direction"][l]
        ln = kin["length"][l]
        w.link_b[:, l, 0] = px + (rl[:, 0, 0] * dx + rl[:, 0, 1] * dy + rl[:, 0, 2] * dz) * ln
        w.link_b[:, l, 1] = py + (rl[:, 1, 0] * dx + rl[:, 1, 1] * dy + rl[:, 1, 2] * dz) * ln
        w.link_b[:, l, 2] = pz + (rl[:, 2, 0] * dx + rl[:, 2, 1] * dy + rl[:, 2, 2] * dz) * ln


def _ancestors(kin: dict, l: int) -> list[int]:
    out = []
    k = l
    while k >= 0:
        if kin["joint"][k] >= 0:
            out.append(int(kin["joint"][k]))
        k = kin["parent"][k]
    return out


def _hand_velocity(w, joints, px, py, pz):
    vx = np.zeros_like(px)
    vy = np.zeros_like(px)
    vz = np.zeros_like(px)
    for j in joints:
        o = w.joint_origin[:, j]
        a = w.joint_axis[:, j]
        rx, ry, rz = px - o[:, 0], py - o[:, 1], pz - o[:, 2]
        cx = a[:, 1] * rz - a[:, 2] * ry
        cy = a[:, 2] * rx - a[:, 0] * rz
        cz = a[:, 0] * ry - a[:, 1] * rx
        qd = w.qdot[:, j]
        vx = vx + cx * qd
        vy = vy + cy * qd
        vz = vz + cz * qd
    return vx, vy, vz


def _jacobian(w, joints, px, py, pz, nx, ny, nz):
    out = []
    for j in joints:
        o = w.joint_origin[:, j]
        a = w.joint_axis[:, j]
        rx, ry, rz = px - o[:, 0], py - o[:, 1], pz - o[:, 2]
        cx = a[:, 1] * rz - a[:, 2] * ry
        cy = a[:, 2] * rx - a[:, 0] * rz
        cz = a[:, 0] * ry - a[:, 1] * rx
        out.append(_dot(cx, cy, cz, nx, ny, nz))
    return out


def _resolve(w, m, b, joints, inertia, nx, ny, nz, pen, params):
    """Normal + friction impulse between ball ``b`` and a hand collider,
    applied only where ``m`` is set.  ``joints`` empty means a static collider."""
    e, mu = params[REST], params[MU]
    bp, bv = w.ball_pos[:, b], w.ball_vel[:, b]
    rb = w.ball_radius[:, b]
    mass = w.ball_mass[:, b]
    px = bp[:, 0] - nx * rb
    py = bp[:, 1] - ny * rb
    pz = bp[:, 2] - nz * rb
    hx, hy, hz = _hand_velocity(w, joints, px, py, pz)
    vn = _dot(bv[:, 0] - hx, bv[:, 1] - hy, bv[:, 2] - hz, nx, ny, nz)
    act = m & (vn < 0.0)
    if act.any():
        jn = _jacobian(w, joints, px, py, pz, nx, ny, nz)
        wn = 1.0 / mass
        for k, j in enumerate(joints):
            wn = wn + jn[k] * jn[k] / inertia[j]
        eff = np.where(-vn > params[REST_V], e, 0.0)
        pn = np.where(act, -(1.0 + eff) * vn / wn, 0.0)
        s = pn / mass
        bv[:, 0] = np.where(act, bv[:, 0] + s * nx, bv[:, 0])
        bv[:, 1] = np.where(act, bv[:, 1] + s * ny, bv[:, 1])
        bv[:, 2] = np.where(act, bv[:, 2] + s * nz, bv[:, 2])
        for k, j in enumerate(joints):
            sj = pn / inertia[j]
            w.qdot[:, j] = np.where(act, w.qdot[:, j] - jn[k] * sj, w.qdot[:, j])
        # friction
        hx, hy, hz = _hand_velocity(w, joints, px, py, pz)
        rx, ry, rz = bv[:, 0] - hx, bv[:, 1] - hy, bv[:, 2] - hz
        vn2 = _dot(rx, ry, rz, nx, ny, nz)
        tx, ty, tz = rx - vn2 * nx, ry - vn2 * ny, rz - vn2 * nz
        vt = np.sqrt(_dot(tx, ty, tz, tx, ty, tz))
        fr = act & (vt > 1e-12)
        if fr.any():
            safe = np.where(fr, vt, 1.0)
            tx, ty, tz = tx / safe, ty / safe, tz / safe
            jt = _jacobian(w, joints, px, py, pz, tx, ty, tz)
            wt = 1.0 / mass
            for k, j in enumerate(joints):
                wt = wt + jt[k] * jt[k] / inertia[j]
            pt = -vt / wt
            lim = -mu * pn
            pt = np.where(pt < lim, lim, pt)
            pt = np.where(fr, pt, 0.0)
            s = pt / mass
            bv[:, 0] = np.where(fr, bv[:, 0] + s * tx, bv[:, 0])
            bv[:, 1] = np.where(fr, bv[:, 1] + s * ty, bv[:, 1])
            bv[:, 2] = np.where(fr, bv[:, 2] + s * tz, bv[:, 2])
            for k, j in enumerate(joints):
                sj = pt / inertia[j]
                w.qdot[:, j] = np.where(fr, w.qdot[:, j] - jt[k] * sj, w.qdot[:, j])
            # on an articulated collider friction leaks into the normal
            # direction; pull the normal speed back into [0, e * approach]
            hx, hy, hz = _hand_velocity(w, joints, px, py, pz)
            vn3 = _dot(bv[:, 0] - hx, bv[:, 1] - hy, bv[:, 2] - hz, nx, ny, nz)
            cap = -eff * vn
            pc = np.where(vn3 > cap, (cap - vn3) / wn, np.where(vn3 < 0.0, -vn3 / wn, 0.0))
            fix = fr & (pc != 0.0)
            if fix.any():
                s = pc / mass
                bv[:, 0] = np.where(fix, bv[:, 0] + s * nx, bv[:, 0])
                bv[:, 1] = np.where(fix, bv[:, 1] + s * ny, bv[:, 1])
                bv[:, 2] = np.where(fix, bv[:, 2] + s * nz, bv[:, 2])
                for k, j in enumerate(joints):
                    sj = pc / inertia[j]
                    w.qdot[:, j] = np.where(fix, w.qdot[:, j] - jn[k] * sj, w.qdot[:, j])
    corr = m & (pen > params[SLOP])
    if corr.any():
        c = params[BETA] * (pen - params[SLOP])
        bp[:, 0] = np.where(corr, bp[:, 0] + nx * c, bp[:, 0])
        bp[:, 1] = np.where(corr, bp[:, 1] + ny * c, bp[:, 1])
        bp[:, 2] = np.where(corr, bp[:, 2] + nz * c, bp[:, 2])


def _capsule_contact(w, l, b, kin):
    """Sphere/capsule test. Returns (mask, nx, ny, nz, pen)."""
    a = w.link_a[:, l]
    e = w.link_b[:, l]
    p = w.ball_pos[:, b]
    abx, aby, abz = e[:, 0] - a[:, 0], e[:, 1] - a[:, 1], e[:, 2] - a[:, 2]
    apx, apy, apz = p[:, 0] - a[:, 0], p[:, 1] - a[:, 1], p[:, 2] - a[:, 2]
    ab2 = _dot(abx, aby, abz, abx, aby, abz)
    pos = ab2 > 0.0
    t = np.where(pos, _dot(apx, apy, apz, abx, aby, abz) / np.where(pos, ab2, 1.0), 0.0)
    t = np.minimum(np.maximum(t, 0.0), 1.0)
    dx = p[:, 0] - (a[:, 0] + t * abx)
    dy = p[:, 1] - (a[:, 1] + t * aby)
    dz = p[:, 2] - (a[:, 2] + t * abz)
    dist = np.sqrt(_dot(dx, dy, dz, dx, dy, dz))
    rsum = w.ball_radius[:, b] + kin["radius"][l]
    m = dist < rsum
    nz0 = dist > 0.0
    safe = np.where(nz0, dist, 1.0)
    nx = np.where(nz0, dx / safe, 0.0)
    ny = np.where(nz0, dy / safe, 0.0)
    nz = np.where(nz0, dz / safe, 1.0)
    return m, nx, ny, nz, rsum - dist


def _palm_contact(w, b, kin):
    lo, hi = kin["palm_lo"], kin["palm_hi"]
    p = w.ball_pos[:, b]
    cx = np.minimum(np.maximum(p[:, 0], lo[0]), hi[0])
    cy = np.minimum(np.maximum(p[:, 1], lo[1]), hi[1])
    cz = np.minimum(np.maximum(p[:, 2], lo[2]), hi[2])
    dx, dy, dz = p[:, 0] - cx, p[:, 1] - cy, p[:, 2] - cz
    dist = np.sqrt(_dot(dx, dy, dz, dx, dy, dz))
    rb = w.ball_radius[:, b]
    outside = dist > 0.0
    safe = np.where(outside, dist, 1.0)
    nx = np.where(outside, dx / safe, 0.0)
    ny = np.where(outside, dy / safe, 0.0)
    nz = np.where(outside, dz / safe, 1.0)
    pen = np.where(outside, rb - dist, rb + (hi[2] - p[:, 2]))
    m = dist < rb
    return m, nx, ny, nz, pen


def _ball_pair(w, b1, b2, params):
    p1, p2 = w.ball_pos[:, b1], w.ball_pos[:, b2]
    v1, v2 = w.ball_vel[:, b1], w.ball_vel[:, b2]
    dx, dy, dz = p2[:, 0] - p1[:, 0], p2[:, 1] - p1[:, 1], p2[:, 2] - p1[:, 2]
    dist = np.sqrt(_dot(dx, dy, dz, dx, dy, dz))
    rsum = w.ball_radius[:, b1] + w.ball_radius[:, b2]
    m = dist < rsum
    if not m.any():
        return
    nz0 = dist > 0.0
    safe = np.where(nz0, dist, 1.0)
    nx = np.where(nz0, dx / safe, 0.0)
    ny = np.where(nz0, dy / safe, 0.0)
    nz = np.where(nz0, dz / safe, 1.0)
    m1, m2 = w.ball_mass[:, b1], w.ball_mass[:, b2]
    vn = _dot(v2[:, 0] - v1[:, 0], v2[:, 1] - v1[:, 1], v2[:, 2] - v1[:, 2], nx, ny, nz)
    act = m & (vn < 0.0)
    eff = np.where(-vn > params[REST_V], params[REST], 0.0)
    pn = np.where(act, -(1.0 + eff) * vn / (1.0 / m1 + 1.0 / m2), 0.0)
    s1, s2 = pn / m1, pn / m2
    for k, n_k in enumerate((nx, ny, nz)):
        v1[:, k] = np.where(act, v1[:, k] - s1 * n_k, v1[:, k])
        v2[:, k] = np.where(act, v2[:, k] + s2 * n_k, v2[:, k])
    pen = rsum - dist
    corr = m & (pen > params[SLOP])
    c = 0.5 * (params[BETA] * (pen - params[SLOP]))
    for k, n_k in enumerate((nx, ny, nz)):
        p1[:, k] = np.where(corr, p1[:, k] - n_k * c, p1[:, k])
        p2[:, k] = np.where(corr, p2[:, k] + n_k * c, p2[:, k])


def substep(w: WorldBatch, kin: dict, params: np.ndarray) -> None:
    dt = params[DT]
    inertia = kin["inertia"]
    lim = kin["limits"]
    # PD drive
    tau = params[KP] * (w.q_cmd - w.q) - params[KD] * w.qdot
    tau = np.minimum(np.maximum(tau, -params[TMAX]), params[TMAX])
    w.qdot[...] = w.qdot + dt * tau / inertia
    # gravity on balls
    w.ball_vel[..., 0] += dt * params[GX]
    w.ball_vel[..., 1] += dt * params[GY]
    w.ball_vel[..., 2] += dt * params[GZ]
    # contacts in fixed (palm, link, ball) order, then ball pairs
    n_balls = w.ball_pos.shape[1]
    if kin["has_palm"]:
        ps = int(kin["palm_sensor_index"])
        for b in range(n_balls):
            m, nx, ny, nz, pen = _palm_contact(w, b, kin)
            if m.any():
                if ps >= 0:
                    w.tactile[:, ps] |= m.astype(np.uint8)
                _resolve(w, m, b, [], inertia, nx, ny, nz, pen, params)
    for l in range(len(kin["parent"])):
        if kin["radius"][l] <= 0.0:
            continue
        s = int(kin["sensor_index"][l])
        joints = kin["ancestors"][l]
        for b in range(n_balls):
            m, nx, ny, nz, pen = _capsule_contact(w, l, b, kin)
            if m.any():
                if s >= 0:
                    w.tactile[:, s] |= m.astype(np.uint8)
                _resolve(w, m, b, joints, inertia, nx, ny, nz, pen, params)
    for b1 in range(n_balls):
        for b2 in range(b1 + 1, n_balls):
            _ball_pair(w, b1, b2, params)
    # integrate
    q = w.q + dt * w.qdot
    below = q < lim[:, 0]
    above = q > lim[:, 1]
    w.q[...] = np.where(below, lim[:, 0], np.where(above, lim[:, 1], q))
    w.qdot[...] = np.where((below & (w.qdot < 0.0)) | (above & (w.qdot > 0.0)), 0.0, w.qdot)
    w.ball_pos[...] = w.ball_pos + dt * w.ball_vel
    forward_kinematics(w, kin)
    bad = ~(np.isfinite(w.q).all(axis=1) & np.isfinite(w.qdot).all(axis=1)
            & np.isfinite(w.ball_pos).all(axis=(1, 2)) & np.isfinite(w.ball_vel).all(axis=(1, 2)))
    w.corrupt |= bad.astype(np.uint8)


def control_step(w: WorldBatch, kin: dict, params: np.ndarray, n_substeps: int) -> None:
    w.tactile[...] = 0
    for _ in range(n_substeps):
        substep(w, kin, params)


def prepare(kin: dict) -> dict:
    """Add backend-specific derived tables to the kinematic arrays."""
    kin = dict(kin)
    kin["ancestors"] = [_ancestors(kin, l) for l in range(len(kin["parent"]))]
    return kin
