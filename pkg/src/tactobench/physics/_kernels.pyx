# cython: language_level=3
"""Compiled stepping kernel.

One env is advanced by exactly one OpenMP thread, with no cross-env reads or
writes, so results do not depend on the thread count or partition shape.
"""
from cython.parallel cimport prange
from libc.math cimport sin, cos, sqrt, isfinite
from libc.stdint cimport int64_t

cdef enum:
    DT = 0
    GX = 1
    GY = 2
    GZ = 3
    KP = 4
    KD = 5
    TMAX = 6
    REST = 7
    MU = 8
    REST_V = 9
    SLOP = 10
    BETA = 11


cdef struct Kin:
    int n_links
    int n_joints
    const int64_t* parent
    const int64_t* joint
    const double* offset
    const double* axis
    const double* direction
    const double* length
    const double* radius
    const int64_t* sensor_index
    int has_palm
    int palm_sensor
    double palm_lo[3]
    double palm_hi[3]
    const double* inertia
    const double* limits


cdef struct Env:
    # pointers to one env's rows of every state array
    double* q
    double* qd
    const double* qc
    double* bp
    double* bv
    const double* br
    const double* bm
    double* la
    double* lb
    double* lr
    double* jo
    double* jw
    unsigned char* tact
    int n_balls


cdef inline double _dot(double ax, double ay, double az, double bx, double by, double bz) noexcept nogil:
    return ax * bx + ay * by + az * bz


cdef void _fk(Env* e, const Kin* k) noexcept nogil:
    cdef int l, p, jn, r, c
    cdef double ox, oy, oz, px, py, pz, ax, ay, az, th, cs, sn, t, dx, dy, dz, ln
    cdef double rot[9]
    cdef double* rp
    cdef double* rl
    for l in range(k.n_links):
        p = <int>k.parent[l]
        ox = k.offset[3 * l]
        oy = k.offset[3 * l + 1]
        oz = k.offset[3 * l + 2]
        rl = e.lr + 9 * l
        if p < 0:
            rp = NULL
            px = ox
            py = oy
            pz = oz
        else:
            rp = e.lr + 9 * p
            px = e.la[3 * p] + (rp[0] * ox + rp[1] * oy + rp[2] * oz)
            py = e.la[3 * p + 1] + (rp[3] * ox + rp[4] * oy + rp[5] * oz)
            pz = e.la[3 * p + 2] + (rp[6] * ox + rp[7] * oy + rp[8] * oz)
        e.la[3 * l] = px
        e.la[3 * l + 1] = py
        e.la[3 * l + 2] = pz
        jn = <int>k.joint[l]
        if jn >= 0:
            ax = k.axis[3 * l]
            ay = k.axis[3 * l + 1]
            az = k.axis[3 * l + 2]
            if rp == NULL:
                e.jw[3 * jn] = ax
                e.jw[3 * jn + 1] = ay
                e.jw[3 * jn + 2] = az
            else:
                e.jw[3 * jn] = rp[0] * ax + rp[1] * ay + rp[2] * az
                e.jw[3 * jn + 1] = rp[3] * ax + rp[4] * ay + rp[5] * az
                e.jw[3 * jn + 2] = rp[6] * ax + rp[7] * ay + rp[8] * az
            e.jo[3 * jn] = px
            e.jo[3 * jn + 1] = py
            e.jo[3 * jn + 2] = pz
            th = e.q[jn]
            cs = cos(th)
            sn = sin(th)
            t = 1.0 - cs
            rot[0] = cs + t * ax * ax
            rot[1] = t * ax * ay - sn * az
            rot[2] = t * ax * az + sn * ay
            rot[3] = t * ay * ax + sn * az
            rot[4] = cs + t * ay * ay
            rot[5] = t * ay * az - sn * ax
            rot[6] = t * az * ax - sn * ay
            rot[7] = t * az * ay + sn * ax
            rot[8] = cs + t * az * az
            if rp == NULL:
                for r in range(9):
                    rl[r] = rot[r]
            else:
                for r in range(3):
                    for c in range(3):
                        rl[3 * r + c] = (rp[3 * r] * rot[c] + rp[3 * r + 1] * rot[3 + c]
                                         + rp[3 * r + 2] * rot[6 + c])
        else:
            if rp == NULL:
                for r in range(9):
                    rl[r] = 0.0
                rl[0] = 1.0
                rl[4] = 1.0
                rl[8] = 1.0
            else:
                for r in range(9):
                    rl[r] = rp[r]
        dx = k.direction[3 * l]
        dy = k.direction[3 * l + 1]
        dz = k.direction[3 * l + 2]
        ln = k.length[l]
        e.lb[3 * l] = px + (rl[0] * dx + rl[1] * dy + rl[2] * dz) * ln
        e.lb[3 * l + 1] = py + (rl[3] * dx + rl[4] * dy + rl[5] * dz) * ln
        e.lb[3 * l + 2] = pz + (rl[6] * dx + rl[7] * dy + rl[8] * dz) * ln


cdef void _hand_vel(Env* e, const Kin* k, int link, double px, double py, double pz,
                    double* out) noexcept nogil:
    cdef double vx = 0.0, vy = 0.0, vz = 0.0, rx, ry, rz, cx, cy, cz, qd
    cdef int kk = link, j
    while kk >= 0:
        j = <int>k.joint[kk]
        if j >= 0:
            rx = px - e.jo[3 * j]
            ry = py - e.jo[3 * j + 1]
            rz = pz - e.jo[3 * j + 2]
            cx = e.jw[3 * j + 1] * rz - e.jw[3 * j + 2] * ry
            cy = e.jw[3 * j + 2] * rx - e.jw[3 * j] * rz
            cz = e.jw[3 * j] * ry - e.jw[3 * j + 1] * rx
            qd = e.qd[j]
            vx = vx + cx * qd
            vy = vy + cy * qd
            vz = vz + cz * qd
        kk = <int>k.parent[kk]
    out[0] = vx
    out[1] = vy
    out[2] = vz


cdef double _inv_mass(Env* e, const Kin* k, int link, double mass, double px, double py, double pz,
                      double nx, double ny, double nz) noexcept nogil:
    cdef double w = 1.0 / mass, rx, ry, rz, cx, cy, cz, jn
    cdef int kk = link, j
    while kk >= 0:
        j = <int>k.joint[kk]
        if j >= 0:
            rx = px - e.jo[3 * j]
            ry = py - e.jo[3 * j + 1]
            rz = pz - e.jo[3 * j + 2]
            cx = e.jw[3 * j + 1] * rz - e.jw[3 * j + 2] * ry
            cy = e.jw[3 * j + 2] * rx - e.jw[3 * j] * rz
            cz = e.jw[3 * j] * ry - e.jw[3 * j + 1] * rx
            jn = _dot(cx, cy, cz, nx, ny, nz)
            w = w + jn * jn / k.inertia[j]
        kk = <int>k.parent[kk]
    return w


cdef void _apply_joint_impulse(Env* e, const Kin* k, int link, double imp, double px, double py,
                               double pz, double nx, double ny, double nz) noexcept nogil:
    cdef double rx, ry, rz, cx, cy, cz, jn
    cdef int kk = link, j
    while kk >= 0:
        j = <int>k.joint[kk]
        if j >= 0:
            rx = px - e.jo[3 * j]
            ry = py - e.jo[3 * j + 1]
            rz = pz - e.jo[3 * j + 2]
            cx = e.jw[3 * j + 1] * rz - e.jw[3 * j + 2] * ry
            cy = e.jw[3 * j + 2] * rx - e.jw[3 * j] * rz
            cz = e.jw[3 * j] * ry - e.jw[3 * j + 1] * rx
            jn = _dot(cx, cy, cz, nx, ny, nz)
            e.qd[j] = e.qd[j] - jn * (imp / k.inertia[j])
        kk = <int>k.parent[kk]


cdef void _resolve(Env* e, const Kin* k, int link, int b, double nx, double ny, double nz,
                   double pen, const double* prm) noexcept nogil:
    # link < 0: static collider (palm)
    cdef double* bp = e.bp + 3 * b
    cdef double* bv = e.bv + 3 * b
    cdef double rb = e.br[b], mass = e.bm[b]
    cdef double px = bp[0] - nx * rb
    cdef double py = bp[1] - ny * rb
    cdef double pz = bp[2] - nz * rb
    cdef double hv[3]
    cdef double vn, wn, eff, pn, s, rx, ry, rz, vn2, tx, ty, tz, vt, wt, pt, lim, c
    _hand_vel(e, k, link, px, py, pz, hv)
    vn = _dot(bv[0] - hv[0], bv[1] - hv[1], bv[2] - hv[2], nx, ny, nz)
    if vn < 0.0:
        wn = _inv_mass(e, k, link, mass, px, py, pz, nx, ny, nz)
        eff = prm[REST] if -vn > prm[REST_V] else 0.0
        pn = -(1.0 + eff) * vn / wn
        s = pn / mass
        bv[0] = bv[0] + s * nx
        bv[1] = bv[1] + s * ny
        bv[2] = bv[2] + s * nz
        _apply_joint_impulse(e, k, link, pn, px, py, pz, nx, ny, nz)
        _hand_vel(e, k, link, px, py, pz, hv)
        rx = bv[0] - hv[0]
        ry = bv[1] - hv[1]
        rz = bv[2] - hv[2]
        vn2 = _dot(rx, ry, rz, nx, ny, nz)
        tx = rx - vn2 * nx
        ty = ry - vn2 * ny
        tz = rz - vn2 * nz
        vt = sqrt(_dot(tx, ty, tz, tx, ty, tz))
        if vt > 1e-12:
            tx = tx / vt
            ty = ty / vt
            tz = tz / vt
            wt = _inv_mass(e, k, link, mass, px, py, pz, tx, ty, tz)
            pt = -vt / wt
            lim = -prm[MU] * pn
            if pt < lim:
                pt = lim
            s = pt / mass
            bv[0] = bv[0] + s * tx
            bv[1] = bv[1] + s * ty
            bv[2] = bv[2] + s * tz
            _apply_joint_impulse(e, k, link, pt, px, py, pz, tx, ty, tz)
            # on an articulated collider friction leaks into the normal
            # direction; pull the normal speed back into [0, e * approach]
            _hand_vel(e, k, link, px, py, pz, hv)
            vn2 = _dot(bv[0] - hv[0], bv[1] - hv[1], bv[2] - hv[2], nx, ny, nz)
            c = -eff * vn
            if vn2 > c:
                pt = (c - vn2) / wn
            elif vn2 < 0.0:
                pt = -vn2 / wn
            else:
                pt = 0.0
            if pt != 0.0:
                s = pt / mass
                bv[0] = bv[0] + s * nx
                bv[1] = bv[1] + s * ny
                bv[2] = bv[2] + s * nz
                _apply_joint_impulse(e, k, link, pt, px, py, pz, nx, ny, nz)
    if pen > prm[SLOP]:
        c = prm[BETA] * (pen - prm[SLOP])
        bp[0] = bp[0] + nx * c
        bp[1] = bp[1] + ny * c
        bp[2] = bp[2] + nz * c


cdef inline double _clamp(double x, double lo, double hi) noexcept nogil:
    return lo if x < lo else (hi if x > hi else x)


cdef int _substep(Env* e, const Kin* k, const double* prm) noexcept nogil:
    cdef double dt = prm[DT]
    cdef int j, b, b2, l, s, i
    cdef double tau, qn, ax, ay, az, abx, aby, abz, apx, apy, apz, ab2, t, dx, dy, dz, dist
    cdef double rsum, nx, ny, nz, pen, vn, eff, pn, s1, s2, c, cx, cy, cz, rb
    cdef double* p
    cdef double* p1
    cdef double* p2
    cdef double* v1
    cdef double* v2
    for j in range(k.n_joints):
        tau = prm[KP] * (e.qc[j] - e.q[j]) - prm[KD] * e.qd[j]
        tau = _clamp(tau, -prm[TMAX], prm[TMAX])
        e.qd[j] = e.qd[j] + dt * tau / k.inertia[j]
    for b in range(e.n_balls):
        e.bv[3 * b] = e.bv[3 * b] + dt * prm[GX]
        e.bv[3 * b + 1] = e.bv[3 * b + 1] + dt * prm[GY]
        e.bv[3 * b + 2] = e.bv[3 * b + 2] + dt * prm[GZ]
    if k.has_palm:
        for b in range(e.n_balls):
            p = e.bp + 3 * b
            rb = e.br[b]
            cx = _clamp(p[0], k.palm_lo[0], k.palm_hi[0])
            cy = _clamp(p[1], k.palm_lo[1], k.palm_hi[1])
            cz = _clamp(p[2], k.palm_lo[2], k.palm_hi[2])
            dx = p[0] - cx
            dy = p[1] - cy
            dz = p[2] - cz
            dist = sqrt(_dot(dx, dy, dz, dx, dy, dz))
            if dist < rb:
                if dist > 0.0:
                    nx = dx / dist
                    ny = dy / dist
                    nz = dz / dist
                    pen = rb - dist
                else:
                    nx = 0.0
                    ny = 0.0
                    nz = 1.0
                    pen = rb + (k.palm_hi[2] - p[2])
                if k.palm_sensor >= 0:
                    e.tact[k.palm_sensor] = 1
                _resolve(e, k, -1, b, nx, ny, nz, pen, prm)
    for l in range(k.n_links):
        if k.radius[l] <= 0.0:
            continue
        s = <int>k.sensor_index[l]
        for b in range(e.n_balls):
            p = e.bp + 3 * b
            abx = e.lb[3 * l] - e.la[3 * l]
            aby = e.lb[3 * l + 1] - e.la[3 * l + 1]
            abz = e.lb[3 * l + 2] - e.la[3 * l + 2]
            apx = p[0] - e.la[3 * l]
            apy = p[1] - e.la[3 * l + 1]
            apz = p[2] - e.la[3 * l + 2]
            ab2 = _dot(abx, aby, abz, abx, aby, abz)
            if ab2 > 0.0:
                t = _dot(apx, apy, apz, abx, aby, abz) / ab2
            else:
                t = 0.0
            t = _clamp(t, 0.0, 1.0)
            dx = p[0] - (e.la[3 * l] + t * abx)
            dy = p[1] - (e.la[3 * l + 1] + t * aby)
            dz = p[2] - (e.la[3 * l + 2] + t * abz)
            dist = sqrt(_dot(dx, dy, dz, dx, dy, dz))
            rsum = e.br[b] + k.radius[l]
            if dist < rsum:
                if dist > 0.0:
                    nx = dx / dist
                    ny = dy / dist
                    nz = dz / dist
                else:
                    nx = 0.0
                    ny = 0.0
                    nz = 1.0
                if s >= 0:
                    e.tact[s] = 1
                _resolve(e, k, l, b, nx, ny, nz, rsum - dist, prm)
    for b in range(e.n_balls):
        for b2 in range(b + 1, e.n_balls):
            p1 = e.bp + 3 * b
            p2 = e.bp + 3 * b2
            v1 = e.bv + 3 * b
            v2 = e.bv + 3 * b2
            dx = p2[0] - p1[0]
            dy = p2[1] - p1[1]
            dz = p2[2] - p1[2]
            dist = sqrt(_dot(dx, dy, dz, dx, dy, dz))
            rsum = e.br[b] + e.br[b2]
            if dist < rsum:
                if dist > 0.0:
                    nx = dx / dist
                    ny = dy / dist
                    nz = dz / dist
                else:
                    nx = 0.0
                    ny = 0.0
                    nz = 1.0
                vn = _dot(v2[0] - v1[0], v2[1] - v1[1], v2[2] - v1[2], nx, ny, nz)
                if vn < 0.0:
                    eff = prm[REST] if -vn > prm[REST_V] else 0.0
                    pn = -(1.0 + eff) * vn / (1.0 / e.bm[b] + 1.0 / e.bm[b2])
                    s1 = pn / e.bm[b]
                    s2 = pn / e.bm[b2]
                    v1[0] = v1[0] - s1 * nx
                    v2[0] = v2[0] + s2 * nx
                    v1[1] = v1[1] - s1 * ny
                    v2[1] = v2[1] + s2 * ny
                    v1[2] = v1[2] - s1 * nz
                    v2[2] = v2[2] + s2 * nz
                pen = rsum - dist
                if pen > prm[SLOP]:
                    c = 0.5 * (prm[BETA] * (pen - prm[SLOP]))
                    p1[0] = p1[0] - nx * c
                    p2[0] = p2[0] + nx * c
                    p1[1] = p1[1] - ny * c
                    p2[1] = p2[1] + ny * c
                    p1[2] = p1[2] - nz * c
                    p2[2] = p2[2] + nz * c
    for j in range(k.n_joints):
        qn = e.q[j] + dt * e.qd[j]
        if qn < k.limits[2 * j]:
            qn = k.limits[2 * j]
            if e.qd[j] < 0.0:
                e.qd[j] = 0.0
        elif qn > k.limits[2 * j + 1]:
            qn = k.limits[2 * j + 1]
            if e.qd[j] > 0.0:
                e.qd[j] = 0.0
        e.q[j] = qn
    for i in range(3 * e.n_balls):
        e.bp[i] = e.bp[i] + dt * e.bv[i]
    _fk(e, k)
    for j in range(k.n_joints):
        if not (isfinite(e.q[j]) and isfinite(e.qd[j])):
            return 1
    for i in range(3 * e.n_balls):
        if not (isfinite(e.bp[i]) and isfinite(e.bv[i])):
            return 1
    return 0


cdef Kin _make_kin(dict kin, const int64_t[::1] parent, const int64_t[::1] joint,
                   const double[:, ::1] offset, const double[:, ::1] axis,
                   const double[:, ::1] direction, const double[::1] length,
                   const double[::1] radius, const int64_t[::1] sensor_index,
                   const double[::1] inertia, const double[:, ::1] limits):
    cdef Kin k
    cdef int i
    k.n_links = parent.shape[0]
    k.n_joints = inertia.shape[0]
    k.parent = &parent[0] if k.n_links else NULL
    k.joint = &joint[0] if k.n_links else NULL
    k.offset = &offset[0, 0] if k.n_links else NULL
    k.axis = &axis[0, 0] if k.n_links else NULL
    k.direction = &direction[0, 0] if k.n_links else NULL
    k.length = &length[0] if k.n_links else NULL
    k.radius = &radius[0] if k.n_links else NULL
    k.sensor_index = &sensor_index[0] if k.n_links else NULL
    k.inertia = &inertia[0] if k.n_joints else NULL
    k.limits = &limits[0, 0] if k.n_joints else NULL
    k.has_palm = int(kin["has_palm"])
    k.palm_sensor = int(kin["palm_sensor_index"])
    for i in range(3):
        k.palm_lo[i] = float(kin["palm_lo"][i])
        k.palm_hi[i] = float(kin["palm_hi"][i])
    return k


cdef struct Batch:
    double* q
    double* qd
    const double* qc
    double* bp
    double* bv
    const double* br
    const double* bm
    double* la
    double* lb
    double* lr
    double* jo
    double* jw
    unsigned char* tact
    unsigned char* corrupt
    int nj
    int nb
    int nl
    int nt


cdef void _run_env(const Batch* B, const Kin* k, const double* prm, Py_ssize_t i, int n_substeps,
                   bint reset_tactile, bint fk_only) noexcept nogil:
    cdef Env e
    cdef int sub, r
    e.q = B.q + i * B.nj
    e.qd = B.qd + i * B.nj
    e.qc = B.qc + i * B.nj
    e.bp = B.bp + i * 3 * B.nb
    e.bv = B.bv + i * 3 * B.nb
    e.br = B.br + i * B.nb
    e.bm = B.bm + i * B.nb
    e.la = B.la + i * 3 * B.nl
    e.lb = B.lb + i * 3 * B.nl
    e.lr = B.lr + i * 9 * B.nl
    e.jo = B.jo + i * 3 * B.nj
    e.jw = B.jw + i * 3 * B.nj
    e.tact = B.tact + i * B.nt
    e.n_balls = B.nb
    if fk_only:
        _fk(&e, k)
        return
    if reset_tactile:
        for r in range(B.nt):
            e.tact[r] = 0
    if B.corrupt[i]:
        return
    for sub in range(n_substeps):
        if _substep(&e, k, prm):
            B.corrupt[i] = 1
            return


cdef double* _ptr(object arr):
    cdef double[::1] flat = arr.reshape(-1)
    return &flat[0] if flat.shape[0] else NULL


def control_step(world, dict kin, const double[::1] params, int n_substeps, int n_threads=1,
                 bint reset_tactile=True, bint fk_only=False):
    """Advance every env by ``n_substeps`` physics substeps in place.

    Tactile bits are OR-ed over the substeps (cleared first unless
    ``reset_tactile`` is false).  Envs whose state turns non-finite are
    flagged in ``world.corrupt`` and left untouched afterwards.  With
    ``fk_only`` only forward kinematics is recomputed.
    """
    cdef Kin k = _make_kin(kin, kin["parent"], kin["joint"], kin["offset"], kin["axis"],
                           kin["direction"], kin["length"], kin["radius"], kin["sensor_index"],
                           kin["inertia"], kin["limits"])
    cdef Batch B
    cdef Py_ssize_t n = world.q.shape[0], i
    cdef unsigned char[::1] corrupt = world.corrupt
    cdef unsigned char[::1] tact = world.tactile.reshape(-1)
    cdef unsigned char udummy = 0
    cdef const double* prm = &params[0]
    for name in ("q", "qdot", "q_cmd", "ball_pos", "ball_vel", "ball_radius", "ball_mass",
                 "link_a", "link_b", "link_rot", "joint_origin", "joint_axis", "tactile", "corrupt"):
        arr = getattr(world, name)
        if not arr.flags.c_contiguous:
            raise ValueError(f"world.{name} must be C-contiguous")
    if n == 0:
        return
    B.nj = world.q.shape[1]
    B.nb = world.ball_pos.shape[1]
    B.nl = world.link_a.shape[1]
    B.nt = world.tactile.shape[1]
    B.q = _ptr(world.q)
    B.qd = _ptr(world.qdot)
    B.qc = _ptr(world.q_cmd)
    B.bp = _ptr(world.ball_pos)
    B.bv = _ptr(world.ball_vel)
    B.br = _ptr(world.ball_radius)
    B.bm = _ptr(world.ball_mass)
    B.la = _ptr(world.link_a)
    B.lb = _ptr(world.link_b)
    B.lr = _ptr(world.link_rot)
    B.jo = _ptr(world.joint_origin)
    B.jw = _ptr(world.joint_axis)
    B.tact = &tact[0] if tact.shape[0] else &udummy
    B.corrupt = &corrupt[0]
    if n_threads < 1:
        n_threads = 1
    for i in prange(n, nogil=True, schedule="static", num_threads=n_threads):
        _run_env(&B, &k, prm, i, n_substeps, reset_tactile, fk_only)
