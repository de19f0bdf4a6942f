import numpy as np
import pytest
from hypothesis import given, strategies as st

from tactobench.physics import (PhysicsConfig, Stepper, WorldBatch, apply_pd_control, detect_contacts,
                                step_substep)
from tactobench.physics import _reference

from conftest import BACKENDS, far_ball_world

G = 9.81
DT = 1.0 / 240.0


def semi_implicit_oracle(z0, v0, n, dt=DT, g=-G):
    z, v = z0, v0
    for _ in range(n):
        v = v + dt * g
        z = z + dt * v
    return z, v


def step(world, morph, backend, n=1, cfg=None, e=0.8, threads=1):
    s = Stepper(morph, cfg or PhysicsConfig(), e, backend=backend, n_threads=threads)
    s.forward_kinematics(world)
    s.step(world, n)
    s.close()
    return world


def test_free_fall_one_second_exact(morphs, backend):
    w = far_ball_world(morphs["paddle"])
    step(w, morphs["paddle"], backend, 240)
    z, v = semi_implicit_oracle(10.0, 0.0, 240)
    assert w.ball_pos[0, 0, 2] == z
    assert w.ball_vel[0, 0, 2] == v
    closed = -G * DT * DT * (240 * 241 / 2)
    assert closed == pytest.approx(-4.9254, abs=5e-5)
    assert w.ball_pos[0, 0, 2] - 10.0 == pytest.approx(closed, abs=1e-12)
    assert w.ball_vel[0, 0, 2] == pytest.approx(-9.81, abs=1e-12)
    # continuous ballistic solution
    assert abs((w.ball_pos[0, 0, 2] - 10.0) - (-0.5 * G)) <= G * DT * 1.0 / 2 + 1e-9


@pytest.mark.parametrize("n", [1, 17, 120, 480])
def test_free_fall_continuous_bound(morphs, n):
    w = far_ball_world(morphs["paddle"], z=30.0)
    step(w, morphs["paddle"], None, n)
    t = n * DT
    assert abs((w.ball_pos[0, 0, 2] - 30.0) + 0.5 * G * t * t) <= G * DT * t / 2 + 1e-9


def test_zero_gravity_fixed_point(morphs, backend):
    for name in ("shadow", "allegro", "paddle"):
        m = morphs[name]
        w = far_ball_world(m, z=0.3)
        cfg = PhysicsConfig(gravity=(0.0, 0.0, 0.0))
        s = Stepper(m, cfg, 0.8, backend=backend)
        s.forward_kinematics(w)
        before = w.copy()
        s.step(w, 50)
        for k, v in before.arrays().items():
            np.testing.assert_array_equal(getattr(w, k), v, err_msg=k)


def _palm_drop(morphs, vz, backend, gravity=(0.0, 0.0, 0.0), e=0.8):
    m = morphs["shadow"]
    w = WorldBatch.allocate(1, m, 1)
    w.q[...] = m.joint_mid
    w.q_cmd[...] = m.joint_mid
    r = m.ball_radius
    w.ball_pos[0, 0] = (0.0, 0.0, r - 1e-5)  # penetration below the slop
    w.ball_vel[0, 0] = (0.0, 0.0, vz)
    step(w, m, backend, 1, PhysicsConfig(gravity=gravity), e)
    return w


def test_restitution_static_surface(morphs, backend):
    w = _palm_drop(morphs, -2.0, backend)
    assert w.ball_vel[0, 0, 2] == pytest.approx(1.6, abs=1e-9)
    assert w.tactile[0, 0] == 1


def test_restitution_ratio_with_gravity(morphs, backend):
    w = _palm_drop(morphs, -2.0, backend, gravity=(0.0, 0.0, -G))
    pre = -2.0 - G * DT
    assert abs(w.ball_vel[0, 0, 2] / pre) == pytest.approx(0.8, abs=1e-9)


def test_slow_contact_is_inelastic(morphs):
    w = _palm_drop(morphs, -0.05, None)
    assert w.ball_vel[0, 0, 2] == pytest.approx(0.0, abs=1e-15)


@given(vx=st.floats(-3, 3), vy=st.floats(-3, 3), vz=st.floats(-5, -0.01),
       e=st.floats(0, 1), qd=st.floats(-5, 5))
def test_no_energy_injection(morphs, vx, vy, vz, e, qd):
    # ball on the moving paddle: post-impact relative normal speed <= e * pre
    m = morphs["paddle"]
    w = WorldBatch.allocate(1, m, 1)
    w.qdot[0] = (qd, -qd)
    kin = _reference.prepare(m.kinematic_arrays())
    _reference.forward_kinematics(w, kin)
    r = m.ball_radius
    w.ball_pos[0, 0] = (0.05, 0.0, r - 5e-5)
    w.ball_vel[0, 0] = (vx, vy, vz)
    mask, nx, ny, nz, pen = _reference._capsule_contact(w, 1, 0, kin)
    assert mask[0]
    joints = kin["ancestors"][1]

    def rel_normal():
        b = w.ball_pos[:, 0]
        px, py, pz = b[:, 0] - nx * r, b[:, 1] - ny * r, b[:, 2] - nz * r
        hx, hy, hz = _reference._hand_velocity(w, joints, px, py, pz)
        v = w.ball_vel[:, 0]
        return float(((v[:, 0] - hx) * nx + (v[:, 1] - hy) * ny + (v[:, 2] - hz) * nz)[0])

    pre = rel_normal()
    params = PhysicsConfig(gravity=(0, 0, 0)).kernel_params(e)
    _reference._resolve(w, mask, 0, joints, kin["inertia"], nx, ny, nz, pen, params)
    post = rel_normal()
    if pre < 0:
        assert -1e-9 <= post <= e * abs(pre) + 1e-9


def test_pd_control_examples():
    cfg = PhysicsConfig()
    assert apply_pd_control(np.array([0.3]), np.array([0.0]), np.array([0.3]), cfg)[0] == 0.0
    c1 = PhysicsConfig(pd_kp=1.0, pd_kd=0.0, max_joint_torque=0.3)
    assert apply_pd_control(np.array([0.0]), np.array([0.0]), np.array([0.5]), c1)[0] == pytest.approx(0.3)
    c2 = PhysicsConfig(pd_kp=2.0, pd_kd=1.0, max_joint_torque=10.0)
    assert apply_pd_control(np.array([0.0]), np.array([0.05]), np.array([0.1]), c2)[0] == pytest.approx(0.15)


def test_pd_tracks_step_within_three_control_steps(morphs):
    m = morphs["shadow"]
    w = far_ball_world(m)
    w.q_cmd[...] = m.joint_mid + 0.2
    s = Stepper(m, PhysicsConfig(), 0.8)
    s.forward_kinematics(w)
    for _ in range(3):
        s.step(w)
    assert np.abs(w.q_cmd - w.q).max() < 0.15 * 0.2
    for _ in range(3):
        s.step(w)
    assert np.abs(w.q_cmd - w.q).max() < 0.01 * 0.2
    for _ in range(20):
        s.step(w)
    # no overshoot past the target at steady state
    assert np.all(w.q <= w.q_cmd + 1e-6)


def test_joint_limits_enforced(morphs, backend):
    m = morphs["allegro"]
    w = far_ball_world(m, n_envs=4)
    w.q_cmd[...] = m.joint_limits[:, 1] + 1.0
    w.qdot[...] = 50.0
    step(w, m, backend, 40)
    assert np.all(w.q <= m.joint_limits[:, 1])
    assert np.all(w.q >= m.joint_limits[:, 0])


def _capsule_touch_world(m, link, gap):
    """Ball centred above the midpoint of ``link`` at axis distance r_b + r_c + gap."""
    w = WorldBatch.allocate(1, m, 1)
    w.q[...] = m.joint_mid
    kin = m.kinematic_arrays()
    s = Stepper(m, PhysicsConfig(), 0.8)
    s.forward_kinematics(w)
    a, b = w.link_a[0, link], w.link_b[0, link]
    mid = 0.5 * (a + b)
    axis = (b - a) / np.linalg.norm(b - a)
    up = np.cross(axis, [0.0, 1.0, 0.0]) if abs(axis[1]) < 0.9 else np.cross(axis, [1.0, 0.0, 0.0])
    up /= np.linalg.norm(up)
    if up[2] < 0:
        up = -up
    d = m.ball_radius + kin["radius"][link] + gap
    w.ball_pos[0, 0] = mid + d * up
    return w


def test_strict_contact_boundary(morphs):
    m = morphs["paddle"]
    w = WorldBatch.allocate(1, m, 1)
    Stepper(m, PhysicsConfig(), 0.8).forward_kinematics(w)
    # sphere straight above the paddle's base endpoint, so the closest axis
    # point is the endpoint itself and the distance is the z gap
    b = w.link_a[0, 1]
    rsum = m.ball_radius + m.kinematic_arrays()["radius"][1]
    z = b[2] + rsum
    while z - b[2] > rsum:
        z = np.nextafter(z, -np.inf)
    while z - b[2] < rsum:
        z = np.nextafter(z, np.inf)
    w.ball_pos[0, 0] = (b[0], b[1], z)
    assert z - b[2] == rsum
    assert detect_contacts(w, m) == []
    while z - b[2] >= rsum:
        z = np.nextafter(z, -np.inf)
    w.ball_pos[0, 0, 2] = z
    recs = detect_contacts(w, m)
    assert len(recs) == 1 and recs[0].penetration_depth >= 0


def test_two_adjacent_fingertip_links(morphs):
    m = morphs["shadow"]
    kin = m.kinematic_arrays()
    w = WorldBatch.allocate(1, m, 1)
    w.q[...] = m.joint_mid
    Stepper(m, PhysicsConfig(), 0.8).forward_kinematics(w)
    # the joint between the last two links of the first finger
    tip = max(i for i in range(m.n_links) if kin["parent"][i] >= 0 and kin["sensor_index"][i] >= 0)
    prev = int(kin["parent"][tip])
    p = w.link_a[0, tip]
    w.ball_pos[0, 0] = p + np.array([0.0, 0.0, m.ball_radius])
    recs = detect_contacts(w, m)
    # brute-force distance check against every sensor capsule
    want = []
    for l in range(m.n_links):
        if kin["sensor_index"][l] < 0:
            continue
        a, b = w.link_a[0, l], w.link_b[0, l]
        t = np.clip(np.dot(w.ball_pos[0, 0] - a, b - a) / np.dot(b - a, b - a), 0, 1)
        d = np.linalg.norm(w.ball_pos[0, 0] - (a + t * (b - a)))
        if d < m.ball_radius + kin["radius"][l]:
            want.append(int(kin["sensor_index"][l]))
    got = [r.sensor_link_index for r in recs]
    assert sorted(got) == sorted(want)
    assert {int(kin["sensor_index"][tip]), int(kin["sensor_index"][prev])} <= set(got)
    for r in recs:
        assert np.linalg.norm(r.contact_normal) == pytest.approx(1.0, abs=1e-6)
    # and stepping sets both tactile bits
    s = Stepper(m, PhysicsConfig(gravity=(0, 0, 0)), 0.8)
    s.step(w, 1)
    assert w.tactile[0, kin["sensor_index"][tip]] == 1 and w.tactile[0, kin["sensor_index"][prev]] == 1


def test_empty_scene_no_contacts(morphs):
    for m in morphs.values():
        w = far_ball_world(m)
        Stepper(m, PhysicsConfig(), 0.8).forward_kinematics(w)
        assert detect_contacts(w, m) == []


def test_step_substep_op(morphs):
    m = morphs["paddle"]
    w = far_ball_world(m)
    Stepper(m, PhysicsConfig(), 0.8).forward_kinematics(w)
    out = step_substep(w, PhysicsConfig(), m)
    assert out is w
    assert w.ball_vel[0, 0, 2] == DT * -G


def test_non_finite_flags_corrupt(morphs, backend):
    m = morphs["paddle"]
    w = far_ball_world(m, n_envs=3)
    w.ball_vel[1, 0, 0] = np.nan
    step(w, m, backend, 4)
    assert list(w.corrupt) == [0, 1, 0]


def _random_scene(m, n, seed):
    r = np.random.default_rng(seed)
    w = WorldBatch.allocate(n, m, 2)
    lim = m.joint_limits
    w.q[...] = r.uniform(lim[:, 0], lim[:, 1], (n, m.n_joints))
    w.q_cmd[...] = r.uniform(lim[:, 0], lim[:, 1], (n, m.n_joints))
    w.qdot[...] = r.normal(0, 1, (n, m.n_joints))
    w.ball_pos[...] = r.uniform([-0.05, -0.05, 0.0], [0.1, 0.05, 0.06], (n, 2, 3))
    w.ball_vel[...] = r.normal(0, 0.5, (n, 2, 3))
    return w


@pytest.mark.parametrize("name", ["shadow", "allegro", "paddle"])
def test_thread_count_independence(morphs, backend, name):
    m = morphs[name]
    digests = set()
    for threads in (1, 2, 4, 8):
        w = _random_scene(m, 37, 5)
        step(w, m, backend, 60, threads=threads)
        digests.add(w.digest())
    assert len(digests) == 1


def test_per_env_isolation(morphs, backend):
    m = morphs["shadow"]
    a = _random_scene(m, 16, 9)
    b = a.copy()
    b.ball_vel[5, 0] += 1.0
    b.q_cmd[5] += 0.1
    step(a, m, backend, 40, threads=4)
    step(b, m, backend, 40, threads=4)
    for k, v in a.arrays().items():
        keep = np.arange(16) != 5
        np.testing.assert_array_equal(getattr(b, k)[keep], v[keep], err_msg=k)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
@pytest.mark.parametrize("name", ["paddle", "allegro", "shadow"])
def test_backends_agree(morphs, name):
    m = morphs[name]
    out = []
    for backend in ("compiled", "python"):
        w = _random_scene(m, 32, 11)
        step(w, m, backend, 60)
        out.append(w)
    for k in ("q", "qdot", "ball_pos", "ball_vel", "link_a", "tactile", "corrupt"):
        np.testing.assert_allclose(getattr(out[0], k), getattr(out[1], k), rtol=1e-12, atol=1e-12,
                                   err_msg=k)


def test_physics_config_invariants():
    cfg = PhysicsConfig()
    assert cfg.control_dt == pytest.approx(1 / 60)
    assert cfg.validate() == []
    assert PhysicsConfig(restitution_bounce_ball=1.2).validate()
    assert PhysicsConfig(friction_mu=-0.1).validate()


def test_world_fields_share_env_dimension(morphs):
    w = WorldBatch.allocate(7, morphs["orca"], 2)
    w.check_consistent()
    w.q = np.zeros((6, w.q.shape[1]))
    with pytest.raises(ValueError):
        w.check_consistent()
