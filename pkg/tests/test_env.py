import json
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tactobench.env import EVAL_STREAM, TRAIN_STREAM, EnvBatchConfig, VecEnv, assemble_frame, episode_rng
from tactobench.morphology import get_morphology
from tactobench.physics import PhysicsConfig, detect_contacts
from tactobench.tasks import TaskConfig

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "paddle_zero_action.json")


def make(name="paddle", task="bounce", n=4, seed=0, stream=TRAIN_STREAM, mode="blind", **kw):
    physics = kw.pop("physics", PhysicsConfig())
    tcfg = kw.pop("task_cfg", TaskConfig(task))
    return VecEnv(get_morphology(name), tcfg, physics, n, seed=seed, stream=stream, mode=mode, **kw)


def oracle_bounces(seq, gap=5):
    quiet, count = 0, 0
    for c in seq:
        if c:
            count += quiet >= gap
            quiet = 0
        else:
            quiet += 1
    return count


@pytest.mark.parametrize("name,width", [("shadow", 388), ("shadow_lite", 288), ("allegro", 336), ("orca", 340)])
def test_blind_stacked_width(name, width):
    env = make(name, n=2)
    assert env.reset().shape == (2, width)


def test_state_mode_width():
    env = make("shadow", "baoding", n=2, mode="state")
    assert env.frame_width == 97 + 12
    assert env.reset().shape == (2, 4 * 109)


def test_reset_invariants():
    env = make("allegro", n=5)
    obs = env.reset()
    m = env.morph
    frames = obs.reshape(5, 4, -1)
    for k in range(1, 4):
        np.testing.assert_array_equal(frames[:, k], frames[:, 0])
    w = m.frame_width
    off = m.n_tactile + 2 * m.n_joints
    cmd = frames[:, 0, off:off + m.obs_block_widths[3]]
    assert np.all(cmd == 0.0)
    assert w == 84


def test_baoding_reset_no_free_switch():
    env = make("shadow", "baoding", n=16)
    env.reset()
    d = np.linalg.norm(env.world.ball_pos - env.targets[None], axis=-1)
    assert np.all(d <= env.baoding_jitter + 1e-15)
    assert np.all(env.state.switch_count == 0)
    assert np.all(env.state.target_parity == 0)


def test_control_step_is_one_sixtieth():
    env = make(n=1, physics=PhysicsConfig(gravity=(0.0, 0.0, -9.81)),
               task_cfg=TaskConfig("bounce", out_of_reach_halfextent=10.0))
    env.reset()
    env.world.ball_pos[0, 0] = (3.0, 3.0, 0.2)  # out of reach of the paddle, inside the box
    env.world.ball_vel[0, 0] = 0.0
    env.step(np.zeros((1, 2)))
    dt = 1 / 240
    assert env.world.ball_vel[0, 0, 2] == pytest.approx(-9.81 * 4 * dt, abs=1e-15)
    assert 4 * dt == pytest.approx(1 / 60)


def test_truncates_at_600():
    env = make("shadow", n=2, physics=PhysicsConfig(gravity=(0.0, 0.0, 0.0)),
               task_cfg=TaskConfig("bounce", out_of_reach_halfextent=10.0))
    env.reset()
    for t in range(1, 601):
        res = env.step(np.zeros((2, env.morph.n_actions)))
        if t < 600:
            assert not res.truncated.any() and not res.terminated.any()
    assert res.truncated.all() and not res.terminated.any()
    assert res.info["episode_length"].tolist() == [600, 600]
    # auto-reset: the returned observation starts a new episode
    assert np.all(env.state.steps_elapsed == 0)


def test_zero_action_paddle_matches_trace_oracle():
    env = make(n=3, seed=0)
    env.reset()
    contacts = [[] for _ in range(3)]
    bounces = None
    for _ in range(300):
        res = env.step(np.zeros((3, 2)))
        if res.info["done"].any():
            break
        for i in range(3):
            contacts[i].append(bool(env.world.tactile[i].any()))
        bounces = res.info["bounces"]
    for i in range(3):
        assert bounces[i] == oracle_bounces(contacts[i])
    golden = {"contacts_env0": [int(c) for c in contacts[0]], "bounces": [int(b) for b in bounces]}
    if not os.path.exists(GOLDEN):
        os.makedirs(os.path.dirname(GOLDEN), exist_ok=True)
        with open(GOLDEN, "w") as f:
            json.dump(golden, f)
    with open(GOLDEN) as f:
        assert json.load(f) == golden


def test_no_contact_tactile_zero():
    env = make(n=2)
    env.reset()
    env.world.ball_pos[:, 0] = (3.0, 3.0, 0.2)
    frame = assemble_frame(env.world, env.morph, "blind", env.last_action)
    assert np.all(frame[:, :env.morph.n_tactile] == 0)


def test_tactile_or_over_substeps():
    # ball hits the static palm early in the control step and is clear by its end
    m = get_morphology("shadow")
    env = make("shadow", n=1, physics=PhysicsConfig(gravity=(0.0, 0.0, 0.0)))
    env.reset()
    r = m.ball_radius
    env.world.ball_pos[0, 0] = (0.0, 0.0, r + 0.004)
    env.world.ball_vel[0, 0] = (0.0, 0.0, -1.0)
    env.step(np.zeros((1, m.n_actions)))
    assert env.world.tactile[0, 0] == 1
    assert detect_contacts(env.world, m) == []


@given(st.integers(0, 2**32 - 1))
def test_stack_shift(seed):
    env = make(n=3, seed=seed % 1000)
    obs = env.reset()
    a = np.random.default_rng(seed).uniform(-1, 1, (5, 3, 2))
    for t in range(5):
        prev = obs.reshape(3, 4, -1)
        res = env.step(a[t])
        obs = res.observations
        cur = obs.reshape(3, 4, -1)
        keep = ~res.info["done"]
        np.testing.assert_array_equal(cur[keep, :3], prev[keep, 1:])


def test_non_finite_action():
    env = make(n=3)
    env.reset()
    a = np.zeros((3, 2))
    a[1, 0] = np.nan
    res = env.step(a)
    assert res.terminated.tolist() == [False, True, False]
    assert res.rewards[1] == 0.0
    assert res.info["invalid_action"].tolist() == [False, True, False]


def test_action_shape_checked():
    env = make(n=3)
    with pytest.raises(ValueError):
        env.step(np.zeros((3, 5)))


def test_episode_rng_counter_based():
    a = episode_rng(1, 0, 5, 2).random(4)
    b = episode_rng(1, 0, 5, 2).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, episode_rng(1, 1, 5, 2).random(4))
    assert not np.array_equal(a, episode_rng(1, 0, 5, 3).random(4))


def test_eval_stream_untouched_by_training():
    ev1 = make(n=4, seed=3, stream=EVAL_STREAM)
    first = ev1.reset()
    tr = make(n=4, seed=3, stream=TRAIN_STREAM)
    tr.reset()
    for _ in range(50):
        tr.step(np.random.default_rng(0).uniform(-1, 1, (4, 2)))
    ev2 = make(n=4, seed=3, stream=EVAL_STREAM)
    np.testing.assert_array_equal(ev2.reset(), first)
    assert not np.array_equal(tr.reset(), first)


@pytest.mark.parametrize("name", ["paddle", "shadow"])
def test_thread_count_bitwise(name, backend):
    outs = []
    for threads in (1, 2, 4, 8):
        env = make(name, n=13, seed=4, backend=backend, n_threads=threads)
        obs = env.reset()
        acts = np.random.default_rng(7).uniform(-1, 1, (40, 13, env.morph.n_actions))
        trace = [obs]
        for a in acts:
            res = env.step(a)
            trace += [res.observations, res.rewards]
        outs.append(np.concatenate([t.ravel() for t in trace]))
        env.close()
    for o in outs[1:]:
        assert o.tobytes() == outs[0].tobytes()


def test_state_roundtrip():
    env = make(n=3, seed=2)
    env.reset()
    a = np.random.default_rng(1).uniform(-1, 1, (30, 3, 2))
    for t in range(10):
        env.step(a[t])
    saved = {k: v.copy() for k, v in env.state_arrays().items()}
    ref = [env.step(a[t]).observations for t in range(10, 30)]
    env2 = make(n=3, seed=2)
    env2.load_state_arrays(saved)
    got = [env2.step(a[t]).observations for t in range(10, 30)]
    for x, y in zip(ref, got):
        np.testing.assert_array_equal(x, y)


def test_from_config_streams():
    cfg = EnvBatchConfig(n_train=6, n_eval=2, morphology="paddle")
    m = get_morphology("paddle")
    tr = VecEnv.from_config(cfg, m, TaskConfig(), PhysicsConfig())
    ev = VecEnv.from_config(cfg, m, TaskConfig(), PhysicsConfig(), eval_batch=True)
    assert (tr.n_envs, tr.stream, ev.n_envs, ev.stream) == (6, TRAIN_STREAM, 2, EVAL_STREAM)
    assert EnvBatchConfig().n_train == 8092 and EnvBatchConfig().n_eval == 100
