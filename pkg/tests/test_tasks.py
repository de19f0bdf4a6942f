import numpy as np
import pytest
from hypothesis import given, strategies as st

from tactobench.tasks import (PERIOD6_SCHEDULE, Status, TaskConfig, TaskState, check_termination,
                              compute_baoding_step, replay_contact_schedule, update_bounce)

CFG = TaskConfig("bounce")


def oracle_bounces(seq, gap=5, reward=10.0):
    """Direct scan of the textual rule: a contact after >= gap contact-free steps."""
    rewards = []
    quiet = 0
    for c in seq:
        if c:
            rewards.append(reward if quiet >= gap else 0.0)
            quiet = 0
        else:
            rewards.append(0.0)
            quiet += 1
    return rewards


def run_machine(seqs):
    seqs = np.asarray(seqs, dtype=bool)
    st_ = TaskState.zeros(seqs.shape[0])
    out = np.zeros(seqs.shape)
    for t in range(seqs.shape[1]):
        st_.steps_elapsed += 1
        st_, r = update_bounce(st_, seqs[:, t], CFG)
        out[:, t] = r
    return st_, out


def test_examples():
    C, N = True, False
    assert run_machine([[C, N, N, N, N, N, C]])[1][0, -1] == 10.0
    assert run_machine([[C, N, N, N, N, C]])[1][0, -1] == 0.0


def test_matches_oracle_on_random_sequences():
    r = np.random.default_rng(1)
    p = r.uniform(0.05, 0.9, size=(10_000, 1))
    seqs = r.random((10_000, 600)) < p
    _, out = run_machine(seqs)
    for i in range(10_000):
        assert out[i].tolist() == oracle_bounces(seqs[i])


def test_period6_maximum():
    seq = [bool(PERIOD6_SCHEDULE[t % 6]) for t in range(600)]
    st_, out = run_machine([seq])
    assert st_.bounce_count[0] == 100
    assert out.sum() == 1000.0
    rep = replay_contact_schedule(PERIOD6_SCHEDULE, CFG, 3)
    assert rep["returns"].tolist() == [1000.0] * 3


def test_contact_first_phase_gives_99():
    # starting the period with the contact wastes the first one (streak starts at 0)
    seq = [t % 6 == 0 for t in range(600)]
    assert run_machine([seq])[0].bounce_count[0] == 99


@given(st.lists(st.booleans(), min_size=1, max_size=600))
def test_return_bound_and_count_invariant(seq):
    st_, out = run_machine([seq])
    assert out.sum() <= 1000.0
    assert st_.bounce_count[0] <= len(seq) // 6 + 1


@given(st.lists(st.booleans(), min_size=1, max_size=200))
def test_counts_monotone(seq):
    s = TaskState.zeros(1)
    prev = 0
    for c in seq:
        s, _ = update_bounce(s, np.array([c]), CFG)
        assert s.bounce_count[0] >= prev
        prev = s.bounce_count[0]


@given(st.lists(st.lists(st.booleans(), min_size=3, max_size=3), min_size=1, max_size=100),
       st.permutations([0, 1, 2]))
def test_sensor_relabeling_invariant(frames, perm):
    tac = np.array(frames, dtype=bool)
    a = run_machine([tac.any(axis=1)])[1]
    b = run_machine([tac[:, perm].any(axis=1)])[1]
    assert np.array_equal(a, b)


# -- Baoding -----------------------------------------------------------------------
BCFG = TaskConfig("baoding")
R = 0.01905
T = BCFG.targets(R)


def baoding(pos, parity=0):
    s = TaskState.zeros(1)
    s.target_parity[0] = parity
    s, r, sw = compute_baoding_step(s, np.asarray(pos)[None], BCFG, T)
    return s, r[0], sw[0]


def test_on_target():
    s, r, sw = baoding(T)
    assert sw and r == pytest.approx(2 * 0.05 + 10)
    assert s.target_parity[0] == 1 and s.switch_count[0] == 1


def test_switch_boundary_inclusive():
    pos = T + np.array([[0.01, 0, 0], [-0.01, 0, 0]])
    d = np.linalg.norm(pos - T, axis=1)
    assert np.all(d == 0.01)
    assert baoding(pos)[2]


def test_dense_reward_only():
    pos = T + np.array([[0.005, 0, 0], [0, 0, 0.02]])
    _, r, sw = baoding(pos)
    assert not sw
    assert r == pytest.approx(0.05 * (np.exp(-0.15) + np.exp(-0.6)), rel=1e-12)


def test_parity_swaps_assignment():
    _, r, sw = baoding(T[::-1], parity=1)
    assert sw
    _, r, sw = baoding(T, parity=1)
    assert not sw


def test_non_finite_positions():
    s, r, sw = baoding(np.array([[np.nan, 0, 0], T[1]]))
    assert r == 0.0 and not sw
    assert check_termination(s, np.array([[[np.nan, 0, 0], T[1]]]), BCFG)[0] == Status.TERMINATED


@pytest.mark.parametrize("m", [0, 1, 2, 7, 30])
def test_scripted_alternation(m):
    s = TaskState.zeros(1)
    bonus = 0.0
    mid = T.mean(axis=0)
    for k in range(m):
        # travel half-way, then land on the currently assigned targets
        s, r, sw = compute_baoding_step(s, np.array([mid, mid])[None], BCFG, T)
        assert not sw[0]
        goal = T[::-1] if s.target_parity[0] else T
        s, r, sw = compute_baoding_step(s, goal[None], BCFG, T)
        assert sw[0]
        bonus += r[0] - 2 * 0.05
    assert s.switch_count[0] == m
    assert bonus == pytest.approx(10.0 * m)
    assert s.target_parity[0] == m % 2
    assert s.rotations[0] == m / 2


def test_termination_rules():
    s = TaskState.zeros(3)
    s.steps_elapsed[:] = (600, 10, 600)
    pos = np.array([[[0, 0, 0.05]], [[0, 0, -0.3]], [[0, 0, -0.3]]])
    status = check_termination(s, pos, CFG)
    assert list(status) == [Status.TRUNCATED, Status.TERMINATED, Status.TERMINATED]
    s.steps_elapsed[:] = 5
    assert check_termination(s, np.zeros((3, 1, 3)), CFG).tolist() == [Status.RUNNING] * 3


def test_default_targets():
    t = TaskConfig("baoding").targets(0.01905)
    assert t[0, 1] == -max(0.02, 0.01905 + 0.001) and t[1, 1] == -t[0, 1]
    small = TaskConfig("baoding").targets(0.01)
    assert small[1, 1] == 0.02
    big = TaskConfig("baoding").targets(0.0254)
    assert big[1, 1] - big[0, 1] > 2 * 0.0254


def test_config_defaults():
    c = TaskConfig()
    assert (c.max_episode_steps, c.min_gap_steps, c.r_bounce, c.r_rotation, c.switch_radius) == \
        (600, 5, 10.0, 10.0, 0.01)
    assert TaskConfig("juggle").validate()
