import numpy as np
import pytest
from dataclasses import replace

from tactobench.morphology import (BUILTINS, MorphologyError, action_to_joint_targets, get_morphology,
                                   load_morphology, save_morphology, validate_config)

TABLE = {
    "shadow": ((17, 20, 20, 20, 20), 97, 388, 20),
    "shadow_lite": ((14, 16, 16, 13, 13), 72, 288, 13),
    "allegro": ((20, 16, 16, 16, 16), 84, 336, 10),
    "orca": ((17, 17, 17, 17, 17), 85, 340, 17),
}


@pytest.mark.parametrize("name", sorted(TABLE))
def test_named_hand_dimensions(morphs, name):
    widths, single, stacked, n_act = TABLE[name]
    m = morphs[name]
    assert tuple(m.obs_block_widths) == widths
    assert m.derived_widths() == widths
    assert m.frame_width == single
    assert m.stacked_width(4) == stacked
    assert m.n_actions == n_act
    assert validate_config(m) == []


def test_paddle_is_small(morphs):
    m = morphs["paddle"]
    assert (m.n_joints, m.n_actions, m.n_tactile) == (2, 2, 1)
    assert validate_config(m) == []


def test_identity_zero_action_gives_midpoints(morphs):
    m = morphs["orca"]
    q = action_to_joint_targets(np.zeros(m.n_actions), m)
    np.testing.assert_allclose(q, m.joint_mid)


def test_allegro_coupling_expands_to_sixteen(morphs):
    m = morphs["allegro"]
    a = np.linspace(-1, 1, 10)
    q = action_to_joint_targets(a, m)
    assert q.shape == (16,)
    lim = m.joint_limits
    assert np.all((q >= lim[:, 0]) & (q <= lim[:, 1]))


def test_action_clamped(morphs):
    m = morphs["shadow"]
    a = np.zeros(m.n_actions)
    a[3] = 2.0
    b = a.copy()
    b[3] = 1.0
    np.testing.assert_array_equal(action_to_joint_targets(a, m), action_to_joint_targets(b, m))


def test_batched_actions(morphs):
    m = morphs["shadow_lite"]
    a = np.random.default_rng(0).uniform(-1, 1, (5, m.n_actions))
    q = action_to_joint_targets(a, m)
    for i in range(5):
        np.testing.assert_array_equal(q[i], action_to_joint_targets(a[i], m))


def test_dimension_mismatch(morphs):
    with pytest.raises(MorphologyError):
        action_to_joint_targets(np.zeros(7), morphs["allegro"])


def test_lo_above_hi_reported(morphs):
    m = morphs["orca"]
    lim = m.joint_limits.copy()
    lim[2] = (0.5, -0.5)
    bad = replace(m, joint_limits=lim)
    problems = validate_config(bad)
    assert any("joint 2" in p for p in problems)


def test_violations_listed_not_raised(morphs):
    m = morphs["shadow"]
    bad = replace(m, coupling=-np.eye(m.n_joints), obs_block_widths=(1, 2, 3))
    problems = validate_config(bad)
    assert len(problems) >= 2


def test_coupling_rows_stochastic(morphs):
    for m in morphs.values():
        c = m.coupling
        assert c.shape == (m.n_joints, m.n_actions)
        assert np.all(c >= 0)
        np.testing.assert_allclose(c.sum(axis=1), 1.0)
        if m.n_joints == m.n_actions:
            np.testing.assert_array_equal(c, np.eye(m.n_joints))


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_yaml_roundtrip(tmp_path, name):
    m = get_morphology(name)
    path = tmp_path / f"{name}.yaml"
    save_morphology(m, path)
    back = load_morphology(path)
    assert back.to_dict() == m.to_dict()
    assert get_morphology(str(path)).frame_width == m.frame_width


def test_unknown_morphology():
    with pytest.raises(MorphologyError, match="unknown morphology"):
        get_morphology("octopus")


def test_ball_radii():
    assert get_morphology("shadow").ball_radius == pytest.approx(0.01905)
    assert get_morphology("allegro").ball_radius == pytest.approx(0.0254)
    assert get_morphology("shadow_lite").ball_radius == pytest.approx(0.01524)
