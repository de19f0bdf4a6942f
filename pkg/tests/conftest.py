import numpy as np
import pytest
from hypothesis import settings

from tactobench.morphology import get_morphology
from tactobench.physics import available_backends

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

BACKENDS = available_backends()


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def morphs():
    return {n: get_morphology(n) for n in ("shadow", "shadow_lite", "allegro", "orca", "paddle")}


def far_ball_world(morph, n_envs=1, z=10.0):
    from tactobench.physics import WorldBatch
    w = WorldBatch.allocate(n_envs, morph, 1)
    w.q[...] = morph.joint_mid
    w.q_cmd[...] = morph.joint_mid
    w.ball_pos[:, 0] = (1.0, 1.0, z)
    return w


def rng(seed=0):
    return np.random.default_rng(seed)


# criterion number -> one-line verdict, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
