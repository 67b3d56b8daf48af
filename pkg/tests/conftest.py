import numpy as np
import pytest

from imitlab.env import ChainRepair, ChainRepairSpec, OracleTeacher, TaskSampler, TokenEdit, TokenEditSpec
from imitlab.policy import ROLLOUT, SoftmaxPolicy, init_params
from imitlab.rollout import collect_trajectory, constant_plan, sample_turn_indicators


@pytest.fixture
def chain():
    return ChainRepair(ChainRepairSpec(T_max=10, K=4, D=2))


@pytest.fixture
def edit():
    return TokenEdit(TokenEditSpec(T_max=8, V=8, M=3))


def random_policy(env, rng, scale=1.0, mode="linear"):
    """Student with random logits (linear mode, so every context has its own values)."""
    params = init_params(env, mode, scale=scale, rng=rng)
    if mode == "tabular":
        params.default_row = scale * rng.standard_normal(params.default_row.shape)
    return SoftmaxPolicy(params, env)


def mixed_trajectory(env, seed, beta=0.5, eps=0.1, instance_id=0):
    """A trajectory collected under a turn-level mixture with a noisy teacher."""
    rng = np.random.default_rng(seed)
    student = random_policy(env, rng)
    teacher = OracleTeacher(env, eps)
    inst = TaskSampler(env, seed).instance(instance_id)
    plan = sample_turn_indicators(beta, inst.horizon_cap, rng)
    traj, batch = collect_trajectory(teacher, student, env, inst, plan, ROLLOUT, rng)
    return traj, batch


def teacher_trajectory(env, seed=0, instance_id=0):
    teacher = OracleTeacher(env, 0.0)
    inst = TaskSampler(env, seed).instance(instance_id)
    rng = np.random.default_rng(seed)
    return collect_trajectory(teacher, teacher, env, inst, constant_plan("teacher", inst.horizon_cap), ROLLOUT, rng)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
