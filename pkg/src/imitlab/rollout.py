"""Teacher-interleaved rollout collection (turn-level and prefix mixtures).

Random streams are keyed by (seed, instance id, replica, purpose) so a batch
collected in any order, or across any number of worker processes, produces the
same per-instance trajectories.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import LabeledTransition, TaskInstance, Trajectory, Turn, batch_of
from .env import Environment, substream
from .policy import SamplingConfig

PLAN_STREAM = 0
ROLLOUT_STREAM = 1

REGIMES = ("turn", "traj", "teacher", "student")


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class IndicatorPlan:
    indicators: tuple[int, ...]
    regime: str
    parameter: float  # beta for "turn", kappa for "traj"

    def __post_init__(self):
        if self.regime == "traj":
            k = int(self.parameter)
            if self.indicators != (0,) * k + (1,) * (len(self.indicators) - k):
                raise ValueError("prefix plan must be 0^kappa 1^(T_max - kappa)")

    def __len__(self) -> int:
        return len(self.indicators)


def sample_turn_indicators(beta: float, T_max: int, rng: np.random.Generator) -> IndicatorPlan:
    """Each turn is teacher-executed independently with probability beta."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    b = rng.random(T_max) < beta
    return IndicatorPlan(tuple(int(x) for x in b), "turn", float(beta))


def prefix_plan(kappa: int, T_max: int) -> IndicatorPlan:
    if not 0 <= kappa <= T_max:
        raise ValueError(f"kappa must be in 0..{T_max}, got {kappa}")
    return IndicatorPlan((0,) * kappa + (1,) * (T_max - kappa), "traj", kappa)


def sample_prefix_indicators(rho: Sequence[float], rng: np.random.Generator, T_max: int | None = None) -> IndicatorPlan:
    """Student keeps control for kappa ~ rho turns, then the teacher completes."""
    rho = np.asarray(rho, dtype=float)
    if abs(rho.sum() - 1.0) > 1e-9 or np.any(rho < 0):
        raise ValueError("rho must be a probability vector")
    T_max = len(rho) - 1 if T_max is None else T_max
    if len(rho) != T_max + 1:
        raise ValueError("rho must cover 0..T_max")
    kappa = int(rng.choice(len(rho), p=rho))
    return prefix_plan(kappa, T_max)


def constant_plan(executor: str, T_max: int) -> IndicatorPlan:
    if executor == "teacher":
        return IndicatorPlan((1,) * T_max, "turn", 1.0)
    return IndicatorPlan((0,) * T_max, "turn", 0.0)


def collect_trajectory(
    teacher,
    student,
    env: Environment,
    instance: TaskInstance,
    plan: IndicatorPlan,
    sampling: SamplingConfig,
    rng: np.random.Generator,
) -> tuple[Trajectory, list[LabeledTransition]]:
    """Roll out one instance under ``plan``, querying the teacher at every visited state."""
    if len(plan) != instance.horizon_cap:
        raise ValueError(f"plan length {len(plan)} != horizon cap {instance.horizon_cap}")
    state, ctx = env.reset(instance)
    turns: list[Turn] = []
    contexts = [ctx]
    for t in range(1, instance.horizon_cap + 1):
        label = teacher.sample_action(ctx, sampling, rng)
        b = plan.indicators[t - 1]
        action = label if b == 1 else student.sample_action(ctx, sampling, rng)
        try:
            obs, state = env.step(state, action, rng)
        except Exception as e:
            raise RolloutError(f"instance {instance.id}, turn {t}: {e}") from e
        turns.append(Turn(b, action, label, obs))
        if action.is_finish or t == instance.horizon_cap:
            break
        ctx = ctx.extend(action, obs, state)
        contexts.append(ctx)
    finished = turns[-1].executed.is_finish
    traj = Trajectory(instance, tuple(turns), env.judge(state, finished), contexts=tuple(contexts))
    return traj, batch_of(traj)


def run_policy(
    policy, env: Environment, instance: TaskInstance, sampling: SamplingConfig, rng: np.random.Generator | None = None
) -> Trajectory:
    """Single-policy rollout without teacher labels (evaluation, state sampling)."""
    state, ctx = env.reset(instance)
    turns: list[Turn] = []
    contexts = [ctx]
    for t in range(1, instance.horizon_cap + 1):
        action = policy.sample_action(ctx, sampling, rng)
        obs, state = env.step(state, action, rng)
        turns.append(Turn(0, action, None, obs))
        if action.is_finish or t == instance.horizon_cap:
            break
        ctx = ctx.extend(action, obs, state)
        contexts.append(ctx)
    finished = turns[-1].executed.is_finish
    return Trajectory(instance, tuple(turns), env.judge(state, finished), contexts=tuple(contexts))


@dataclass(frozen=True)
class RegimeConfig:
    """How indicator plans are drawn for a batch."""

    kind: str  # turn | traj | teacher | student
    beta: float = 1.0
    rho: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ValueError(f"unknown regime {self.kind!r}")
        if self.kind == "traj" and self.rho is None:
            raise ValueError("traj regime needs rho")

    def plan(self, T_max: int, rng: np.random.Generator) -> IndicatorPlan:
        if self.kind == "turn":
            return sample_turn_indicators(self.beta, T_max, rng)
        if self.kind == "traj":
            rho = np.zeros(T_max + 1)
            n = min(len(self.rho), T_max + 1)
            rho[:n] = self.rho[:n]
            # mass beyond T_max means "student for the whole episode"
            rho[T_max] += sum(self.rho[n:])
            return sample_prefix_indicators(rho, rng, T_max)
        return constant_plan(self.kind, T_max)


def _collect_one(args):
    teacher, student, env, instance, regime, sampling, seed, replica = args
    plan = regime.plan(instance.horizon_cap, substream(seed, instance.id, replica, PLAN_STREAM))
    rng = substream(seed, instance.id, replica, ROLLOUT_STREAM)
    return collect_trajectory(teacher, student, env, instance, plan, sampling, rng)


def _collect_chunk(args):
    return [_collect_one(a) for a in args]


def collect_batch(
    teacher,
    student,
    env: Environment,
    instances: Sequence[TaskInstance],
    regime: RegimeConfig,
    sampling: SamplingConfig,
    seed: int,
    replicas: int = 1,
    workers: int = 1,
) -> tuple[list[Trajectory], list[LabeledTransition]]:
    """One trajectory per (instance, replica), returned in input order."""
    if not instances:
        raise ValueError("collect_batch needs at least one instance")
    jobs = [(teacher, student, env, inst, regime, sampling, seed, r) for inst in instances for r in range(replicas)]
    if workers <= 1 or len(jobs) < 2:
        results = [_collect_one(j) for j in jobs]
    else:
        size = -(-len(jobs) // workers)
        chunks = [jobs[i : i + size] for i in range(0, len(jobs), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for chunk in pool.map(_collect_chunk, chunks) for r in chunk]
    trajectories = [t for t, _ in results]
    transitions = [tr for _, batch in results for tr in batch]
    return trajectories, transitions


@dataclass(frozen=True)
class BatchSummary:
    iteration: int
    n_trajectories: int
    n_transitions: int
    teacher_turn_fraction: float
    success_rate: float

    FIELDS = ("iteration", "n_trajectories", "n_transitions", "teacher_turn_fraction", "success_rate")

    def record(self) -> tuple[str, ...]:
        return (
            str(self.iteration),
            str(self.n_trajectories),
            str(self.n_transitions),
            f"{self.teacher_turn_fraction:.12g}",
            f"{self.success_rate:.12g}",
        )


def summarize_batch(iteration: int, trajectories: Sequence[Trajectory]) -> BatchSummary:
    n_turns = sum(len(t) for t in trajectories)
    n_teacher = sum(sum(t.indicators) for t in trajectories)
    return BatchSummary(
        iteration=iteration,
        n_trajectories=len(trajectories),
        n_transitions=n_turns,
        teacher_turn_fraction=n_teacher / n_turns if n_turns else 0.0,
        success_rate=sum(t.success for t in trajectories) / len(trajectories) if trajectories else 0.0,
    )
