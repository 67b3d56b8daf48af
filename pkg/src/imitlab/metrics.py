"""Evaluation: resolution rate, reverse KL on student-visited states, failure taxonomy,
log-log slope fits and study CSV output.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ActionSeq, Context, TaskInstance, Trajectory
from .env import Environment, substream
from .policy import GREEDY, SamplingConfig
from .rollout import run_policy

TAXONOMY = ("resolved", "submitted_wrong", "no_submission_loop", "no_submission_budget")
LOOP_REPEATS = 3
KL_CONVENTION = "mean over (context, token position) pairs"

STUDY_FIELDS = (
    "study",
    "method",
    "horizon_or_budget",
    "seed",
    "failure_rate",
    "resolution_rate",
    "reverse_kl",
    "fitted_slope",
)


def resolution_rate(policy, env: Environment, instances: Sequence[TaskInstance]) -> float:
    """Fraction of instances whose greedy rollout is verified successful."""
    if not instances:
        raise ValueError("resolution rate needs at least one instance")
    return sum(run_policy(policy, env, inst, GREEDY).success for inst in instances) / len(instances)


# ---------------------------------------------------------------------------
# reverse KL


@dataclass(frozen=True)
class EmpiricalStateDistribution:
    """Contexts visited by rolling out ``policy_id``, each with the action taken there."""

    contexts: tuple[Context, ...]
    actions: tuple[ActionSeq, ...]
    policy_id: str
    temperature: float
    n_rollouts: int

    def __len__(self) -> int:
        return len(self.contexts)


def sample_state_distribution(
    policy,
    env: Environment,
    instances: Sequence[TaskInstance],
    temperature: float = 0.7,
    rng: np.random.Generator | int = 0,
    policy_id: str = "student",
) -> EmpiricalStateDistribution:
    """One rollout per instance at ``temperature`` (no nucleus truncation)."""
    if isinstance(rng, (int, np.integer)):
        rng = substream(int(rng))
    sampling = SamplingConfig(temperature=temperature)
    contexts, actions = [], []
    for inst in instances:
        traj = run_policy(policy, env, inst, sampling, rng)
        contexts.extend(traj.contexts)
        actions.extend(turn.executed for turn in traj.turns)
    return EmpiricalStateDistribution(tuple(contexts), tuple(actions), policy_id, temperature, len(instances))


@dataclass(frozen=True)
class KLReport:
    value: float
    n_positions: int
    n_infinite: int
    convention: str = KL_CONVENTION


def kl_discrete(p: np.ndarray, q: np.ndarray) -> float:
    """Exact KL(p || q); +inf when q is zero where p has mass."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    m = p > 0
    if np.any(q[m] == 0):
        return math.inf
    return float(np.sum(p[m] * (np.log(p[m]) - np.log(q[m]))))


def reverse_kl_report(student, teacher, state_dist: EmpiricalStateDistribution) -> KLReport:
    """Exact token-level KL(student || teacher) averaged over every (context, position).

    Positions follow the student's own action at each context: position ``j``
    conditions both models on that action's first ``j`` tokens.
    """
    total = 0.0
    n = 0
    n_inf = 0
    for ctx, action in zip(state_dist.contexts, state_dist.actions):
        for j in range(len(action.tokens)):
            prefix = action.tokens[:j]
            kl = kl_discrete(student.token_dist(ctx, prefix), teacher.token_dist(ctx, prefix))
            n += 1
            if math.isinf(kl):
                n_inf += 1
            else:
                total += kl
    if n == 0:
        return KLReport(math.nan, 0, 0)
    return KLReport(math.inf if n_inf else total / n, n, n_inf)


def reverse_kl(student, teacher, state_dist: EmpiricalStateDistribution) -> float:
    return reverse_kl_report(student, teacher, state_dist).value


def reverse_kl_sampled(
    student, teacher, state_dist: EmpiricalStateDistribution, rng: np.random.Generator, samples: int = 1
) -> float:
    """Monte-Carlo estimate: mean of log p(x) - log q(x) over tokens x drawn from the student."""
    vals = []
    for ctx, action in zip(state_dist.contexts, state_dist.actions):
        for j in range(len(action.tokens)):
            prefix = action.tokens[:j]
            p = student.token_dist(ctx, prefix)
            q = teacher.token_dist(ctx, prefix)
            for x in rng.choice(len(p), size=samples, p=p):
                vals.append(math.inf if q[x] == 0 else math.log(p[x]) - math.log(q[x]))
    return float(np.mean(vals)) if vals else math.nan


# ---------------------------------------------------------------------------
# failure taxonomy


def failure_taxonomy(trajectory: Trajectory, env: Environment) -> str:
    """Exactly one category from ``TAXONOMY`` for a complete trajectory."""
    if env.verify(trajectory) == 1:
        return "resolved"
    if trajectory.finished:
        return "submitted_wrong"
    contexts = trajectory.contexts
    if contexts is None:
        from .core import context_of

        contexts = [context_of(trajectory, t) for t in range(1, len(trajectory.turns) + 1)]
    counts = Counter((env.summary(ctx), turn.executed.tokens) for ctx, turn in zip(contexts, trajectory.turns))
    if counts and max(counts.values()) >= LOOP_REPEATS:
        return "no_submission_loop"
    return "no_submission_budget"


# ---------------------------------------------------------------------------
# slopes and bootstrap


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float], floor: float = 0.0) -> float:
    """OLS slope of log y against log x, with y clipped below at ``floor``."""
    x = np.log(np.asarray(xs, dtype=float))
    y = np.asarray(ys, dtype=float)
    if floor > 0:
        y = np.maximum(y, floor)
    if np.any(y <= 0):
        raise ValueError("log-log fit needs positive values; pass a floor")
    y = np.log(y)
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


def failure_floor(n_eval: int) -> float:
    """Half an evaluation instance: the resolution of an all-success measurement."""
    return 1.0 / (2 * n_eval)


def bootstrap_slope_win_rate(
    failures_a: dict[int, Sequence[float]],
    failures_b: dict[int, Sequence[float]],
    n_boot: int,
    rng: np.random.Generator,
    floor: float,
) -> float:
    """Fraction of resamples in which method A's log-log failure slope exceeds B's.

    Seeds are resampled with replacement independently per method; one index
    draw is shared by all horizons of a method so per-seed rows stay intact.
    """
    horizons = sorted(failures_a)
    if sorted(failures_b) != horizons:
        raise ValueError("both methods need the same horizons")
    A = np.array([failures_a[T] for T in horizons], dtype=float)  # (H, S)
    B = np.array([failures_b[T] for T in horizons], dtype=float)
    wins = 0
    for _ in range(n_boot):
        ia = rng.integers(0, A.shape[1], size=A.shape[1])
        ib = rng.integers(0, B.shape[1], size=B.shape[1])
        sa = fit_loglog_slope(horizons, A[:, ia].mean(axis=1), floor)
        sb = fit_loglog_slope(horizons, B[:, ib].mean(axis=1), floor)
        wins += sa > sb
    return wins / n_boot


# ---------------------------------------------------------------------------
# study output


@dataclass(frozen=True)
class StudyRow:
    study: str
    method: str
    horizon_or_budget: int
    seed: int
    failure_rate: float
    resolution_rate: float
    reverse_kl: float
    fitted_slope: float = math.nan

    def record(self) -> tuple[str, ...]:
        def f(x):
            return "nan" if math.isnan(x) else ("inf" if math.isinf(x) else f"{x:.12g}")

        return (
            self.study,
            self.method,
            str(self.horizon_or_budget),
            str(self.seed),
            f(self.failure_rate),
            f(self.resolution_rate),
            f(self.reverse_kl),
            f(self.fitted_slope),
        )


def write_study_csv(fh, rows: Sequence[StudyRow], header: str | None = None) -> None:
    if header:
        fh.write(header + "\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(STUDY_FIELDS)
    for r in rows:
        w.writerow(r.record())


def read_study_csv(fh) -> list[StudyRow]:
    lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(lines):
        out.append(
            StudyRow(
                rec["study"], rec["method"], int(rec["horizon_or_budget"]), int(rec["seed"]),
                float(rec["failure_rate"]), float(rec["resolution_rate"]), float(rec["reverse_kl"]),
                float(rec["fitted_slope"]),
            )
        )
    return out
