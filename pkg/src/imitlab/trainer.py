"""Outer training loop: schedules, per-method data pipelines, optimization, checkpoints.

Instance ids partition cleanly: iteration ``i`` trains on ids
``(i-1)*B .. i*B-1`` and held-out evaluation uses ids from ``HELDOUT_OFFSET``
upwards, so the two sets never meet.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, Schedule
from .core import Dataset, LabeledTransition, Trajectory, aggregate, write_trajectory_log
from .env import Environment, OracleTeacher, TaskSampler, substream
from .objectives import (
    WeightedExample,
    examples_from_transitions,
    unified_loss,
    weight_opd,
    weight_opd_tokens,
    weight_pg_group,
)
from .policy import GREEDY, PolicyParams, SamplingConfig, SoftmaxPolicy, init_params, save_params
from .rollout import BatchSummary, RegimeConfig, collect_batch, summarize_batch

HELDOUT_OFFSET = 10**9
KL_OFFSET = 2 * 10**9

# substream purposes (first key after the experiment seed)
INIT_STREAM = 10
SHUFFLE_STREAM = 11
KL_STREAM = 12

METRICS_FIELDS = (
    "iteration",
    "method",
    "beta_or_rho_summary",
    "n_collected",
    "n_retained",
    "mean_loss",
    "greedy_resolution_rate",
    "reverse_kl",
)


# ---------------------------------------------------------------------------
# schedules


def beta_schedule(i: int, schedule: Schedule = Schedule()) -> float:
    """max(beta_floor, beta_init - beta_step * (i - 1))."""
    if i < 1:
        raise ValueError(f"iteration index starts at 1, got {i}")
    return max(schedule.beta_floor, schedule.beta_init - schedule.beta_step * (i - 1))


def rho_schedule(i: int, T_max: int, schedule: Schedule = Schedule()) -> np.ndarray:
    """Uniform over {kappa_min(i), ..., K} as a vector indexed 0..T_max.

    K = min(rho_kappa_max, T_max) and kappa_min(i) = floor(K (i-1) / I), so the
    support's lower end rises with i while the upper end stays fixed.
    """
    if i < 1:
        raise ValueError(f"iteration index starts at 1, got {i}")
    K = min(schedule.rho_kappa_max, T_max)
    if schedule.rho_shift_mode == "fixed":
        lo = 0
    else:
        lo = min(K, (K * (i - 1)) // max(schedule.iterations, 1))
    rho = np.zeros(T_max + 1)
    rho[lo : K + 1] = 1.0 / (K + 1 - lo)
    return rho


def regime_for(config: ExperimentConfig, i: int) -> tuple[RegimeConfig, str]:
    """Collection regime of iteration ``i`` and a short text summary of it."""
    kind = config.method.kind
    if kind == "sft":
        return RegimeConfig("teacher"), "teacher"
    if kind == "dagger_turn":
        beta = beta_schedule(i, config.schedule)
        return RegimeConfig("turn", beta=beta), f"beta={beta:.6g}"
    if kind == "aggrevate_traj":
        rho = rho_schedule(i, config.env.T_max, config.schedule)
        support = np.flatnonzero(rho)
        return RegimeConfig("traj", rho=tuple(rho)), f"rho=U{{{support[0]}..{support[-1]}}}"
    return RegimeConfig("student"), "student"


# ---------------------------------------------------------------------------
# data pipeline


def retain(trajectories: Sequence[Trajectory], filter_mode: str) -> list[bool]:
    """Per-trajectory keep flags for a filter mode."""
    if filter_mode == "none":
        return [True] * len(trajectories)
    if filter_mode == "valid_submission":
        return [t.finished for t in trajectories]
    if filter_mode == "success_only":
        return [t.success == 1 for t in trajectories]
    raise ValueError(f"unknown filter mode {filter_mode!r}")


def _student_turns(traj: Trajectory):
    for t, turn in enumerate(traj.turns):
        yield traj.contexts[t], turn.executed


def build_examples(
    config: ExperimentConfig,
    trajectories: Sequence[Trajectory],
    keep: Sequence[bool],
    student: SoftmaxPolicy,
    teacher: OracleTeacher,
) -> list[WeightedExample]:
    """Weighted examples for the retained trajectories, per the method's weighting rule."""
    method = config.method
    kind = method.kind
    out: list[WeightedExample] = []
    if kind in ("sft", "dagger_turn", "aggrevate_traj"):
        transitions = [
            LabeledTransition(traj.contexts[t], turn.teacher_label)
            for traj, k in zip(trajectories, keep)
            if k
            for t, turn in enumerate(traj.turns)
        ]
        return examples_from_transitions(transitions)
    if kind == "opd":
        floor = method.opd_logprob_floor
        for traj, k in zip(trajectories, keep):
            if not k:
                continue
            for ctx, action in _student_turns(traj):
                if method.opd_token_level:
                    tw = weight_opd_tokens(student, teacher, ctx, action, floor)
                    out.append(WeightedExample(ctx, action, sum(tw), tw))
                else:
                    out.append(WeightedExample(ctx, action, weight_opd(student, teacher, ctx, action, floor)))
        return out
    # pg_grpo: trajectories arrive grouped, G consecutive replicas per instance
    G = config.schedule.group_size
    for g in range(0, len(trajectories), G):
        group = trajectories[g : g + G]
        adv = weight_pg_group([t.success for t in group])
        for traj, a, k in zip(group, adv, keep[g : g + G]):
            if not k:
                continue
            for ctx, action in _student_turns(traj):
                out.append(WeightedExample(ctx, action, a))
    return out


# ---------------------------------------------------------------------------
# state and reports


@dataclass
class TrainState:
    params: PolicyParams
    iteration: int = 0
    dataset: Dataset = field(default_factory=Dataset)
    examples: tuple[WeightedExample, ...] = ()
    example_provenance: tuple[int, ...] = ()
    velocity: dict | None = None
    samples_used: int = 0


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    method: str
    beta_or_rho_summary: str
    n_collected: int
    n_retained: int
    mean_loss: float
    greedy_resolution_rate: float
    reverse_kl: float
    skipped: bool = False
    n_kl_infinite: int = 0

    def record(self) -> tuple[str, ...]:
        return (
            str(self.iteration),
            self.method,
            self.beta_or_rho_summary,
            str(self.n_collected),
            str(self.n_retained),
            _fmt(self.mean_loss),
            _fmt(self.greedy_resolution_rate),
            _fmt(self.reverse_kl),
        )


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.12g}"


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Binds a config to an environment, a teacher, instance partitions and an optimizer."""

    def __init__(self, config: ExperimentConfig, seed: int | None = None, workers: int = 1):
        self.config = config
        self.seed = config.seed if seed is None else int(seed)
        self.workers = workers
        self.env: Environment = config.env.build()
        self.teacher = config.teacher(self.env)
        self.kl_teacher = config.kl_reference(self.env)
        self.sampler = TaskSampler(self.env, self.seed)
        self.sampling: SamplingConfig = config.policy.sampling
        ev = config.eval
        self.heldout = self.sampler.instances(range(HELDOUT_OFFSET, HELDOUT_OFFSET + ev.heldout_instances))
        self.kl_instances = self.sampler.instances(range(KL_OFFSET, KL_OFFSET + ev.kl_rollouts))

    def initial_params(self) -> PolicyParams:
        p = self.config.policy
        return init_params(self.env, p.mode, p.key_mode, p.init_scale, substream(self.seed, INIT_STREAM))

    def policy(self, params: PolicyParams) -> SoftmaxPolicy:
        return SoftmaxPolicy(params, self.env)

    def train_instances(self, i: int):
        B = self.config.schedule.batch_instances
        return self.sampler.instances(range((i - 1) * B, i * B))

    # -- evaluation -------------------------------------------------------

    def evaluate(self, params: PolicyParams, iteration: int) -> tuple[float, float, int]:
        from .metrics import reverse_kl_report, resolution_rate, sample_state_distribution

        student = self.policy(params)
        rate = resolution_rate(student, self.env, self.heldout) if self.heldout else math.nan
        if not self.kl_instances:
            return rate, math.nan, 0
        dist = sample_state_distribution(
            student, self.env, self.kl_instances, self.config.eval.kl_temperature, substream(self.seed, KL_STREAM, iteration)
        )
        rep = reverse_kl_report(student, self.kl_teacher, dist)
        return rate, rep.value, rep.n_infinite

    # -- one iteration -------------------------------------------------------

    def run_iteration(self, state: TrainState, budget_left: int | None = None):
        """Collect, filter, weight, update and evaluate; returns (state, report, trajectories, summary)."""
        cfg = self.config
        i = state.iteration + 1
        regime, summary_text = regime_for(cfg, i)
        student = self.policy(state.params)
        replicas = cfg.schedule.group_size if cfg.method.kind == "pg_grpo" else 1
        trajectories, _ = collect_batch(
            self.teacher, student, self.env, self.train_instances(i), regime, self.sampling,
            self.seed, replicas=replicas, workers=self.workers,
        )
        keep = retain(trajectories, cfg.method.resolved_filter)
        examples = build_examples(cfg, trajectories, keep, student, self.teacher)
        if budget_left is not None:
            examples = examples[: max(budget_left, 0)]
        n_collected = sum(len(t) for t in trajectories)
        n_retained = len(examples)
        batch_summary = summarize_batch(i, trajectories)

        if cfg.method.data_mode == "aggregate":
            train_examples = state.examples + tuple(examples)
            provenance = state.example_provenance + (i,) * len(examples)
        else:
            train_examples = tuple(examples)
            provenance = (i,) * len(examples)
        dataset = state.dataset
        if cfg.method.kind in ("sft", "dagger_turn", "aggrevate_traj"):
            fresh = [LabeledTransition(e.context, e.action) for e in examples]
            dataset = aggregate(dataset if cfg.method.data_mode == "aggregate" else Dataset(), fresh, i)

        new_state = dataclasses.replace(
            state, iteration=i, dataset=dataset, examples=train_examples,
            example_provenance=provenance, samples_used=state.samples_used + n_retained,
        )
        if not train_examples:
            new_state.examples = state.examples
            new_state.example_provenance = state.example_provenance
            rate, kl, n_inf = self._maybe_eval(state.params, i)
            report = IterationReport(i, cfg.method.kind, summary_text, n_collected, 0, math.nan, rate, kl, True, n_inf)
            return new_state, report, trajectories, batch_summary

        params, velocity, mean_loss = self.optimize(state.params, state.velocity, train_examples, i)
        new_state.params = params
        new_state.velocity = velocity
        rate, kl, n_inf = self._maybe_eval(params, i)
        report = IterationReport(i, cfg.method.kind, summary_text, n_collected, n_retained, mean_loss, rate, kl, False, n_inf)
        return new_state, report, trajectories, batch_summary

    def _maybe_eval(self, params: PolicyParams, i: int, last: bool = False):
        if self.config.eval.every_iteration or last:
            return self.evaluate(params, i)
        return math.nan, math.nan, 0

    def optimize(self, params: PolicyParams, velocity, examples: Sequence[WeightedExample], i: int):
        """Epochs of shuffled mini-batch ascent on the unified objective."""
        cfg = self.config
        opt = cfg.optimizer
        spec = cfg.method.spec
        reference = self.policy(self.initial_params()) if spec.regularizer_weight > 0 else None
        step = cfg.step_size
        losses = []
        n = len(examples)
        for epoch in range(cfg.schedule.epochs_per_batch):
            order = substream(self.seed, SHUFFLE_STREAM, i, epoch).permutation(n)
            for start in range(0, n, opt.minibatch_size):
                mb = [examples[k] for k in order[start : start + opt.minibatch_size]]
                objective, grad = unified_loss(self.policy(params), mb, spec, reference)
                losses.append(-objective)
                if opt.kind == "momentum":
                    velocity = dict(velocity or {})
                    for key, g in grad.items():
                        v = velocity.get(key)
                        velocity[key] = g.copy() if v is None else opt.momentum * v + g
                    grad = {k: velocity[k] for k in grad}
                params = params.apply(grad, step, opt.clip_logits)
        return params, velocity, float(np.mean(losses)) if losses else math.nan

    # -- full run -------------------------------------------------------

    def run(self, out_dir: str | Path | None = None, iterations: int | None = None) -> ExperimentResult:
        cfg = self.config
        budget = cfg.optimizer.sample_budget
        if iterations is None:
            iterations = cfg.optimizer.max_iterations if budget is not None else cfg.schedule.iterations
        state = TrainState(self.initial_params())
        rate0, kl0, n_inf0 = self.evaluate(state.params, 0)
        baseline = IterationReport(0, cfg.method.kind, "initial", 0, 0, math.nan, rate0, kl0, False, n_inf0)
        writer = _RunWriter(out_dir, cfg, self.seed) if out_dir is not None else None
        if writer:
            writer.report(baseline)
            writer.checkpoint(state.params, 0)
        history: list[IterationReport] = []
        try:
            for _ in range(iterations):
                left = None if budget is None else budget - state.samples_used
                if left is not None and left <= 0:
                    break
                state, report, trajectories, summary = self.run_iteration(state, left)
                history.append(report)
                if writer:
                    writer.report(report)
                    writer.trajectories(trajectories, state.iteration)
                    writer.batch(summary)
                    writer.checkpoint(state.params, state.iteration)
            if history and not cfg.eval.every_iteration:
                last = history[-1]
                rate, kl, n_inf = self.evaluate(state.params, last.iteration)
                history[-1] = dataclasses.replace(last, greedy_resolution_rate=rate, reverse_kl=kl, n_kl_infinite=n_inf)
        finally:
            if writer:
                writer.close(state.params)
        return ExperimentResult(baseline, history, state)


@dataclass
class ExperimentResult:
    baseline: IterationReport
    history: list[IterationReport]
    state: TrainState

    @property
    def params(self) -> PolicyParams:
        return self.state.params

    @property
    def final(self) -> IterationReport:
        return self.history[-1] if self.history else self.baseline


def header_line(config: ExperimentConfig, seed: int) -> str:
    return f"# imitlab {__version__} config={config.digest()} seed={seed}"


class _RunWriter:
    """Persists reports, trajectory logs, batch summaries and checkpoints as they are produced."""

    def __init__(self, out_dir, config: ExperimentConfig, seed: int):
        self.dir = Path(out_dir)
        (self.dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.config = config
        self.header = header_line(config, seed)
        self._metrics = open(self.dir / "metrics.csv", "w", newline="")
        self._metrics.write(self.header + "\n")
        self._metrics_csv = csv.writer(self._metrics, lineterminator="\n")
        self._metrics_csv.writerow(METRICS_FIELDS)
        self._traj = open(self.dir / "trajectories.tsv", "w")
        from .core import TRAJECTORY_LOG_FIELDS

        self._traj.write(self.header + "\n" + "\t".join(TRAJECTORY_LOG_FIELDS) + "\n")
        self._batches = open(self.dir / "batches.csv", "w", newline="")
        self._batches.write(self.header + "\n")
        self._batches_csv = csv.writer(self._batches, lineterminator="\n")
        self._batches_csv.writerow(BatchSummary.FIELDS)

    def report(self, report: IterationReport) -> None:
        self._metrics_csv.writerow(report.record())
        self._metrics.flush()

    def trajectories(self, trajectories, iteration: int) -> None:
        write_trajectory_log(self._traj, trajectories, self.config.experiment_id, iteration)
        self._traj.flush()

    def batch(self, summary: BatchSummary) -> None:
        self._batches_csv.writerow(summary.record())
        self._batches.flush()

    def checkpoint(self, params: PolicyParams, iteration: int) -> None:
        with open(self.dir / "checkpoints" / f"iter_{iteration:03d}.params", "w") as fh:
            save_params(params, fh)

    def close(self, params: PolicyParams) -> None:
        for fh in (self._metrics, self._traj, self._batches):
            fh.close()
        with open(self.dir / "final.params", "w") as fh:
            save_params(params, fh)


def run_experiment(
    config: ExperimentConfig, seed: int | None = None, out_dir: str | Path | None = None, workers: int = 1
) -> ExperimentResult:
    """Run ``schedule.iterations`` iterations (or until the sample budget is spent)."""
    return Trainer(config, seed, workers).run(out_dir)


def metrics_csv_text(result: ExperimentResult, config: ExperimentConfig, seed: int) -> str:
    buf = io.StringIO()
    buf.write(header_line(config, seed) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_FIELDS)
    for r in [result.baseline, *result.history]:
        w.writerow(r.record())
    return buf.getvalue()
