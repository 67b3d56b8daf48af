"""Domain types shared by every module: tasks, contexts, actions, trajectories, datasets.

Contexts are prefix nodes: each one points at its parent and adds a single
(action, observation) pair, so every context visited along a trajectory shares
storage with its prefixes. Equality and hashing are structural.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Iterator, Sequence

TRAJECTORY_LOG_FIELDS = (
    "experiment_id",
    "instance_id",
    "iteration",
    "turn_index",
    "indicator",
    "executed_tokens",
    "teacher_tokens",
    "observation",
    "success_flag_on_last_turn",
)


@dataclass(frozen=True)
class TaskInstance:
    id: int
    seed_prompt: int
    horizon_cap: int

    def __post_init__(self):
        if self.horizon_cap < 1:
            raise ValueError(f"horizon_cap must be >= 1, got {self.horizon_cap}")


@dataclass(frozen=True)
class ActionSeq:
    tokens: tuple[int, ...]
    is_finish: bool = False

    def __post_init__(self):
        if not isinstance(self.tokens, tuple):
            object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Observation:
    payload: tuple[Any, ...]

    def render(self) -> str:
        return ":".join(str(p) for p in self.payload)


@dataclass(frozen=True)
class ActionSpace:
    """Token-level action format of an environment."""

    vocab_size: int
    max_len: int
    finish_token: int
    eoa_token: int | None = None

    def make(self, tokens: Iterable[int]) -> ActionSeq:
        tokens = tuple(int(t) for t in tokens)
        if not tokens:
            raise ValueError("malformed action: empty token list")
        if len(tokens) > self.max_len:
            raise ValueError(f"action longer than max_len={self.max_len}: {tokens}")
        for t in tokens:
            if not 0 <= t < self.vocab_size:
                raise ValueError(f"token {t} outside vocabulary of size {self.vocab_size}")
        return ActionSeq(tokens, is_finish=tokens[0] == self.finish_token)

    def enumerate(self) -> list[ActionSeq]:
        """Every well-formed action, in lexicographic token order."""
        out: list[ActionSeq] = []

        def walk(prefix: list[int]):
            for t in range(self.vocab_size):
                nxt = prefix + [t]
                if self.is_complete(nxt):
                    out.append(self.make(nxt))
                else:
                    walk(nxt)

        walk([])
        return out

    def is_complete(self, prefix: Sequence[int]) -> bool:
        """True once a sampled prefix forms a whole action."""
        if len(prefix) >= self.max_len:
            return True
        return self.eoa_token is not None and len(prefix) > 0 and prefix[-1] == self.eoa_token


class Context:
    """Observable interaction history (x, a_1:t-1, o_1:t-1).

    ``state`` caches the environment state reached at this context; it is not
    part of equality.
    """

    __slots__ = ("instance", "parent", "action", "observation", "length", "state", "_history", "_hash")

    def __init__(
        self,
        instance: TaskInstance,
        parent: Context | None = None,
        action: ActionSeq | None = None,
        observation: Observation | None = None,
        state: Any = None,
    ):
        if (parent is None) != (action is None) or (action is None) != (observation is None):
            raise ValueError("a context extends its parent by a complete (action, observation) pair")
        if parent is not None and parent.instance != instance:
            raise ValueError("parent context belongs to a different instance")
        self.instance = instance
        self.parent = parent
        self.action = action
        self.observation = observation
        self.length = 0 if parent is None else parent.length + 1
        if self.length >= instance.horizon_cap:
            raise ValueError(f"history length {self.length} reaches horizon cap {instance.horizon_cap}")
        self.state = state
        self._history = None
        self._hash = None

    @classmethod
    def initial(cls, instance: TaskInstance, state: Any = None) -> Context:
        return cls(instance, state=state)

    def extend(self, action: ActionSeq, observation: Observation, state: Any = None) -> Context:
        return Context(self.instance, self, action, observation, state)

    @property
    def history(self) -> tuple[tuple[ActionSeq, Observation], ...]:
        if self._history is None:
            if self.parent is None:
                self._history = ()
            else:
                self._history = self.parent.history + ((self.action, self.observation),)
        return self._history

    def prefixes(self) -> list[Context]:
        """All contexts from the empty history up to and including this one."""
        out = []
        node: Context | None = self
        while node is not None:
            out.append(node)
            node = node.parent
        return out[::-1]

    def __eq__(self, other: object) -> bool:
        if self is other:
            return True
        if not isinstance(other, Context):
            return NotImplemented
        return self.instance == other.instance and self.history == other.history

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((self.instance, self.history))
        return self._hash

    def __repr__(self) -> str:
        return f"Context(instance={self.instance.id}, t={self.length + 1})"


@dataclass(frozen=True)
class Turn:
    indicator: int
    executed: ActionSeq
    teacher_label: ActionSeq | None  # None for unlabeled evaluation rollouts
    observation: Observation

    def __post_init__(self):
        if self.indicator not in (0, 1):
            raise ValueError(f"indicator must be 0 or 1, got {self.indicator}")
        if self.indicator == 1 and self.executed != self.teacher_label:
            raise ValueError("teacher-executed turn must reuse the teacher label")


@dataclass(frozen=True)
class Trajectory:
    instance: TaskInstance
    turns: tuple[Turn, ...]
    success: int
    # optional cache of visited contexts, len(turns) + 1 entries when filled
    contexts: tuple[Context, ...] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.turns, tuple):
            object.__setattr__(self, "turns", tuple(self.turns))
        if len(self.turns) > self.instance.horizon_cap:
            raise ValueError("trajectory longer than horizon cap")
        if self.success not in (0, 1):
            raise ValueError("success must be 0 or 1")

    def __len__(self) -> int:
        return len(self.turns)

    @property
    def finished(self) -> bool:
        return bool(self.turns) and self.turns[-1].executed.is_finish

    @property
    def complete(self) -> bool:
        return self.finished or len(self.turns) == self.instance.horizon_cap

    @property
    def indicators(self) -> tuple[int, ...]:
        return tuple(t.indicator for t in self.turns)


@dataclass(frozen=True)
class LabeledTransition:
    context: Context
    label: ActionSeq


@dataclass(frozen=True)
class Dataset:
    transitions: tuple[LabeledTransition, ...] = ()
    provenance: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.transitions) != len(self.provenance):
            raise ValueError("provenance length must equal transitions length")

    def __len__(self) -> int:
        return len(self.transitions)

    def __iter__(self) -> Iterator[LabeledTransition]:
        return iter(self.transitions)

    def from_iteration(self, iteration: int) -> list[LabeledTransition]:
        return [tr for tr, i in zip(self.transitions, self.provenance) if i == iteration]


def context_of(trajectory: Trajectory, t: int) -> Context:
    """Context at turn ``t`` (1-based): the prompt plus turns 1..t-1."""
    n = len(trajectory.turns)
    if not 1 <= t <= n + 1:
        raise IndexError(f"turn index {t} outside 1..{n + 1}")
    if t == trajectory.instance.horizon_cap + 1:
        raise IndexError("no context after the final turn of a budget-exhausted trajectory")
    cached = trajectory.contexts or ()
    if t <= len(cached):
        return cached[t - 1]
    if cached:
        ctx, done = cached[-1], len(cached)
    else:
        ctx, done = Context.initial(trajectory.instance), 1
    for turn in trajectory.turns[done - 1 : t - 1]:
        ctx = ctx.extend(turn.executed, turn.observation)
    return ctx


def batch_of(trajectory: Trajectory) -> list[LabeledTransition]:
    """Teacher-labeled pairs {(s_t, label_t)} for every visited state."""
    out = []
    ctx = Context.initial(trajectory.instance)
    for t, turn in enumerate(trajectory.turns, start=1):
        if turn.teacher_label is None:
            raise ValueError(f"missing teacher label at turn {t}")
        if trajectory.contexts is not None:
            ctx = trajectory.contexts[t - 1]
        out.append(LabeledTransition(ctx, turn.teacher_label))
        if t < len(trajectory.turns) and trajectory.contexts is None:
            ctx = ctx.extend(turn.executed, turn.observation)
    return out


def aggregate(existing: Dataset, fresh: Sequence[LabeledTransition], iteration: int) -> Dataset:
    return Dataset(
        existing.transitions + tuple(fresh),
        existing.provenance + (iteration,) * len(fresh),
    )


def _render_tokens(action: ActionSeq | None) -> str:
    return "" if action is None else ",".join(str(t) for t in action.tokens)


def trajectory_records(
    trajectory: Trajectory, experiment_id: str, iteration: int
) -> list[tuple[str, ...]]:
    """One record per turn, fields in ``TRAJECTORY_LOG_FIELDS`` order."""
    rows = []
    last = len(trajectory.turns)
    for t, turn in enumerate(trajectory.turns, start=1):
        rows.append(
            (
                str(experiment_id),
                str(trajectory.instance.id),
                str(iteration),
                str(t),
                str(turn.indicator),
                _render_tokens(turn.executed),
                _render_tokens(turn.teacher_label),
                turn.observation.render(),
                str(trajectory.success) if t == last else "",
            )
        )
    return rows


def write_trajectory_log(fh, trajectories: Iterable[Trajectory], experiment_id: str, iteration: int) -> None:
    for traj in trajectories:
        for row in trajectory_records(traj, experiment_id, iteration):
            fh.write("\t".join(row) + "\n")


def parse_trajectory_line(line: str) -> dict[str, Any]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != len(TRAJECTORY_LOG_FIELDS):
        raise ValueError(f"expected {len(TRAJECTORY_LOG_FIELDS)} fields, got {len(parts)}")
    rec: dict[str, Any] = dict(zip(TRAJECTORY_LOG_FIELDS, parts))
    for key in ("instance_id", "iteration", "turn_index", "indicator"):
        rec[key] = int(rec[key])
    for key in ("executed_tokens", "teacher_tokens"):
        rec[key] = tuple(int(t) for t in rec[key].split(",")) if rec[key] else None
    flag = rec["success_flag_on_last_turn"]
    rec["success_flag_on_last_turn"] = int(flag) if flag else None
    return rec
