"""Weighted-likelihood objective shared by SFT, policy gradient, OPD and the mixture methods.

Every method builds a list of ``WeightedExample`` (context, action, weight) and
maximizes ``(1/N) sum_k w_k log pi(a_k | s_k) - lam * Omega``. Contexts,
actions and weights are frozen data; gradients flow through ``log pi`` and the
regularizer only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ActionSeq, ActionSpace, Context, LabeledTransition, Observation, TaskInstance
from .policy import Grad, SoftmaxPolicy, grad_add

METHOD_KINDS = ("sft", "pg_grpo", "opd", "dagger_turn", "aggrevate_traj")
REGULARIZERS = ("none", "kl_to_reference")

# context source, label source, weight
METHOD_TABLE = {
    "sft": ("teacher", "teacher", "one"),
    "pg_grpo": ("student", "student", "group_advantage"),
    "opd": ("student", "student", "log_ratio"),
    "dagger_turn": ("turn_mixture", "teacher", "one"),
    "aggrevate_traj": ("prefix_mixture", "teacher", "one"),
}


class PackingError(ValueError):
    pass


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    regularizer_weight: float = 0.0
    regularizer: str = "none"
    opd_token_level: bool = False
    # stands in for log 0 when the teacher gives a student action no mass
    opd_logprob_floor: float = -20.0

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.regularizer_weight < 0:
            raise ValueError("regularizer weight must be >= 0")
        if self.regularizer_weight == 0 and self.regularizer != "none":
            raise ValueError("regularizer weight 0 requires regularizer 'none'")
        if self.regularizer_weight > 0 and self.regularizer == "none":
            raise ValueError("positive regularizer weight needs a regularizer kind")

    @property
    def uses_teacher_labels(self) -> bool:
        return METHOD_TABLE[self.kind][1] == "teacher"


@dataclass(frozen=True)
class WeightedExample:
    context: Context
    action: ActionSeq
    weight: float
    token_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not math.isfinite(self.weight):
            raise ValueError("example weight must be finite")
        if self.token_weights is not None:
            if len(self.token_weights) != len(self.action.tokens):
                raise ValueError("one token weight per action token")
            if not all(math.isfinite(w) for w in self.token_weights):
                raise ValueError("token weights must be finite")


# ---------------------------------------------------------------------------
# cross-entropy


def ce_loss(policy: SoftmaxPolicy, transition: LabeledTransition) -> tuple[float, Grad]:
    """Token-level cross-entropy of the teacher label and its gradient."""
    g = policy.grad_logprob(transition.context, transition.label)
    return -policy.logprob(transition.context, transition.label), {k: -v for k, v in g.items()}


# ---------------------------------------------------------------------------
# shared-prefix packing


@dataclass(frozen=True)
class PackedSequence:
    """Flat stream of ("tok", id) / ("obs", payload) items after an instance prompt.

    ``loss_mask[i]`` marks label tokens; ``segments`` holds (start, end,
    transition index) for each masked span.
    """

    instance: TaskInstance
    space: ActionSpace
    stream: tuple[tuple[str, object], ...]
    loss_mask: tuple[bool, ...]
    segments: tuple[tuple[int, int, int], ...]

    @property
    def n_masked(self) -> int:
        return sum(self.loss_mask)

    def _walk(self):
        """Yield (context, label, transition index) per segment, rebuilding contexts in one pass."""
        ctx = Context.initial(self.instance)
        spans = {start: (end, idx) for start, end, idx in self.segments}
        i, n = 0, len(self.stream)
        while i < n:
            j = i
            while j < n and self.stream[j][0] == "tok":
                j += 1
            action = self.space.make(v for _, v in self.stream[i:j])
            if i in spans:
                end, idx = spans[i]
                if end != j:
                    raise PackingError("masked span does not cover a whole action")
                yield ctx, action, idx
            if j < n:
                ctx = ctx.extend(action, Observation(self.stream[j][1]))
            i = j + 1

    def unpack(self) -> list[tuple[int, LabeledTransition]]:
        return [(idx, LabeledTransition(ctx, label)) for ctx, label, idx in self._walk()]


def _render_history(ctx: Context) -> list[tuple[str, object]]:
    out: list[tuple[str, object]] = []
    for action, obs in ctx.history:
        out.extend(("tok", t) for t in action.tokens)
        out.append(("obs", obs.payload))
    return out


def pack_chain(transitions: Sequence[LabeledTransition], space: ActionSpace, indices: Sequence[int] | None = None) -> PackedSequence:
    """Pack a chain where each context extends the previous one by (label, observation)."""
    if not transitions:
        raise PackingError("empty chain")
    indices = list(range(len(transitions))) if indices is None else list(indices)
    first = transitions[0].context
    stream = _render_history(first)
    mask = [False] * len(stream)
    segments = []
    for k, tr in enumerate(transitions):
        if k > 0:
            prev = transitions[k - 1]
            c = tr.context
            if c.parent is None or c.parent != prev.context or c.action != prev.label:
                raise PackingError(f"transition {indices[k]} does not extend its predecessor's context")
            stream.append(("obs", c.observation.payload))
            mask.append(False)
        start = len(stream)
        stream.extend(("tok", t) for t in tr.label.tokens)
        mask.extend([True] * len(tr.label.tokens))
        segments.append((start, len(stream), indices[k]))
    return PackedSequence(first.instance, space, tuple(stream), tuple(mask), tuple(segments))


def pack_shared_prefix(transitions: Sequence[LabeledTransition], space: ActionSpace) -> list[PackedSequence]:
    """Group transitions into longest chains and pack each chain into one masked sequence.

    A transition joins the chain whose last context, extended by that
    transition's label, is its own context. Chains keep input order.
    """
    chains: list[list[int]] = []
    tails: dict[tuple[Context, ActionSeq], int] = {}
    for i, tr in enumerate(transitions):
        c = tr.context
        slot = tails.pop((c.parent, c.action), None) if c.parent is not None else None
        if slot is None:
            slot = len(chains)
            chains.append([])
        chains[slot].append(i)
        tails[(c, tr.label)] = slot
    return [pack_chain([transitions[i] for i in chain], space, chain) for chain in chains]


def packed_loss(policy: SoftmaxPolicy, packed: Sequence[PackedSequence]) -> tuple[float, Grad]:
    """Summed masked cross-entropy over packed sequences and its gradient."""
    total = 0.0
    grad: Grad = {}
    for seq in packed:
        for ctx, label, _ in seq._walk():
            total -= policy.logprob(ctx, label)
            grad_add(grad, policy.grad_logprob(ctx, label), -1.0)
    return total, grad


# ---------------------------------------------------------------------------
# weights


def weight_sft(example=None) -> float:
    return 1.0


def weight_opd(student: SoftmaxPolicy, teacher, context: Context, action: ActionSeq, floor: float | None = None) -> float:
    """log pi_e(a|s) - log pi_theta(a|s); ``floor`` replaces a -inf teacher log-probability."""
    lt = teacher.logprob(context, action)
    if floor is not None and lt < floor:
        lt = floor
    return lt - student.logprob(context, action)


def weight_opd_tokens(student: SoftmaxPolicy, teacher, context: Context, action: ActionSeq, floor: float | None = None) -> tuple[float, ...]:
    """Per-token log-ratio weights log pi_e(a_j|s,a_<j) - log pi_theta(a_j|s,a_<j)."""
    ls = student.token_logprobs(context, action)
    out = []
    for j, tok in enumerate(action.tokens):
        q = teacher.token_dist(context, action.tokens[:j])[tok]
        lt = math.log(q) if q > 0 else -math.inf
        if floor is not None and lt < floor:
            lt = floor
        out.append(lt - ls[j])
    return tuple(out)


def weight_pg_group(rewards: Sequence[float]) -> list[float]:
    """Group-normalized advantages (r - mean) / std with population std; zeros if std is 0."""
    r = np.asarray(rewards, dtype=float)
    if len(r) < 2:
        raise ValueError("group size must be at least 2")
    std = r.std()
    if std == 0.0:
        return [0.0] * len(r)
    return ((r - r.mean()) / std).tolist()


# ---------------------------------------------------------------------------
# unified objective


def unified_loss(
    policy: SoftmaxPolicy,
    examples: Sequence[WeightedExample],
    method: MethodSpec,
    reference: SoftmaxPolicy | None = None,
) -> tuple[float, Grad]:
    """Objective (to maximize) and its exact gradient.

    Omega for ``kl_to_reference`` is the mean over example contexts of the
    per-position KL(pi(.|s) || ref(.|s)) summed over token positions.
    """
    lam = method.regularizer_weight
    if lam > 0 and reference is None:
        raise ValueError("kl_to_reference regularizer needs reference params")
    n = len(examples)
    if n == 0:
        return 0.0, {}
    objective = 0.0
    grad: Grad = {}
    for ex in examples:
        if ex.token_weights is None:
            if ex.weight != 0.0:
                objective += ex.weight * policy.logprob(ex.context, ex.action)
                grad_add(grad, policy.grad_logprob(ex.context, ex.action), ex.weight)
        else:
            lps = policy.token_logprobs(ex.context, ex.action)
            objective += sum(w * lp for w, lp in zip(ex.token_weights, lps))
            grad_add(grad, policy.grad_logprob(ex.context, ex.action, ex.token_weights))
        if lam > 0:
            kl, d = policy.position_kl(ex.context, reference)
            objective -= lam * kl
            grad_add(grad, policy._chain(ex.context, d), -lam)
    for v in grad.values():
        v /= n
    return objective / n, grad


def examples_from_transitions(transitions: Sequence[LabeledTransition]) -> list[WeightedExample]:
    """Teacher-labeled transitions with unit weight (SFT and both mixture methods)."""
    return [WeightedExample(tr.context, tr.label, weight_sft(tr)) for tr in transitions]
