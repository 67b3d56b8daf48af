"""Token-factorized softmax policies with exact log-probabilities and gradients.

Logits at token position ``j`` of an action depend on the context (through a
table key or a feature vector) and on ``j``, not on the earlier tokens of the
same action. Gradients are plain dicts mapping a parameter block to an array:
table keys to ``(M, V)`` rows in tabular mode, ``"W"`` to the ``(M, F, V)``
weight tensor in linear mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Hashable, Iterable

import numpy as np

from .core import ActionSeq, ActionSpace, Context

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = "imitlab-params"

Grad = dict


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    nucleus_mass: float = 1.0
    greedy: bool = False

    def __post_init__(self):
        if not self.greedy and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.nucleus_mass <= 1:
            raise ValueError("nucleus_mass must be in (0, 1]")


GREEDY = SamplingConfig(greedy=True)
ROLLOUT = SamplingConfig(temperature=0.7, nucleus_mass=0.9)


@dataclass
class PolicyParams:
    mode: str
    vocab_size: int
    max_len: int
    key_mode: str = "summary"
    table: dict[Hashable, np.ndarray] = field(default_factory=dict)
    default_row: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("tabular", "linear"):
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if self.key_mode not in ("summary", "history"):
            raise ValueError(f"unknown key mode {self.key_mode!r}")
        if self.mode == "linear" and self.weights is None:
            raise ValueError("linear mode needs a weight tensor")

    def row(self, key: Hashable) -> np.ndarray:
        r = self.table.get(key)
        if r is None:
            if self.default_row is None:
                raise KeyError(f"context key {key!r} not in table and no default row")
            return self.default_row
        return r

    def copy(self) -> PolicyParams:
        return replace(
            self,
            table={k: v.copy() for k, v in self.table.items()},
            default_row=None if self.default_row is None else self.default_row.copy(),
            weights=None if self.weights is None else self.weights.copy(),
        )

    def apply(self, grad: Grad, step: float, clip: float | None = 30.0) -> PolicyParams:
        """New params moved by ``step * grad``; untouched rows are shared."""
        if self.mode == "linear":
            w = self.weights + step * grad.get("W", 0.0)
            if clip is not None:
                np.clip(w, -clip, clip, out=w)
            return replace(self, weights=w)
        table = dict(self.table)
        for key, g in grad.items():
            r = self.row(key) + step * g
            if clip is not None:
                np.clip(r, -clip, clip, out=r)
            table[key] = r
        return replace(self, table=table)


def init_params(env, mode: str = "tabular", key_mode: str = "summary", scale: float = 0.0, rng=None) -> PolicyParams:
    """Zero (or small random) logits; tabular rows for env-declared priors."""
    V, M = env.action_space.vocab_size, env.action_space.max_len
    if mode == "tabular":
        table = {k: np.array(v, dtype=float) for k, v in env.prior_table().items()} if key_mode == "summary" else {}
        return PolicyParams("tabular", V, M, key_mode, table=table, default_row=np.zeros((M, V)))
    F = env.n_features
    w = np.zeros((M, F, V)) if scale == 0 else scale * rng.standard_normal((M, F, V))
    return PolicyParams("linear", V, M, key_mode, weights=w)


def _history_key(context: Context) -> Hashable:
    return (context.instance.seed_prompt,) + tuple((a.tokens, o.payload) for a, o in context.history)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max()
    return s - np.log(np.exp(s).sum())


class SoftmaxPolicy:
    """Student policy: parameters plus the environment's featurizer."""

    def __init__(self, params: PolicyParams, env):
        self.params = params
        self.env = env
        self.space: ActionSpace = env.action_space
        if (params.vocab_size, params.max_len) != (self.space.vocab_size, self.space.max_len):
            raise ValueError("params shape does not match the environment's action space")

    def with_params(self, params: PolicyParams) -> SoftmaxPolicy:
        return SoftmaxPolicy(params, self.env)

    def context_key(self, context: Context) -> Hashable:
        if self.params.key_mode == "history":
            return _history_key(context)
        return self.env.summary(context)

    def logits(self, context: Context, position: int) -> np.ndarray:
        p = self.params
        if p.mode == "tabular":
            return p.row(self.context_key(context))[position]
        return self.env.features(context) @ p.weights[position]

    def _all_logits(self, context: Context) -> np.ndarray:
        p = self.params
        if p.mode == "tabular":
            return p.row(self.context_key(context))
        phi = self.env.features(context)
        return np.einsum("f,mfv->mv", phi, p.weights)

    def token_dist(self, context: Context, prefix=()) -> np.ndarray:
        if len(prefix) >= self.space.max_len:
            raise ValueError("prefix already fills the maximum action length")
        return softmax(self.logits(context, len(prefix)))

    def sample_action(self, context: Context, sampling: SamplingConfig, rng: np.random.Generator) -> ActionSeq:
        rows = self._all_logits(context)
        tokens: list[int] = []
        while True:
            z = rows[len(tokens)]
            if sampling.greedy:
                tok = int(np.argmax(z))  # first maximum: ties go to the lowest id
            else:
                tok = _sample_token(z, sampling, rng)
            tokens.append(tok)
            if self.space.is_complete(tokens):
                return self.space.make(tokens)

    def logprob(self, context: Context, action: ActionSeq) -> float:
        rows = self._all_logits(context)
        return float(sum(log_softmax(rows[j])[t] for j, t in enumerate(action.tokens)))

    def token_logprobs(self, context: Context, action: ActionSeq) -> list[float]:
        rows = self._all_logits(context)
        return [float(log_softmax(rows[j])[t]) for j, t in enumerate(action.tokens)]

    def grad_logprob(self, context: Context, action: ActionSeq, token_weights=None) -> Grad:
        """Exact gradient of sum_j w_j log pi(a_j | s, j) (w_j = 1 by default)."""
        rows = self._all_logits(context)
        d = np.zeros_like(rows)
        for j, t in enumerate(action.tokens):
            w = 1.0 if token_weights is None else token_weights[j]
            g = -softmax(rows[j])
            g[t] += 1.0
            d[j] += w * g
        return self._chain(context, d)

    def _chain(self, context: Context, d_logits: np.ndarray) -> Grad:
        """Map a gradient w.r.t. the (M, V) logit block of ``context`` onto parameters."""
        if self.params.mode == "tabular":
            return {self.context_key(context): d_logits}
        phi = self.env.features(context)
        return {"W": np.einsum("f,mv->mfv", phi, d_logits)}

    def action_distribution(self, context: Context, sampling: SamplingConfig | None = None) -> list[tuple[ActionSeq, float]]:
        """Every complete action with its probability (full distribution unless ``sampling`` given)."""
        rows = self._all_logits(context)
        out: list[tuple[ActionSeq, float]] = []
        dists = [_sampling_dist(rows[j], sampling) for j in range(self.space.max_len)]

        def walk(prefix: list[int], prob: float):
            probs = dists[len(prefix)]
            for tok in range(self.space.vocab_size):
                q = prob * probs[tok]
                if q == 0.0:
                    continue
                nxt = prefix + [tok]
                if self.space.is_complete(nxt):
                    out.append((self.space.make(nxt), q))
                else:
                    walk(nxt, q)

        walk([], 1.0)
        return out

    def position_kl(self, context: Context, reference: SoftmaxPolicy) -> tuple[float, np.ndarray]:
        """Sum over positions of KL(pi(.|s,j) || ref(.|s,j)) and its logit gradient."""
        rows = self._all_logits(context)
        ref_rows = reference._all_logits(context)
        total = 0.0
        d = np.zeros_like(rows)
        for j in range(self.space.max_len):
            lp = log_softmax(rows[j])
            lq = log_softmax(ref_rows[j])
            p = np.exp(lp)
            diff = lp - lq
            kl = float(p @ diff)
            total += kl
            d[j] = p * (diff - kl)
        return total, d


def _sampling_dist(z: np.ndarray, sampling: SamplingConfig | None) -> np.ndarray:
    if sampling is None:
        return softmax(z)
    if sampling.greedy:
        out = np.zeros_like(z)
        out[int(np.argmax(z))] = 1.0
        return out
    p = softmax(z / sampling.temperature)
    if sampling.nucleus_mass < 1.0:
        p = _nucleus(p, sampling.nucleus_mass)
    return p


def _nucleus(p: np.ndarray, mass: float) -> np.ndarray:
    order = np.argsort(-p, kind="stable")
    csum = np.cumsum(p[order])
    keep = int(np.searchsorted(csum, mass - 1e-12)) + 1
    out = np.zeros_like(p)
    idx = order[:keep]
    out[idx] = p[idx]
    return out / out.sum()


def _sample_token(z: np.ndarray, sampling: SamplingConfig, rng: np.random.Generator) -> int:
    p = _sampling_dist(z, sampling)
    cdf = np.cumsum(p)
    tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    if tok >= len(p):  # rounding at the top end
        tok = int(np.flatnonzero(p)[-1])
    return tok


# module-level forms of the policy operations


def token_dist(policy: SoftmaxPolicy, context: Context, prefix=()) -> np.ndarray:
    return policy.token_dist(context, prefix)


def sample_action(policy: SoftmaxPolicy, context: Context, sampling: SamplingConfig, rng) -> ActionSeq:
    return policy.sample_action(context, sampling, rng)


def logprob(policy: SoftmaxPolicy, context: Context, action: ActionSeq) -> float:
    return policy.logprob(context, action)


def grad_logprob(policy: SoftmaxPolicy, context: Context, action: ActionSeq) -> Grad:
    return policy.grad_logprob(context, action)


# ---------------------------------------------------------------------------
# gradient containers


def grad_add(acc: Grad, g: Grad, scale: float = 1.0) -> Grad:
    """In-place ``acc += scale * g``; returns ``acc``."""
    for k, v in g.items():
        cur = acc.get(k)
        if cur is None:
            acc[k] = scale * v if scale != 1.0 else v.copy()
        else:
            cur += scale * v
    return acc


def grad_scale(g: Grad, scale: float) -> Grad:
    return {k: scale * v for k, v in g.items()}


def grad_max_abs(g: Grad) -> float:
    return max((float(np.abs(v).max()) for v in g.values()), default=0.0)


def grad_allclose(a: Grad, b: Grad, rtol: float, atol: float = 0.0) -> bool:
    """Coordinate-wise |a - b| <= atol + rtol * max(|a|, |b|); missing blocks count as zeros."""
    for k in set(a) | set(b):
        x = a.get(k)
        y = b.get(k)
        x = np.zeros_like(y) if x is None else x
        y = np.zeros_like(x) if y is None else y
        if np.any(np.abs(x - y) > atol + rtol * np.maximum(np.abs(x), np.abs(y))):
            return False
    return True


# ---------------------------------------------------------------------------
# checkpoints


def _key_to_json(key) -> str:
    return json.dumps(key, separators=(",", ":"))


def _json_to_key(text: str):
    def tup(x):
        return tuple(tup(i) for i in x) if isinstance(x, list) else x

    return tup(json.loads(text))


def save_params(params: PolicyParams, fh) -> None:
    """Text table of (key, position, token, logit) records under a version header.

    Floats use ``repr`` so a reload is bit-exact. Linear weights use the
    feature index as the key.
    """
    fh.write(
        f"# {CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} mode={params.mode} vocab={params.vocab_size} "
        f"max_len={params.max_len} key_mode={params.key_mode}\n"
    )
    if params.mode == "tabular":
        if params.default_row is not None:
            _write_block(fh, "default", params.default_row)
        for text, key in sorted((_key_to_json(k), k) for k in params.table):
            _write_block(fh, text, params.table[key])
    else:
        M, F, V = params.weights.shape
        fh.write(f"# features={F}\n")
        for f in range(F):
            _write_block(fh, str(f), params.weights[:, f, :])


def _write_block(fh, key_text: str, block: np.ndarray) -> None:
    for j in range(block.shape[0]):
        for t in range(block.shape[1]):
            fh.write(f"{key_text}\t{j}\t{t}\t{float(block[j, t])!r}\n")


def load_params(fh) -> PolicyParams:
    header = fh.readline().split()
    if len(header) < 3 or header[0] != "#" or header[1] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a parameter checkpoint")
    if header[2] != f"v{CHECKPOINT_VERSION}":
        raise CheckpointError(f"checkpoint version {header[2]} not supported (expected v{CHECKPOINT_VERSION})")
    try:
        meta = dict(item.split("=", 1) for item in header[3:])
        mode, V, M, key_mode = meta["mode"], int(meta["vocab"]), int(meta["max_len"]), meta["key_mode"]
        blocks: dict[str, np.ndarray] = {}
        n_features = None
        for line in fh:
            if line.startswith("# features="):
                n_features = int(line.split("=", 1)[1])
                continue
            key_text, j, t, val = line.rstrip("\n").split("\t")
            block = blocks.setdefault(key_text, np.full((M, V), np.nan))
            block[int(j), int(t)] = float(val)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    if any(np.isnan(b).any() for b in blocks.values()):
        raise CheckpointError("corrupt checkpoint: incomplete parameter block")
    if mode == "tabular":
        default = blocks.pop("default", None)
        table = {_json_to_key(k): v for k, v in blocks.items()}
        return PolicyParams("tabular", V, M, key_mode, table=table, default_row=default)
    if n_features is None or len(blocks) != n_features:
        raise CheckpointError("corrupt checkpoint: missing linear feature blocks")
    w = np.stack([blocks[str(f)] for f in range(n_features)], axis=1)
    return PolicyParams("linear", V, M, key_mode, weights=w)
