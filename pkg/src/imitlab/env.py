"""Synthetic multi-turn environments, verifier, task sampler, oracle teacher.

Both environments are deterministic given the action sequence; ``step`` accepts
an rng only to keep the contract uniform. States carry the instance's seed
prompt, so ``step(state, action)`` needs nothing else.

ChainRepair
    Walk a chain of ``chain_length`` positions. Each on-track state shows a cue;
    the correct move among ``K`` move tokens is a fixed function of the cue. A
    wrong move pushes the agent off track (depth 1..D) and only the recovery
    token brings it back, one level per turn. Returning to depth 0 re-draws the
    cue for the same position. Cues are displayed modulo ``visible_cues``; when
    ``visible_cues < cue_count`` some cues alias, so a student keyed on what it
    sees cannot be error-free. The teacher sees the true state.

    tokens: 0..K-1 moves, K recover, K+1 finish; one token per action.

TokenEdit
    Apply a target program of (verb, argument) pairs in order. A matching pair
    advances the edit cursor, anything else sets a dirty flag that only the
    revert action clears.

    tokens: 0 end-of-action, 1 finish, 2 revert, 3..V-1 symbols.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Hashable, NamedTuple

import numpy as np

from .core import ActionSeq, ActionSpace, Context, Observation, TaskInstance, Trajectory


class EnvError(Exception):
    pass


class StateSpaceTooLarge(EnvError):
    pass


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, *keys); keys must be non-negative ints."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys)))


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class ChainRepairSpec:
    T_max: int
    K: int = 4
    D: int = 2
    recovery_visible_to_student: bool = False
    chain_length: int | None = None  # default: max(1, T_max // 2)
    cue_count: int = 16
    visible_cues: int | None = None  # default: cue_count
    env_seed: int = 0
    recovery_prior: float = 3.0  # logit bonus on recovery when recovery is visible

    def __post_init__(self):
        if self.T_max < 1 or self.K < 2 or self.D < 1:
            raise ValueError("ChainRepair needs T_max >= 1, K >= 2, D >= 1")
        if self.chain_length is None:
            object.__setattr__(self, "chain_length", max(1, self.T_max // 2))
        if self.chain_length < 1:
            raise ValueError(f"chain_length must be positive, got {self.chain_length}")
        if self.visible_cues is None:
            object.__setattr__(self, "visible_cues", self.cue_count)
        if not 1 <= self.visible_cues <= self.cue_count:
            raise ValueError("visible_cues must be in 1..cue_count")


@dataclass(frozen=True)
class TokenEditSpec:
    T_max: int
    V: int = 8
    M: int = 3
    program_length: int = 3
    n_prompts: int = 4
    env_seed: int = 0

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("TokenEdit needs M >= 2")
        if self.V < max(self.M, 5):
            raise ValueError("TokenEdit needs V >= M and at least two symbol tokens (V >= 5)")
        if not 1 <= self.program_length <= self.T_max:
            raise ValueError("program length must be in 1..T_max")
        if self.n_prompts < 1:
            raise ValueError("n_prompts must be positive")


# ---------------------------------------------------------------------------
# environments


class Environment:
    spec: Any
    action_space: ActionSpace

    @property
    def horizon(self) -> int:
        return self.spec.T_max

    def reset(self, instance: TaskInstance) -> tuple[Any, Context]:
        self.check_instance(instance)
        state = self.initial_state(instance)
        return state, Context.initial(instance, state=state)

    def check_instance(self, instance: TaskInstance) -> None:
        if instance.horizon_cap != self.spec.T_max:
            raise EnvError(f"instance {instance.id} has horizon {instance.horizon_cap}, env expects {self.spec.T_max}")

    def state_of(self, context: Context) -> Any:
        """State reached at ``context``; replays the history when not cached."""
        if context.state is not None:
            return context.state
        state = self.initial_state(context.instance)
        for action, _ in context.history:
            _, state = self.step(state, action)
        context.state = state
        return state

    def verify(self, trajectory: Trajectory) -> int:
        """1 iff the replayed final state meets the goal and finish was emitted."""
        if not trajectory.complete:
            raise EnvError("cannot verify an incomplete trajectory")
        state = self.initial_state(trajectory.instance)
        for turn in trajectory.turns:
            _, state = self.step(state, turn.executed)
        return self.judge(state, trajectory.finished)

    def prior_table(self) -> dict[Hashable, np.ndarray]:
        return {}

    def summary_of_state(self, state) -> Hashable:
        raise NotImplementedError


class ChainState(NamedTuple):
    prompt: int
    position: int
    depth: int
    attempt: int


class ChainRepair(Environment):
    def __init__(self, spec: ChainRepairSpec):
        self.spec = spec
        self.recover_token = spec.K
        self.finish_token = spec.K + 1
        self.action_space = ActionSpace(vocab_size=spec.K + 2, max_len=1, finish_token=self.finish_token)
        # correct move per true cue, shared by every instance of this env
        self.cue_to_move = substream(spec.env_seed, 1).integers(0, spec.K, size=spec.cue_count).tolist()
        self._cue_tables: dict[int, list[list[int]]] = {}
        self._actions = [ActionSeq((t,), t == self.finish_token) for t in range(spec.K + 2)]

    def __getstate__(self):
        d = dict(self.__dict__)
        d["_cue_tables"] = {}
        return d

    def cue_table(self, prompt: int) -> list[list[int]]:
        """cue[position][attempt], drawn from substream(env_seed, 2, prompt)."""
        table = self._cue_tables.get(prompt)
        if table is None:
            s = self.spec
            rng = substream(s.env_seed, 2, prompt)
            table = rng.integers(0, s.cue_count, size=(s.chain_length, s.T_max + 1)).tolist()
            self._cue_tables[prompt] = table
        return table

    def initial_state(self, instance: TaskInstance) -> ChainState:
        return ChainState(instance.seed_prompt, 0, 0, 0)

    def observe(self, state: ChainState) -> Observation:
        if state.depth > 0:
            return Observation(("err", state.depth))
        if state.position == self.spec.chain_length:
            return Observation(("goal",))
        cue = self.cue_table(state.prompt)[state.position][state.attempt]
        return Observation(("ok", cue % self.spec.visible_cues))

    def correct_move(self, state: ChainState) -> int:
        return self.cue_to_move[self.cue_table(state.prompt)[state.position][state.attempt]]

    def step(self, state: ChainState, action: ActionSeq, rng=None) -> tuple[Observation, ChainState]:
        if not action.tokens:
            raise EnvError("malformed action: empty token list")
        tok = action.tokens[0]
        if not 0 <= tok < self.action_space.vocab_size:
            raise EnvError(f"token {tok} outside vocabulary")
        prompt, pos, depth, attempt = state
        if tok == self.finish_token:
            return Observation(("done",)), state
        if depth > 0:
            if tok == self.recover_token:
                new = ChainState(prompt, pos, depth - 1, attempt + 1 if depth == 1 else attempt)
            else:
                new = ChainState(prompt, pos, min(self.spec.D, depth + 1), attempt)
        elif tok == self.recover_token:
            new = state
        elif pos < self.spec.chain_length and tok == self.correct_move(state):
            new = ChainState(prompt, pos + 1, 0, attempt)
        else:
            new = ChainState(prompt, pos, 1, attempt)
        return self.observe(new), new

    def judge(self, state: ChainState, finished: bool) -> int:
        return int(finished and state.depth == 0 and state.position == self.spec.chain_length)

    def optimal_action(self, state: ChainState) -> ActionSeq:
        if state.depth > 0:
            return self._actions[self.recover_token]
        if state.position == self.spec.chain_length:
            return self._actions[self.finish_token]
        return self._actions[self.correct_move(state)]

    def all_actions(self) -> list[ActionSeq]:
        return list(self._actions)

    def summary(self, context: Context) -> Hashable:
        """What the agent sees now: the latest observation (the prompt's cue at t=1)."""
        if context.observation is not None:
            return context.observation.payload
        return self.observe(self.initial_state(context.instance)).payload

    @property
    def n_features(self) -> int:
        return 1 + 3 + self.spec.visible_cues + self.spec.D

    def features(self, context: Context) -> np.ndarray:
        key = self.summary(context)
        phi = np.zeros(self.n_features)
        phi[0] = 1.0
        if key[0] == "ok":
            phi[1] = 1.0
            phi[4 + key[1]] = 1.0
        elif key[0] == "goal":
            phi[2] = 1.0
        else:
            phi[3] = 1.0
            phi[4 + self.spec.visible_cues + key[1] - 1] = 1.0
        return phi

    @property
    def observation_alphabet(self) -> set:
        s = self.spec
        alpha = {("goal",), ("done",)}
        alpha |= {("ok", c) for c in range(s.visible_cues)}
        alpha |= {("err", d) for d in range(1, s.D + 1)}
        return alpha

    def prior_table(self) -> dict[Hashable, np.ndarray]:
        if not self.spec.recovery_visible_to_student:
            return {}
        out = {}
        for d in range(1, self.spec.D + 1):
            row = np.zeros((1, self.action_space.vocab_size))
            row[0, self.recover_token] = self.spec.recovery_prior
            out[("err", d)] = row
        return out

    def min_student_error(self) -> float:
        """Smallest per-cue error rate reachable by a policy that only sees display cues."""
        s = self.spec
        wrong = 0
        for b in range(s.visible_cues):
            moves = [self.cue_to_move[c] for c in range(b, s.cue_count, s.visible_cues)]
            wrong += len(moves) - max(moves.count(m) for m in set(moves))
        return wrong / s.cue_count


class EditState(NamedTuple):
    prompt: int
    cursor: int
    dirty: bool


EOA, FINISH, REVERT = 0, 1, 2


class TokenEdit(Environment):
    def __init__(self, spec: TokenEditSpec):
        self.spec = spec
        self.action_space = ActionSpace(vocab_size=spec.V, max_len=spec.M, finish_token=FINISH, eoa_token=EOA)
        self.symbols = list(range(3, spec.V))
        self._targets: dict[int, tuple[tuple[int, int], ...]] = {}
        tail = (EOA,) if spec.M > 2 else ()
        self._finish = ActionSeq((FINISH, EOA), True)
        self._revert = ActionSeq((REVERT, EOA), False)
        self._pairs = {(v, a): ActionSeq((v, a) + tail, False) for v in self.symbols for a in self.symbols}

    def __getstate__(self):
        d = dict(self.__dict__)
        d["_targets"] = {}
        return d

    def target(self, prompt: int) -> tuple[tuple[int, int], ...]:
        """Target program: ``program_length`` symbol pairs from substream(env_seed, 3, prompt)."""
        tgt = self._targets.get(prompt)
        if tgt is None:
            rng = substream(self.spec.env_seed, 3, prompt)
            idx = rng.integers(0, len(self.symbols), size=(self.spec.program_length, 2))
            tgt = tuple((self.symbols[i], self.symbols[j]) for i, j in idx)
            self._targets[prompt] = tgt
        return tgt

    def check_instance(self, instance: TaskInstance) -> None:
        super().check_instance(instance)
        if not 0 <= instance.seed_prompt < self.spec.n_prompts:
            raise EnvError(f"unknown task prompt {instance.seed_prompt} for instance {instance.id}")

    def initial_state(self, instance: TaskInstance) -> EditState:
        return EditState(instance.seed_prompt, 0, False)

    @staticmethod
    def parse(action: ActionSeq) -> tuple[str, tuple[int, int] | None]:
        toks = action.tokens
        head = toks[0]
        if head == FINISH:
            return "finish", None
        if head == REVERT:
            return "revert", None
        if head == EOA or len(toks) < 2 or toks[1] < 3 or any(t != EOA for t in toks[2:]):
            return "malformed", None
        return "pair", (toks[0], toks[1])

    def step(self, state: EditState, action: ActionSeq, rng=None) -> tuple[Observation, EditState]:
        if not action.tokens:
            raise EnvError("malformed action: empty token list")
        if any(not 0 <= t < self.spec.V for t in action.tokens):
            raise EnvError(f"tokens {action.tokens} outside vocabulary")
        kind, pair = self.parse(action)
        prompt, cursor, dirty = state
        if kind == "finish":
            return Observation(("done",)), state
        if kind == "revert":
            if dirty:
                return Observation(("reverted", cursor)), EditState(prompt, cursor, False)
            return Observation(("clean", cursor)), state
        if dirty:
            return Observation(("dirty", cursor)), state
        tgt = self.target(prompt)
        if kind == "pair" and cursor < len(tgt) and pair == tgt[cursor]:
            return Observation(("ok", cursor + 1)), EditState(prompt, cursor + 1, False)
        return Observation(("dirty", cursor)), EditState(prompt, cursor, True)

    def judge(self, state: EditState, finished: bool) -> int:
        return int(finished and not state.dirty and state.cursor == self.spec.program_length)

    def optimal_action(self, state: EditState) -> ActionSeq:
        if state.dirty:
            return self._revert
        if state.cursor == self.spec.program_length:
            return self._finish
        return self._pairs[self.target(state.prompt)[state.cursor]]

    def all_actions(self) -> list[ActionSeq]:
        return [self._finish, self._revert] + [self._pairs[k] for k in sorted(self._pairs)]

    def summary(self, context: Context) -> Hashable:
        """(prompt, edit cursor, dirty flag) as shown by the latest observation."""
        x = context.instance.seed_prompt
        obs = context.observation
        if obs is None:
            return (x, 0, 0)
        kind, cursor = obs.payload
        return (x, cursor, int(kind == "dirty"))

    @property
    def n_features(self) -> int:
        s = self.spec
        return 1 + s.n_prompts + (s.program_length + 1) + 1 + s.n_prompts * (s.program_length + 1)

    def features(self, context: Context) -> np.ndarray:
        s = self.spec
        x, cursor, dirty = self.summary(context)
        phi = np.zeros(self.n_features)
        phi[0] = 1.0
        phi[1 + x] = 1.0
        off = 1 + s.n_prompts
        phi[off + cursor] = 1.0
        off += s.program_length + 1
        phi[off] = float(dirty)
        off += 1
        phi[off + x * (s.program_length + 1) + cursor] = 1.0
        return phi

    @property
    def observation_alphabet(self) -> set:
        alpha = {("done",)}
        for kind in ("ok", "dirty", "reverted", "clean"):
            alpha |= {(kind, c) for c in range(self.spec.program_length + 1)}
        return alpha


def make_env(spec) -> Environment:
    if isinstance(spec, ChainRepairSpec):
        return ChainRepair(spec)
    if isinstance(spec, TokenEditSpec):
        return TokenEdit(spec)
    raise TypeError(f"unknown env spec {type(spec).__name__}")


# ---------------------------------------------------------------------------
# task distribution


class TaskSampler:
    """Draws task instances; instance ``id`` always maps to the same seed prompt."""

    PROMPT_SPACE = 2**31 - 1

    def __init__(self, env: Environment, seed: int):
        self.env = env
        self.seed = int(seed)

    def n_prompts(self) -> int:
        return getattr(self.env.spec, "n_prompts", self.PROMPT_SPACE)

    def instance(self, instance_id: int) -> TaskInstance:
        rng = substream(self.seed, 0, instance_id)
        prompt = int(rng.integers(0, self.n_prompts()))
        return TaskInstance(id=int(instance_id), seed_prompt=prompt, horizon_cap=self.env.horizon)

    def instances(self, ids) -> list[TaskInstance]:
        return [self.instance(i) for i in ids]


# ---------------------------------------------------------------------------
# oracle teacher


class OracleTeacher:
    """Plays the optimal action w.p. 1-eps, else a uniformly random other action.

    "Other action" ranges over every well-formed action of the action space, so
    a noisy teacher has full support. Sampling ignores temperature/nucleus
    settings: the teacher's distribution is fixed by ``eps``.
    """

    def __init__(self, env: Environment, eps: float = 0.0):
        if not 0.0 <= eps < 1.0:
            raise ValueError(f"teacher noise must be in [0, 1), got {eps}")
        self.env = env
        self.eps = float(eps)
        self._dist_cache: dict[Any, list[tuple[ActionSeq, float]]] = {}
        self._token_cache: dict[tuple, np.ndarray] = {}
        self._all = env.action_space.enumerate() if eps > 0 else []

    def __getstate__(self):
        d = dict(self.__dict__)
        d["_dist_cache"] = {}
        d["_token_cache"] = {}
        return d

    def context_key(self, context: Context) -> Hashable:
        return self.env.state_of(context)

    def _dist(self, state) -> list[tuple[ActionSeq, float]]:
        dist = self._dist_cache.get(state)
        if dist is None:
            best = self.env.optimal_action(state)
            dist = [(best, 1.0 - self.eps)]
            if self.eps > 0:
                q = self.eps / (len(self._all) - 1)
                dist += [(a, q) for a in self._all if a.tokens != best.tokens]
            self._dist_cache[state] = dist
        return dist

    def action_distribution(self, context: Context) -> list[tuple[ActionSeq, float]]:
        return list(self._dist(self.env.state_of(context)))

    def sample_action(self, context: Context, sampling=None, rng: np.random.Generator | None = None) -> ActionSeq:
        dist = self._dist(self.env.state_of(context))
        if self.eps == 0.0:
            return dist[0][0]
        u = rng.random()
        if u < 1.0 - self.eps:
            return dist[0][0]
        k = int((u - (1.0 - self.eps)) / self.eps * (len(dist) - 1))
        return dist[1 + min(k, len(dist) - 2)][0]

    def logprob(self, context: Context, action: ActionSeq) -> float:
        best, p_best = self._dist(self.env.state_of(context))[0]
        if action.tokens == best.tokens:
            return float(np.log(p_best))
        if self.eps > 0 and action in self._all_set:
            return float(np.log(self.eps / (len(self._all) - 1)))
        return -np.inf

    @property
    def _all_set(self) -> set:
        s = self.__dict__.get("_all_set_cache")
        if s is None:
            s = self.__dict__["_all_set_cache"] = set(self._all)
        return s

    def token_dist(self, context: Context, prefix=()) -> np.ndarray:
        """Next-token conditional implied by the action-level distribution.

        Returns all zeros when the prefix itself has no teacher mass.
        """
        state = self.env.state_of(context)
        prefix = tuple(prefix)
        key = (state, prefix)
        out = self._token_cache.get(key)
        if out is None:
            n = len(prefix)
            out = np.zeros(self.env.action_space.vocab_size)
            for a, p in self._dist(state):
                if len(a.tokens) > n and a.tokens[:n] == prefix:
                    out[a.tokens[n]] += p
            total = out.sum()
            out = out / total if total > 0 else out
            self._token_cache[key] = out
        return out.copy()


def oracle_teacher(env: Environment, label_noise: float = 0.0) -> OracleTeacher:
    return OracleTeacher(env, label_noise)


# ---------------------------------------------------------------------------
# exact dynamic-programming oracle


def exact_success_prob(policy, env: Environment, instance: TaskInstance, max_states: int = 10**6) -> float:
    """Exact success probability by forward DP over (turn, env state, policy key).

    ``policy`` must expose ``action_distribution(context)`` and
    ``context_key(context)``; nodes sharing env state and policy key are merged,
    which is exact because both the dynamics and the policy depend on the
    context only through them.
    """
    state, ctx = env.reset(instance)
    frontier: dict[tuple, list] = {(state, policy.context_key(ctx)): [1.0, ctx]}
    success = 0.0
    seen = 1
    for t in range(1, instance.horizon_cap + 1):
        nxt: dict[tuple, list] = {}
        for (state, _), (mass, ctx) in frontier.items():
            for action, p in policy.action_distribution(ctx):
                if p == 0.0:
                    continue
                obs, new_state = env.step(state, action)
                if action.is_finish:
                    success += mass * p * env.judge(new_state, True)
                    continue
                if t == instance.horizon_cap:
                    continue
                child = ctx.extend(action, obs, new_state)
                key = (new_state, policy.context_key(child))
                node = nxt.get(key)
                if node is None:
                    nxt[key] = [mass * p, child]
                    seen += 1
                    if seen > max_states:
                        raise StateSpaceTooLarge(f"more than {max_states} reachable states")
                else:
                    node[0] += mass * p
        frontier = nxt
    return success
