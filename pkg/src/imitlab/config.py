"""Experiment configuration: a TOML document with [env], [method], [schedule],
[optimizer], [policy], [eval] and [study] sections.

Validation errors carry the line number of the offending key when it appears
in the source text.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .env import ChainRepairSpec, Environment, OracleTeacher, TokenEditSpec, make_env
from .objectives import METHOD_KINDS, REGULARIZERS, MethodSpec
from .policy import SamplingConfig

ENV_KINDS = ("chain_repair", "token_edit")
DATA_MODES = ("fresh_batch", "aggregate")
FILTER_MODES = ("none", "valid_submission", "success_only")
DEFAULT_FILTER = {
    "sft": "success_only",
    "dagger_turn": "valid_submission",
    "aggrevate_traj": "valid_submission",
    "opd": "valid_submission",
    "pg_grpo": "none",
}
# a noiseless teacher puts zero mass on every non-optimal token, which makes
# reverse KL infinite for any softmax student
DEFAULT_KL_REFERENCE_NOISE = 0.01


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "chain_repair"
    T_max: int = 20
    K: int = 4
    D: int = 2
    V: int = 8
    M: int = 3
    teacher_noise: float = 0.0
    chain_length: int | None = None
    cue_count: int = 16
    visible_cues: int | None = None
    recovery_visible_to_student: bool = False
    program_length: int = 3
    n_prompts: int = 4
    env_seed: int = 0

    def spec(self):
        if self.kind == "chain_repair":
            return ChainRepairSpec(
                T_max=self.T_max,
                K=self.K,
                D=self.D,
                recovery_visible_to_student=self.recovery_visible_to_student,
                chain_length=self.chain_length,
                cue_count=self.cue_count,
                visible_cues=self.visible_cues,
                env_seed=self.env_seed,
            )
        return TokenEditSpec(
            T_max=self.T_max, V=self.V, M=self.M, program_length=self.program_length,
            n_prompts=self.n_prompts, env_seed=self.env_seed,
        )

    def build(self) -> Environment:
        return make_env(self.spec())


@dataclass(frozen=True)
class MethodConfig:
    kind: str = "dagger_turn"
    lam: float = 0.0
    regularizer: str = "none"
    data_mode: str = "fresh_batch"
    filter_mode: str | None = None
    opd_token_level: bool = False
    opd_logprob_floor: float = -20.0

    @property
    def spec(self) -> MethodSpec:
        return MethodSpec(self.kind, self.lam, self.regularizer, self.opd_token_level, self.opd_logprob_floor)

    @property
    def resolved_filter(self) -> str:
        return self.filter_mode or DEFAULT_FILTER[self.kind]


@dataclass(frozen=True)
class Schedule:
    beta_init: float = 1.0
    beta_step: float = 0.2
    beta_floor: float = 0.6
    rho_kappa_max: int = 40
    rho_shift_mode: str = "rising_floor"  # or "fixed"
    iterations: int = 5
    epochs_per_batch: int = 3
    batch_instances: int = 512
    group_size: int = 8

    def __post_init__(self):
        if not 0 <= self.beta_floor <= self.beta_init <= 1:
            raise ValueError("need 0 <= beta_floor <= beta_init <= 1")
        if self.rho_shift_mode not in ("rising_floor", "fixed"):
            raise ValueError(f"unknown rho_shift_mode {self.rho_shift_mode!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"  # or "momentum"
    step_size: float | None = None  # default: 0.5 tabular, 0.05 linear
    momentum: float = 0.9
    minibatch_size: int = 16
    clip_logits: float = 30.0
    sample_budget: int | None = None  # effective (retained) samples; None = no cap
    max_iterations: int = 200  # only used with a sample budget


@dataclass(frozen=True)
class PolicyConfig:
    mode: str = "tabular"
    key_mode: str = "summary"
    temperature: float = 0.7
    top_p: float = 0.9
    init_scale: float = 0.0

    @property
    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.temperature, self.top_p)


@dataclass(frozen=True)
class EvalConfig:
    heldout_instances: int = 100
    kl_rollouts: int = 100
    kl_temperature: float = 0.7
    # noise of the teacher that reverse KL is measured against; None means the
    # label teacher's noise, or DEFAULT_KL_REFERENCE_NOISE for a noiseless teacher
    kl_reference_noise: float | None = None
    every_iteration: bool = True


@dataclass(frozen=True)
class StudyConfig:
    methods: tuple[str, ...] = ("sft", "dagger_turn")
    horizons: tuple[int, ...] = (5, 10, 20, 40)
    seeds: tuple[int, ...] = tuple(range(20))
    budgets: tuple[int, ...] = (0, 500, 1000, 2000)
    budget: int = 2000  # horizon study: matched effective-sample budget per cell
    method: str = "dagger_turn"  # scaling study method when run from the CLI
    bootstrap: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str = "experiment"
    seed: int = 0
    output_dir: str = "runs/experiment"
    env: EnvConfig = field(default_factory=EnvConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    schedule: Schedule = field(default_factory=Schedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    study: StudyConfig = field(default_factory=StudyConfig)

    @property
    def step_size(self) -> float:
        if self.optimizer.step_size is not None:
            return self.optimizer.step_size
        return 0.5 if self.policy.mode == "tabular" else 0.05

    def teacher(self, env: Environment) -> OracleTeacher:
        return OracleTeacher(env, self.env.teacher_noise)

    def kl_reference(self, env: Environment) -> OracleTeacher:
        eps = self.eval.kl_reference_noise
        if eps is None:
            eps = self.env.teacher_noise or DEFAULT_KL_REFERENCE_NOISE
        return OracleTeacher(env, eps)

    def with_overrides(self, **sections) -> ExperimentConfig:
        """``with_overrides(env={"T_max": 10}, seed=3)`` style replacement."""
        out = {}
        for name, val in sections.items():
            cur = getattr(self, name)
            out[name] = dataclasses.replace(cur, **val) if isinstance(val, dict) else val
        return dataclasses.replace(self, **out)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that affects results (output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


_SECTIONS = {
    "env": EnvConfig,
    "method": MethodConfig,
    "schedule": Schedule,
    "optimizer": OptimizerConfig,
    "policy": PolicyConfig,
    "eval": EvalConfig,
    "study": StudyConfig,
}
_RENAMES = {("method", "lambda"): "lam"}
_ENUMS = {
    ("env", "kind"): ENV_KINDS,
    ("method", "kind"): METHOD_KINDS,
    ("method", "regularizer"): REGULARIZERS,
    ("method", "data_mode"): DATA_MODES,
    ("method", "filter_mode"): FILTER_MODES,
    ("schedule", "rho_shift_mode"): ("rising_floor", "fixed"),
    ("optimizer", "kind"): ("sgd", "momentum"),
    ("policy", "mode"): ("tabular", "linear"),
    ("policy", "key_mode"): ("summary", "history"),
}


def _locate(text: str, section: str | None, key: str | None) -> int | None:
    """Line number of ``key`` inside ``[section]`` (or of the section header)."""
    lines = text.splitlines()
    current = None
    header_line = None
    for n, line in enumerate(lines, start=1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            if current == section:
                header_line = n
            continue
        if key is None:
            continue
        m = re.match(r"^([A-Za-z0-9_.\"]+)\s*=", stripped)
        if not m:
            continue
        name = m.group(1).strip('"')
        if current == section and name == key:
            return n
        if current is None and section is not None and name == f"{section}.{key}":
            return n
        if section is None and current is None and name == key:
            return n
    return header_line


def _coerce(value, target_type: str):
    if "tuple" in target_type and isinstance(value, list):
        return tuple(value)
    return value


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigError(f"invalid TOML: {e}", int(m.group(1)) if m else None) from e

    top = {}
    for key in ("experiment_id", "seed", "output_dir"):
        if key in raw:
            top[key] = raw.pop(key)
    if "seed" not in top:
        raise ConfigError("missing required key 'seed'")
    if not isinstance(top["seed"], int):
        raise ConfigError("seed must be an integer", _locate(text, None, "seed"))

    sections = {}
    for name, value in raw.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section or key {name!r}", _locate(text, name, None) or _locate(text, None, name))
        if not isinstance(value, dict):
            raise ConfigError(f"{name!r} must be a section", _locate(text, None, name))
        cls = _SECTIONS[name]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in value.items():
            attr = _RENAMES.get((name, key), key)
            if attr not in fields:
                raise ConfigError(f"unknown key '{name}.{key}'", _locate(text, name, key))
            allowed = _ENUMS.get((name, key))
            if allowed is not None and val not in allowed:
                raise ConfigError(
                    f"invalid value {val!r} for '{name}.{key}' (expected one of {', '.join(allowed)})",
                    _locate(text, name, key),
                )
            kwargs[attr] = _coerce(val, str(fields[attr].type))
        try:
            sections[name] = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid [{name}] section: {e}", _locate(text, name, None)) from e

    cfg = ExperimentConfig(**top, **sections)
    try:
        cfg.env.spec()
        cfg.method.spec
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
