"""Experiment configuration: TOML file -> nested dataclasses.

Every section and key is optional; missing values fall back to the defaults
below. Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSection:
    num_states: int = 5
    num_actions: int = 2
    gamma: float = 0.9
    mdp_seed: int = 0
    reward_low: float = 0.0
    r_max: float = 1.0


@dataclass(frozen=True)
class DatasetSection:
    path: str = ""
    # qlearning: replay buffer of epsilon-greedy Q-learning training
    # epsilon_greedy: rollouts of the optimal policy mixed with uniform noise
    # uniform: rollouts of the uniform random policy
    # n_transitions is the dataset size for rollouts and the minimum replay size for qlearning
    source: str = "qlearning"
    episodes: int = 1000
    epsilon: float = 0.3
    learning_rate: float = 0.5
    max_episode_steps: int = 100
    n_transitions: int = 30000


@dataclass(frozen=True)
class EnsembleSection:
    n_members: int = 5
    include_plain: bool = True


@dataclass(frozen=True)
class CountingSection:
    exact: bool = False
    feature_map: str = "onehot"
    code_bits: int = 20
    n_members: int = 5
    alpha: float = 0.5
    mode: str = "AVG"
    rho: float = 0.05


@dataclass(frozen=True)
class PenaltySection:
    mode: str = "practical"
    beta: float = 1.0
    delta: float = 0.1
    log_model_class: float = 2.0


@dataclass(frozen=True)
class RolloutSection:
    epochs: int = 50
    rollout_batch: int = 100
    horizon: int = 5
    updates_per_epoch: int = 50
    batch_size: int = 256
    real_ratio: float = 0.05
    q_learning_rate: float = 0.1
    exploration_eps: float = 0.1
    model_buffer_capacity: int = 100_000


@dataclass(frozen=True)
class PlannerSection:
    kind: str = "exact"
    # treat the environment's absorbing states as known episode ends (no penalty there)
    known_terminals: bool = True
    rollout: RolloutSection = field(default_factory=RolloutSection)


@dataclass(frozen=True)
class EvalSection:
    num_seeds: int = 5
    tol: float = 1e-10


@dataclass(frozen=True)
class TheorySection:
    delta: float = 0.1
    # TV-scaling and coverage experiments (one fixed random MDP)
    num_states: int = 5
    num_actions: int = 2
    gamma: float = 0.9
    mdp_seed: int = 0
    slope_draws: int = 60
    min_dataset: int = 100
    max_dataset: int = 100_000
    coverage_reps: int = 200
    coverage_min_dataset: int = 50
    coverage_max_dataset: int = 5000
    # conditional inequality checks (fresh random MDP per repetition)
    enum_states: int = 3
    enum_actions: int = 2
    enum_gamma: float = 0.9
    reward_low: float = 0.0
    repetitions: int = 100
    enum_min_dataset: int = 20
    enum_max_dataset: int = 2000
    count_source: str = "exact"
    log_model_class: float = 0.0  # <= 0 means: use the calibrated value
    tol: float = 1e-6


@dataclass(frozen=True)
class SweepSection:
    modes: tuple = ("LC", "AVG", "UC")
    betas: tuple = (1.0,)
    horizons: tuple = (5,)
    code_bits: tuple = (20,)
    alphas: tuple = (0.5,)


@dataclass(frozen=True)
class ExperimentConfig:
    env_id: str = "grid/bridge"
    seed: int = 0
    output_dir: str = "out"
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    counting: CountingSection = field(default_factory=CountingSection)
    penalty: PenaltySection = field(default_factory=PenaltySection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    theory: TheorySection = field(default_factory=TheorySection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Short SHA-256 of the canonical JSON form, excluding ``output_dir``."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING \
            else fields[key].default
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, f"{where}.{key}" if where else key)
        elif isinstance(default, tuple):
            value = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{key} must be a boolean")
        elif isinstance(default, float) and isinstance(value, int):
            value = float(value)
        elif type(default) is not type(value):
            raise ConfigError(f"{where}.{key}: expected {type(default).__name__}, got {type(value).__name__}")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(data)
    if cfg.dataset.path and not Path(cfg.dataset.path).is_absolute():
        resolved = (path.parent / cfg.dataset.path).resolve()
        cfg = cfg.replace(dataset=dataclasses.replace(cfg.dataset, path=str(resolved)))
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    kind, _, name = cfg.env_id.partition("/")
    if kind not in ("grid", "synthetic") or not name:
        raise ConfigError(f"env_id must be grid/<layout> or synthetic/<name>, got {cfg.env_id!r}")
    if cfg.dataset.source not in ("qlearning", "epsilon_greedy", "uniform"):
        raise ConfigError(f"unknown dataset.source {cfg.dataset.source!r}")
    if cfg.counting.mode.upper() not in ("LC", "AVG", "UC"):
        raise ConfigError(f"unknown counting.mode {cfg.counting.mode!r}")
    if cfg.counting.feature_map not in ("onehot", "noisy_onehot"):
        raise ConfigError(f"unknown counting.feature_map {cfg.counting.feature_map!r}")
    if cfg.penalty.mode not in ("practical", "theory"):
        raise ConfigError(f"unknown penalty.mode {cfg.penalty.mode!r}")
    if cfg.planner.kind not in ("exact", "rollout"):
        raise ConfigError(f"unknown planner.kind {cfg.planner.kind!r}")
    if cfg.eval.num_seeds < 1 or cfg.ensemble.n_members < 1 or cfg.counting.n_members < 1:
        raise ConfigError("num_seeds and member counts must be >= 1")
    if cfg.counting.mode.upper() != "AVG" and cfg.counting.alpha > 0 and cfg.counting.n_members < 2 \
            and not cfg.counting.exact:
        raise ConfigError("LC/UC counting with alpha > 0 needs counting.n_members >= 2")
    if not 0 < cfg.penalty.delta < 1 or not 0 < cfg.theory.delta < 1:
        raise ConfigError("delta must lie in (0, 1)")
    if cfg.theory.count_source not in ("exact", "hash"):
        raise ConfigError(f"unknown theory.count_source {cfg.theory.count_source!r}")
