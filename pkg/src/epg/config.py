"""Experiment configuration: JSON loading, validation, canonical hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .envs import DEFAULT_DISCOUNT, DEFAULT_HORIZON, FAMILY_DEFAULTS, make_distribution
from .optim import LinearSchedule


class ConfigError(ValueError):
    """Configuration file failed validation; message names the fields."""


@dataclass
class EpgConfig:
    """Every scalar of one evolution run."""

    workers: int = 32                   # W
    noise_vectors: int = 8              # V
    epochs: int = 300                   # E
    inner_steps: int = 4096             # U
    update_freq: int = 64               # M
    buffer_size: int = 512              # N
    sigma: float = 0.1
    lr_inner: float = 1e-3
    lr_outer_start: float = 1e-2
    lr_outer_end: float = 1e-3
    lr_outer_anneal_epochs: int = 200
    alpha_start: float = 1.0
    alpha_end: float = 0.0
    alpha_anneal_epochs: int = 100
    discount: float = DEFAULT_DISCOUNT
    l2_coeff: float = 0.001
    minibatch_size: int = 32
    eval_trajectories: int = 3
    policy_hidden: list = field(default_factory=lambda: [64, 64])
    policy_log_std_init: float = 0.0
    evolve_policy_init: bool = False
    policy_pool: bool = False
    pool_capacity: int = 64
    pool_probability: float = 0.5
    mirrored_sampling: bool = False
    checkpoint_every: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.workers < 1 or self.noise_vectors < 1:
            errors.append("epg.workers and epg.noise_vectors must be positive")
        elif self.workers % self.noise_vectors != 0:
            errors.append(
                f"epg.noise_vectors ({self.noise_vectors}) must divide "
                f"epg.workers ({self.workers})")
        if self.update_freq % self.minibatch_size != 0:
            errors.append(
                f"epg.update_freq ({self.update_freq}) must be a multiple of "
                f"the minibatch size ({self.minibatch_size})")
        if self.inner_steps % self.update_freq != 0:
            errors.append(
                f"epg.update_freq ({self.update_freq}) must divide "
                f"epg.inner_steps ({self.inner_steps})")
        if self.update_freq > self.buffer_size:
            errors.append(
                f"epg.update_freq ({self.update_freq}) cannot exceed "
                f"epg.buffer_size ({self.buffer_size})")
        if self.mirrored_sampling and self.noise_vectors % 2 != 0:
            errors.append("epg.mirrored_sampling needs an even noise_vectors")
        if not 0.0 <= self.alpha_start <= 1.0 or not 0.0 <= self.alpha_end <= 1.0:
            errors.append("epg.alpha endpoints must lie in [0, 1]")
        if self.sigma <= 0:
            errors.append("epg.sigma must be positive")
        if self.epochs < 1:
            errors.append("epg.epochs must be positive")
        if not 0.0 < self.discount <= 1.0:
            errors.append("epg.discount must lie in (0, 1]")
        return errors

    def alpha_schedule(self) -> LinearSchedule:
        return LinearSchedule(self.alpha_start, self.alpha_end,
                              self.alpha_anneal_epochs)

    def lr_outer_schedule(self) -> LinearSchedule:
        return LinearSchedule(self.lr_outer_start, self.lr_outer_end,
                              self.lr_outer_anneal_epochs)

    def replace(self, **kw) -> "EpgConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class TaskConfig:
    family: str = "directional-point"
    reward_observing: bool | None = None
    mirror: bool = False
    no_reset: bool = False
    ranges: dict = field(default_factory=dict)
    horizon: int = DEFAULT_HORIZON

    def validate(self) -> list[str]:
        errors = []
        if self.family not in FAMILY_DEFAULTS:
            errors.append(f"task.family {self.family!r} is unknown "
                          f"(choose from {sorted(FAMILY_DEFAULTS)})")
        if self.horizon < 1:
            errors.append("task.horizon must be positive")
        for name, rng in self.ranges.items():
            if not (isinstance(rng, (list, tuple)) and len(rng) == 2
                    and rng[0] <= rng[1]):
                errors.append(f"task.ranges.{name} must be a [low, high] pair")
        return errors


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    epg: EpgConfig = field(default_factory=EpgConfig)
    seed: int = 1
    out_dir: str = "runs/epg"
    n_jobs: int = 1

    def validate(self) -> list[str]:
        errors = self.task.validate() + self.epg.validate()
        if self.seed < 0:
            errors.append("seed must be non-negative")
        if self.n_jobs < 1:
            errors.append("n_jobs must be at least 1")
        return errors

    def distribution(self, mirror: bool | None = None):
        return make_distribution(
            self.task.family,
            mirror=self.task.mirror if mirror is None else mirror,
            no_reset=self.task.no_reset,
            reward_observing=self.task.reward_observing,
            ranges={k: tuple(v) for k, v in self.task.ranges.items()},
            horizon=self.task.horizon,
            discount=self.epg.discount,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(section_cls, data: dict, prefix: str):
    known = {f.name for f in dataclasses.fields(section_cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(
            f"unknown {prefix} option(s): {', '.join(sorted(unknown))}")
    return section_cls(**data)


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"task", "epg", "seed", "out_dir", "n_jobs"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level option(s): {', '.join(sorted(unknown))}")
    cfg = ExperimentConfig(
        task=_build(TaskConfig, data.get("task", {}), "task"),
        epg=_build(EpgConfig, data.get("epg", {}), "epg"),
        seed=int(data.get("seed", 1)),
        out_dir=str(data.get("out_dir", "runs/epg")),
        n_jobs=int(data.get("n_jobs", 1)),
    )
    errors = cfg.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_config(data)


def canonical_json(cfg: ExperimentConfig) -> str:
    # out_dir and n_jobs are execution details, not experiment identity
    data = cfg.to_dict()
    data.pop("out_dir", None)
    data.pop("n_jobs", None)
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:16]
