"""Run configuration, loadable from a single JSON file."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class IterationConfig:
    # objective
    beta: float = 0.1
    lam: float = 1.0
    nll_sign: str = "corrected"
    nll_norm: str = "length"
    nll_eps: float = 1e-6
    # uncertainty
    mu: float = 1.0
    T: int = 10
    dropout: float = 0.1
    alpha_mode: str = "smoothing"
    weight_scope: str = "prompt"
    disagreement: str = "drop"
    gate_threshold: float = 0.7
    use_estimator: bool = True
    # generation and pairing
    N: int = 4
    I: int = 3
    top_k: int | None = None
    temperature: float = 0.8
    top_p: float = 0.9
    prompts_per_iter: int = 200
    # selection
    easy_fraction: float = 0.5
    hard_fraction: float = 0.1
    mix_fraction: float = 0.4
    # training
    batch_size: int = 32
    warmup: float = 0.1
    sft_epochs: int = 2
    policy_epochs: int = 3
    reward_epochs: int = 30
    estimator_epochs: int = 30
    update_epochs: int = 2
    update_rm_est: bool = True
    lr_sft: float = 1e-2
    lr_policy: float = 3e-3
    lr_reward: float = 3e-3
    lr_estimator: float = 3e-3
    lr_decay: tuple[float, ...] = (1.0, 0.8, 0.6)
    # backbone
    vocab: int = 32
    context: int = 16
    embed: int = 16
    hidden: int = 32

    def __post_init__(self):
        for name in ("easy_fraction", "hard_fraction", "mix_fraction", "warmup"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.N < 2:
            raise ConfigError(f"N must be >= 2, got {self.N}")
        if self.I < 1:
            raise ConfigError(f"I must be >= 1, got {self.I}")
        if self.top_k is not None and not 0 <= self.top_k < self.N:
            raise ConfigError(f"top_k must be in [0, N), got {self.top_k}")
        if self.beta <= 0 or self.lam < 0 or self.mu <= 0:
            raise ConfigError("need beta > 0, lam >= 0, mu > 0")
        if not 0.5 <= self.gate_threshold <= 1.0:
            raise ConfigError(f"gate_threshold must be in [0.5, 1], got {self.gate_threshold}")
        if self.T < 2:
            raise ConfigError("T must be >= 2")
        self.lr_decay = tuple(float(x) for x in self.lr_decay)
        if not self.lr_decay:
            raise ConfigError("lr_decay must list at least one factor")
        choices = {
            "nll_sign": ("corrected", "paper_literal"),
            "nll_norm": ("reward", "length"),
            "alpha_mode": ("smoothing", "paper_literal", "zero"),
            "weight_scope": ("prompt", "dataset"),
            "disagreement": ("drop", "flip", "keep"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def pair_top_k(self) -> int:
        return math.ceil(self.N / 2) if self.top_k is None else self.top_k

    def lr_factor(self, iteration: int) -> float:
        """Per-iteration policy learning-rate factor (iteration >= 1)."""
        return self.lr_decay[min(iteration - 1, len(self.lr_decay) - 1)]

    def to_json(self) -> dict:
        data = asdict(self)
        data["lr_decay"] = list(self.lr_decay)
        return data

    @classmethod
    def from_json(cls, data: dict):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


STRATEGIES = ("random", "cb_rr", "margin", "uncertainty")


@dataclass
class ExperimentConfig(IterationConfig):
    seed: int = 0
    world_seed: int = 0
    world_pair_scale: float = 0.4
    seed_size: int = 1000
    noise_rate: float = 0.3
    eval_prompts: int = 200
    output_dir: str = "runs/default"
    strategies: tuple[str, ...] = STRATEGIES
    study_pool: int = 200
    study_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        super().__post_init__()
        self.strategies = tuple(self.strategies)
        self.study_seeds = tuple(int(s) for s in self.study_seeds)
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; valid: {', '.join(STRATEGIES)}")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ConfigError(f"noise_rate must be in [0, 0.5), got {self.noise_rate}")
        if self.seed_size < 1:
            raise ConfigError("seed_size must be >= 1")

    def to_json(self) -> dict:
        data = super().to_json()
        data["strategies"] = list(self.strategies)
        data["study_seeds"] = list(self.study_seeds)
        return data

    def iteration_config(self) -> IterationConfig:
        names = {f.name for f in fields(IterationConfig)}
        return IterationConfig(**{k: v for k, v in asdict(self).items() if k in names})


def load_config(path: str | Path, env: dict | None = None) -> ExperimentConfig:
    """Parse a JSON config file; ``UPO_SEED`` in the environment overrides ``seed``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    env = os.environ if env is None else env
    if env.get("UPO_SEED"):
        try:
            data["seed"] = int(env["UPO_SEED"])
        except ValueError:
            raise ConfigError(f"UPO_SEED must be an integer, got {env['UPO_SEED']!r}") from None
    return ExperimentConfig.from_json(data)
