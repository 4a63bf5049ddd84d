"""Run configuration records and JSON loading with strict key checking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from moebius.core import ConfigError, require_keys
from moebius.domain import DomainSpec


@dataclass(frozen=True)
class GrpoConfig:
    """Clipped-surrogate optimizer knobs for the player update."""

    clip_eps: float = 0.2
    kl_coef: float = 1e-3
    std_eps: float = 1e-8
    inner_epochs: int = 1
    ref_refresh_interval: int = 0

    def __post_init__(self):
        if not self.clip_eps > 0:
            raise ConfigError(f"grpo.clip_eps must be > 0, got {self.clip_eps}")
        if self.kl_coef < 0:
            raise ConfigError(f"grpo.kl_coef must be >= 0, got {self.kl_coef}")
        if not self.std_eps > 0:
            raise ConfigError(f"grpo.std_eps must be > 0, got {self.std_eps}")
        if self.inner_epochs < 1:
            raise ConfigError(f"grpo.inner_epochs must be >= 1, got {self.inner_epochs}")
        if self.ref_refresh_interval < 0:
            raise ConfigError("grpo.ref_refresh_interval must be >= 0")

    def to_json(self) -> dict[str, Any]:
        return {"clip_eps": self.clip_eps, "kl_coef": self.kl_coef,
                "std_eps": self.std_eps, "inner_epochs": self.inner_epochs,
                "ref_refresh_interval": self.ref_refresh_interval}

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> "GrpoConfig":
        require_keys(payload, set(cls().to_json()), "grpo")
        return cls(**payload)


@dataclass(frozen=True)
class EvalProtocol:
    """How validation accuracy is measured: exact closed form, or mean@k."""

    kind: str = "exact"
    k: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("exact", "sampled"):
            raise ConfigError(f"eval_protocol kind must be exact|sampled, got {self.kind!r}")
        if self.kind == "sampled" and self.k < 1:
            raise ConfigError("sampled eval_protocol needs k >= 1")

    def to_json(self) -> Any:
        if self.kind == "exact":
            return "exact"
        return {"kind": "sampled", "k": self.k, "seed": self.seed}

    @classmethod
    def from_json(cls, payload: Any) -> "EvalProtocol":
        if payload == "exact":
            return cls()
        if isinstance(payload, dict):
            require_keys(payload, {"kind", "k", "seed"}, "eval_protocol")
            return cls(kind=str(payload.get("kind", "sampled")),
                       k=int(payload.get("k", 0)), seed=int(payload.get("seed", 0)))
        raise ConfigError(f"eval_protocol must be \"exact\" or an object, got {payload!r}")


@dataclass(frozen=True)
class AblationMode:
    """Which co-evolution components are active."""

    coach_update_enabled: bool = True
    instruction_filter_enabled: bool = True

    NAMES = ("none", "no-coach-update", "no-filter")

    @property
    def name(self) -> str:
        if not self.coach_update_enabled:
            return "no-coach-update"
        if not self.instruction_filter_enabled:
            return "no-filter"
        return "none"

    @classmethod
    def from_name(cls, name: str) -> "AblationMode":
        if name == "none":
            return cls()
        if name == "no-coach-update":
            return cls(coach_update_enabled=False)
        if name == "no-filter":
            return cls(instruction_filter_enabled=False)
        raise ConfigError(f"unknown ablation {name!r}; expected one of {', '.join(cls.NAMES)}")


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs; mirrors the config JSON one to one.

    Learning-rate and entropy-coefficient defaults are calibrated to the
    desk-scale softmax policies, where one round moves validation accuracy
    by ~1e-4: the coach's multiplicative reward inherits that scale, so its
    step size and entropy bonus must be sized against it or the coach never
    moves off its initialization. LLM-scale values (lr 1e-6, entropy 1e-2)
    remain selectable. ``coach_warm_slope`` plays the role of the coach's
    warm start: the default initialization mildly favors easier tasks; 0
    gives the cold uniform coach.
    """

    m: int = 16
    n: int = 16
    T: int = 50
    band_lo: float = 0.2
    band_hi: float = 0.8
    max_filter_attempts: int | None = None
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    coach_lr: float = 200.0
    player_lr: float = 0.15
    coach_entropy_coef: float = 1e-4
    player_entropy_coef: float = -1e-2
    seed: int = 0
    eval_protocol: EvalProtocol = field(default_factory=EvalProtocol)
    domain: DomainSpec = field(default_factory=DomainSpec)
    ablation: AblationMode = field(default_factory=AblationMode)
    workers: int = 1
    checkpoint_interval: int = 0
    regenerate_training_rollouts: bool = False
    player_temperature: float = 1.0
    init_truth_weight: float = 0.5
    coach_warm_slope: float = 0.25
    coach_init_logits: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if not 0 <= self.band_lo <= self.band_hi <= 1:
            raise ConfigError(f"band must satisfy 0 <= lo <= hi <= 1, got "
                              f"[{self.band_lo}, {self.band_hi}]")
        if self.attempts_budget < self.m:
            raise ConfigError("max_filter_attempts must be >= m")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not self.player_temperature > 0:
            raise ConfigError("player_temperature must be > 0")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative 64-bit integer")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        if self.coach_init_logits is not None and len(self.coach_init_logits) != self.domain.D:
            raise ConfigError(f"coach_init_logits needs {self.domain.D} entries, "
                              f"got {len(self.coach_init_logits)}")

    @property
    def attempts_budget(self) -> int:
        return 64 * self.m if self.max_filter_attempts is None else self.max_filter_attempts

    def to_json(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "m": self.m, "n": self.n, "T": self.T,
            "band_lo": self.band_lo, "band_hi": self.band_hi,
            "max_filter_attempts": self.max_filter_attempts,
            "grpo": self.grpo.to_json(),
            "coach_lr": self.coach_lr, "player_lr": self.player_lr,
            "coach_entropy_coef": self.coach_entropy_coef,
            "player_entropy_coef": self.player_entropy_coef,
            "seed": self.seed,
            "eval_protocol": self.eval_protocol.to_json(),
            "domain": self.domain.to_json(),
            "ablation": self.ablation.name,
            "workers": self.workers,
            "checkpoint_interval": self.checkpoint_interval,
            "regenerate_training_rollouts": self.regenerate_training_rollouts,
            "player_temperature": self.player_temperature,
            "init_truth_weight": self.init_truth_weight,
            "coach_warm_slope": self.coach_warm_slope,
            "coach_init_logits": (None if self.coach_init_logits is None
                                  else list(self.coach_init_logits)),
        }
        return payload

    def initial_coach_logits(self) -> tuple[float, ...]:
        """Warm-start logits unless an explicit initialization is given."""
        if self.coach_init_logits is not None:
            return self.coach_init_logits
        return tuple(-self.coach_warm_slope * level for level in range(self.domain.D))

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> "RunConfig":
        if not isinstance(payload, dict):
            raise ConfigError("config root must be a JSON object")
        require_keys(payload, set(cls().to_json()), "config")
        kwargs: dict[str, Any] = dict(payload)
        if "grpo" in kwargs:
            kwargs["grpo"] = GrpoConfig.from_json(kwargs["grpo"])
        if "eval_protocol" in kwargs:
            kwargs["eval_protocol"] = EvalProtocol.from_json(kwargs["eval_protocol"])
        if "domain" in kwargs:
            kwargs["domain"] = DomainSpec.from_json(kwargs["domain"])
        if "ablation" in kwargs:
            kwargs["ablation"] = AblationMode.from_name(kwargs["ablation"])
        if kwargs.get("coach_init_logits") is not None:
            kwargs["coach_init_logits"] = tuple(float(v) for v in kwargs["coach_init_logits"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def load_config(path: str | Path) -> tuple[RunConfig, str]:
    """Parse a config file; returns the config and the raw text snapshot."""
    raw = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_json(payload), raw
