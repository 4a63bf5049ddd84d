"""Shared domain types, answer canonicalization, and deterministic RNG derivation.

Everything downstream (rewards, policies, optimizers, the training loop, the
wire service) builds on the records and the counter-derived randomness defined
here. All records are immutable value objects, safe to share across workers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Any

import numpy as np

MAX_SEED = 2**64 - 1


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class MoebiusError(Exception):
    """Base class for all package errors."""


class ConfigError(MoebiusError):
    """Invalid or unknown configuration field."""


class NumericError(MoebiusError):
    """Non-finite value or numerically invalid input."""


class TransportError(MoebiusError):
    """Wire-level failure talking to a remote policy backend."""


class CapabilityError(MoebiusError):
    """Operation not supported by this policy backend."""


class PolicyError(MoebiusError):
    """Policy-level contract violation (support mismatch, bad action, ...)."""


class DomainError(MoebiusError):
    """Task does not belong to the domain, or domain parameters are invalid."""


class RoundAborted(MoebiusError):
    """A training round failed; policies were restored to round-start state."""

    def __init__(self, round_index: int, cause: Exception):
        super().__init__(f"round {round_index} aborted: {cause}")
        self.round_index = round_index
        self.cause = cause


# ---------------------------------------------------------------------------
# Deterministic randomness
#
# Every random draw in a run is keyed by (seed, round, instruction, sample),
# so replays are exact and results do not depend on worker scheduling.
# The sample slot doubles as a purpose lane for draws that are not tied to a
# rollout sample; lane values start above 2**32 so they can never collide
# with a sample index. Instruction ids get disjoint ranges per purpose.
# ---------------------------------------------------------------------------

LANE_COACH_DRAW = 2**32          # coach sampling a candidate task
LANE_VALIDATION_BUILD = 2**32 + 1  # drawing validation instance seeds
LANE_ROLLOUT = 2**32 + 2         # player rollout uniforms for one instruction
LANE_TASK_OPERANDS = 2**32 + 3   # expanding an instance seed into operands

RETRAIN_ID_OFFSET = 2**30        # regenerated training rollouts
VALIDATION_ID_OFFSET = 2**31     # validation tasks during evaluation


def derive_rng(seed: int, round_index: int, instruction_index: int,
               sample_index: int) -> np.random.Generator:
    """Return the random stream keyed by (seed, round, instruction, sample).

    Distinct tuples yield independent streams; the same tuple always yields
    the same stream, no matter where or when it is derived.
    """
    for name, value in (("seed", seed), ("round", round_index),
                        ("instruction_index", instruction_index),
                        ("sample_index", sample_index)):
        if not isinstance(value, (int, np.integer)) or value < 0:
            raise NumericError(f"derive_rng {name} must be a nonnegative integer, got {value!r}")
    if seed > MAX_SEED:
        raise NumericError(f"derive_rng seed must fit in 64 bits, got {seed}")
    return np.random.default_rng(
        np.random.SeedSequence(entropy=[int(seed), int(round_index),
                                        int(instruction_index), int(sample_index)]))


# ---------------------------------------------------------------------------
# Answer canonicalization
# ---------------------------------------------------------------------------

_INT_RE = re.compile(r"[+-]?\d+")
_DEC_RE = re.compile(r"[+-]?(?:\d+\.\d*|\.\d+|\d+)")
_BOX_PREFIXES = ("\\boxed{", "boxed{")


def _wraps_fully(text: str, prefix: str) -> bool:
    """True when ``prefix{`` ... ``}`` encloses the whole string, braces balanced."""
    if not (text.startswith(prefix) and text.endswith("}")):
        return False
    depth = 1
    for ch in text[len(prefix):-1]:
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return False
    return depth == 1


def _strip_wrappers(text: str) -> str:
    """Peel surrounding $...$ and boxed{...} markers until stable."""
    current = text.strip()
    while True:
        previous = current
        if len(current) >= 2 and current.startswith("$") and current.endswith("$"):
            current = current[1:-1].strip()
        for prefix in _BOX_PREFIXES:
            if _wraps_fully(current, prefix):
                current = current[len(prefix):-1].strip()
        if current == previous:
            return current


def _normalize_number(text: str) -> str | None:
    """Minimal numeral form: no leading zeros, no trailing fraction zeros."""
    if _INT_RE.fullmatch(text):
        return str(int(text, 10))
    if not _DEC_RE.fullmatch(text):
        return None
    try:
        value = Decimal(text)
    except InvalidOperation:
        return None
    if not value.is_finite():
        return None
    if value == value.to_integral_value():
        return str(int(value))
    return format(value.normalize(), "f")


def canonicalize_answer(raw: str) -> str:
    """Canonical form used for all answer-equality tests.

    Trims whitespace, strips boxing markers, and reduces numeric answers to
    a minimal integer/decimal form. Idempotent; the empty string maps to
    itself.
    """
    stripped = _strip_wrappers(str(raw))
    normalized = _normalize_number(stripped)
    return normalized if normalized is not None else stripped


# ---------------------------------------------------------------------------
# Domain records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskInstruction:
    """One coach-proposed task, with the action trace that generated it.

    ``id`` is unique within a round; together with ``round`` it keys every
    random stream that touches the task. The prompt is regenerable bit-exactly
    from (difficulty, instance_seed).
    """

    id: int
    prompt: str
    difficulty: int
    instance_seed: int
    coach_trace: int
    round: int

    def to_json(self) -> dict[str, Any]:
        return {"id": self.id, "prompt": self.prompt, "difficulty": self.difficulty,
                "instance_seed": self.instance_seed, "coach_trace": self.coach_trace,
                "round": self.round}

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> "TaskInstruction":
        return cls(id=int(payload["id"]), prompt=str(payload["prompt"]),
                   difficulty=int(payload["difficulty"]),
                   instance_seed=int(payload["instance_seed"]),
                   coach_trace=int(payload["coach_trace"]), round=int(payload["round"]))


@dataclass(frozen=True)
class AnswerSample:
    """One player answer, with its sampling-time log-probability."""

    canonical_answer: str
    sampler_logprob: float
    sample_index: int

    def __post_init__(self):
        if not self.sampler_logprob <= 0.0:
            raise NumericError(f"sampler_logprob must be <= 0, got {self.sampler_logprob}")


@dataclass(frozen=True)
class RolloutGroup:
    """All n answers for one instruction plus the derived training signals.

    Rewards are 1 exactly where the answer matches the majority-vote
    pseudo-label; ``acc`` and ``player_reward`` are the same mean, kept as two
    fields because they play two roles (difficulty score, coach-reward input).
    """

    instruction_id: int
    samples: tuple[AnswerSample, ...]
    pseudo_label: str
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    acc: float
    player_reward: float

    @property
    def n(self) -> int:
        return len(self.samples)

    def __post_init__(self):
        if not (len(self.samples) == len(self.rewards) == len(self.advantages)):
            raise PolicyError("rollout group sample/reward/advantage lengths differ")


@dataclass(frozen=True)
class FilterStats:
    """Bookkeeping for one difficulty-filtered batch proposal."""

    candidates_sampled: int
    rejected_too_easy: int
    rejected_too_hard: int
    fallback_used: bool
    zero_variance_groups: int

    def to_json(self) -> dict[str, Any]:
        return {"candidates_sampled": self.candidates_sampled,
                "rejected_too_easy": self.rejected_too_easy,
                "rejected_too_hard": self.rejected_too_hard,
                "fallback_used": self.fallback_used,
                "zero_variance_groups": self.zero_variance_groups}


@dataclass(frozen=True)
class LossStats:
    """Scalar diagnostics from the two policy updates in one round."""

    player_objective: float = 0.0
    player_surrogate: float = 0.0
    player_kl: float = 0.0
    player_entropy: float = 0.0
    max_ratio_dev: float = 0.0
    coach_objective: float = 0.0
    coach_entropy: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return {"player_objective": self.player_objective,
                "player_surrogate": self.player_surrogate,
                "player_kl": self.player_kl,
                "player_entropy": self.player_entropy,
                "max_ratio_dev": self.max_ratio_dev,
                "coach_objective": self.coach_objective,
                "coach_entropy": self.coach_entropy}


_EMPTY_FILTER = FilterStats(0, 0, 0, False, 0)


@dataclass(frozen=True)
class RoundRecord:
    """One full co-evolution round, exactly as persisted to the metrics stream.

    ``player_rewards`` is carried alongside ``coach_rewards`` so the audit
    command can re-derive the coach-reward product from the file alone.
    Round 0 is the initial-evaluation record: empty batch, delta 0.
    """

    round: int
    instruction_ids: tuple[int, ...]
    acc_pre: float
    acc_post: float
    delta: float
    player_rewards: tuple[float, ...]
    coach_rewards: tuple[float, ...]
    filter_stats: FilterStats = _EMPTY_FILTER
    loss_stats: LossStats = field(default_factory=LossStats)

    def to_json(self) -> dict[str, Any]:
        return {"round": self.round,
                "instruction_ids": list(self.instruction_ids),
                "acc_pre": self.acc_pre,
                "acc_post": self.acc_post,
                "delta": self.delta,
                "player_rewards": list(self.player_rewards),
                "coach_rewards": list(self.coach_rewards),
                "filter_stats": self.filter_stats.to_json(),
                "loss_stats": self.loss_stats.to_json()}

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> "RoundRecord":
        return cls(round=int(payload["round"]),
                   instruction_ids=tuple(payload["instruction_ids"]),
                   acc_pre=float(payload["acc_pre"]),
                   acc_post=float(payload["acc_post"]),
                   delta=float(payload["delta"]),
                   player_rewards=tuple(payload["player_rewards"]),
                   coach_rewards=tuple(payload["coach_rewards"]),
                   filter_stats=FilterStats(**payload["filter_stats"]),
                   loss_stats=LossStats(**payload["loss_stats"]))


def initial_round_record(accuracy: float) -> RoundRecord:
    """The round-0 record holding the pre-training evaluation."""
    return RoundRecord(round=0, instruction_ids=(), acc_pre=accuracy,
                       acc_post=accuracy, delta=0.0, player_rewards=(),
                       coach_rewards=())


def require_keys(payload: dict[str, Any], allowed: set[str], where: str) -> None:
    """Reject unknown keys in a config/wire object with a pointed message."""
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
