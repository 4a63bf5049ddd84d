"""Deterministic synthetic task family: difficulty-parameterized modular sums.

A task at difficulty d asks for (a_1 + ... + a_d) mod K. The oracle is closed
form, answer marginals are uniform, and the player's correct-answer feature is
attenuated by 1/d so difficulty genuinely orders per-sample accuracy - giving
the coach a real curriculum decision to learn. The fixed validation set is
drawn from a dedicated rng lane so it never collides with training instances.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Any

import numpy as np

from moebius.core import (
    LANE_TASK_OPERANDS,
    LANE_VALIDATION_BUILD,
    VALIDATION_ID_OFFSET,
    DomainError,
    TaskInstruction,
    derive_rng,
    require_keys,
)

# Feature layout: correct-answer signal, first-operand parity, bias, then one
# intercept per difficulty level. F = 3 + D.
FEAT_TRUTH = 0
FEAT_PARITY = 1
FEAT_BIAS = 2
FEAT_LEVEL_BASE = 3

_PROMPT_RE = re.compile(r"compute \(([0-9 +]+)\) mod (\d+)")


@dataclass(frozen=True)
class DomainSpec:
    """Parameters of the task family."""

    D: int = 8
    K: int = 10
    operand_lo: int = 0
    operand_hi: int = 9
    val_tasks_per_level: int = 8

    def __post_init__(self):
        if self.D < 2:
            raise DomainError(f"need at least 2 difficulty levels, got D={self.D}")
        if self.K < 2:
            raise DomainError(f"need at least 2 answers, got K={self.K}")
        if self.operand_lo > self.operand_hi:
            raise DomainError("empty operand range")
        if self.val_tasks_per_level < 1:
            raise DomainError("val_tasks_per_level must be >= 1")

    @property
    def num_features(self) -> int:
        return FEAT_LEVEL_BASE + self.D

    def answer_strings(self) -> list[str]:
        return [str(y) for y in range(self.K)]

    def to_json(self) -> dict[str, Any]:
        return {"D": self.D, "K": self.K,
                "operand_range": [self.operand_lo, self.operand_hi],
                "val_tasks_per_level": self.val_tasks_per_level}

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> "DomainSpec":
        require_keys(payload, {"D", "K", "operand_range", "val_tasks_per_level"},
                     "domain")
        kwargs: dict[str, Any] = {}
        if "D" in payload:
            kwargs["D"] = int(payload["D"])
        if "K" in payload:
            kwargs["K"] = int(payload["K"])
        if "operand_range" in payload:
            lo, hi = payload["operand_range"]
            kwargs["operand_lo"] = int(lo)
            kwargs["operand_hi"] = int(hi)
        if "val_tasks_per_level" in payload:
            kwargs["val_tasks_per_level"] = int(payload["val_tasks_per_level"])
        return cls(**kwargs)


@lru_cache(maxsize=65536)
def _operands(spec: DomainSpec, difficulty: int, instance_seed: int) -> tuple[int, ...]:
    rng = derive_rng(instance_seed, 0, difficulty, LANE_TASK_OPERANDS)
    draws = rng.integers(spec.operand_lo, spec.operand_hi + 1, size=difficulty)
    return tuple(int(a) for a in draws)


def _render_prompt(operands: tuple[int, ...], k: int) -> str:
    return f"compute ({' + '.join(str(a) for a in operands)}) mod {k}"


def generate_task(spec: DomainSpec, difficulty: int, instance_seed: int, *,
                  round_index: int, task_id: int, coach_trace: int | None = None) -> TaskInstruction:
    """Materialize the task determined by (difficulty, instance_seed).

    Regeneration is bit-exact: the operands come from a stream keyed by the
    instance seed alone, independent of round or id.
    """
    if not 1 <= difficulty <= spec.D:
        raise DomainError(f"difficulty {difficulty} outside [1, {spec.D}]")
    operands = _operands(spec, difficulty, instance_seed)
    trace = difficulty - 1 if coach_trace is None else coach_trace
    return TaskInstruction(id=task_id, prompt=_render_prompt(operands, spec.K),
                           difficulty=difficulty, instance_seed=instance_seed,
                           coach_trace=trace, round=round_index)


def _check_owned(spec: DomainSpec, task: TaskInstruction) -> tuple[int, ...]:
    if not 1 <= task.difficulty <= spec.D:
        raise DomainError(f"task difficulty {task.difficulty} outside this domain")
    operands = _operands(spec, task.difficulty, task.instance_seed)
    if task.prompt != _render_prompt(operands, spec.K):
        raise DomainError(f"task {task.id} was not generated by this domain")
    return operands


def ground_truth(spec: DomainSpec, task: TaskInstruction) -> str:
    """Closed-form oracle answer. Training never sees it; evaluation does."""
    operands = _check_owned(spec, task)
    return str(sum(operands) % spec.K)


def features(spec: DomainSpec, task: TaskInstruction, answer: int) -> np.ndarray:
    """Feature vector for one (task, candidate answer) pair.

    The correct-answer indicator is scaled by 1/difficulty, so harder tasks
    carry a weaker signal; the parity feature is a pure distractor. The
    player only ever observes feature values, never the label itself.
    """
    if not 0 <= answer < spec.K:
        raise DomainError(f"answer {answer} outside [0, {spec.K})")
    return feature_matrix(spec, task)[answer].copy()


@lru_cache(maxsize=16384)
def _feature_matrix_cached(spec: DomainSpec, difficulty: int,
                           instance_seed: int) -> np.ndarray:
    operands = _operands(spec, difficulty, instance_seed)
    truth = sum(operands) % spec.K
    first_parity = operands[0] % 2
    mat = np.zeros((spec.K, spec.num_features), dtype=np.float64)
    for y in range(spec.K):
        if y == truth:
            mat[y, FEAT_TRUTH] = 1.0 / difficulty
        if y % 2 == first_parity:
            mat[y, FEAT_PARITY] = 1.0
        mat[y, FEAT_BIAS] = 1.0
        mat[y, FEAT_LEVEL_BASE + difficulty - 1] = 1.0
    mat.flags.writeable = False
    return mat


def feature_matrix(spec: DomainSpec, task: TaskInstruction) -> np.ndarray:
    """The (K, F) feature matrix over the full answer support, cached."""
    _check_owned(spec, task)
    return _feature_matrix_cached(spec, task.difficulty, task.instance_seed)


def parse_prompt(prompt: str) -> tuple[tuple[int, ...], int]:
    """Recover (operands, modulus) from a rendered prompt."""
    match = _PROMPT_RE.fullmatch(prompt)
    if match is None:
        raise DomainError(f"unparseable prompt: {prompt!r}")
    operands = tuple(int(tok) for tok in match.group(1).split(" + "))
    return operands, int(match.group(2))


@dataclass(frozen=True)
class ValidationSet:
    """The fixed held-out environment, with ground-truth labels attached.

    Task ids live in the validation id range, so evaluation-time sampling
    streams can never collide with training rollout streams.
    """

    spec: DomainSpec
    tasks: tuple[TaskInstruction, ...]
    truths: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tasks)

    @cached_property
    def truth_indices(self) -> np.ndarray:
        return np.array([int(t) for t in self.truths], dtype=np.int64)

    @cached_property
    def feature_stack(self) -> np.ndarray:
        """(V, K, F) stacked feature matrices; built once, then cached."""
        stack = np.stack([feature_matrix(self.spec, t) for t in self.tasks])
        stack.flags.writeable = False
        return stack


def build_validation_set(spec: DomainSpec, seed: int) -> ValidationSet:
    """val_tasks_per_level tasks per difficulty, from the validation rng lane."""
    tasks: list[TaskInstruction] = []
    truths: list[str] = []
    ordinal = 0
    for difficulty in range(1, spec.D + 1):
        for _ in range(spec.val_tasks_per_level):
            rng = derive_rng(seed, 0, ordinal, LANE_VALIDATION_BUILD)
            instance_seed = int(rng.integers(0, 2**63))
            task = generate_task(spec, difficulty, instance_seed, round_index=0,
                                 task_id=VALIDATION_ID_OFFSET + ordinal)
            tasks.append(task)
            truths.append(ground_truth(spec, task))
            ordinal += 1
    return ValidationSet(spec=spec, tasks=tuple(tasks), truths=tuple(truths))
