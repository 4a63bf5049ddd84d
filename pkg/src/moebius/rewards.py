"""Reward formulas: verification, majority voting, accuracy, and coach reward.

All pure functions. The pseudo-label is the majority answer with ties broken
lexicographically, so every rollout group has a deterministic label without
ground truth ever entering the training path.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from moebius.core import (
    AnswerSample,
    NumericError,
    PolicyError,
    RolloutGroup,
    canonicalize_answer,
)
from moebius.grpo import normalize_advantages


@dataclass(frozen=True)
class VoteResult:
    """Outcome of majority voting over one rollout group."""

    pseudo_label: str
    vote_counts: dict[str, int]
    tie_broken: bool


def majority_vote(answers: Sequence[str]) -> VoteResult:
    """Majority answer; ties go to the lexicographically smallest string."""
    if not answers:
        raise PolicyError("majority_vote on an empty rollout group")
    counts = Counter(answers)
    top = max(counts.values())
    leaders = sorted(a for a, c in counts.items() if c == top)
    return VoteResult(pseudo_label=leaders[0], vote_counts=dict(counts),
                      tie_broken=len(leaders) > 1)


def verify(answer: str, label: str) -> float:
    """Binary correctness: exact string equality after canonicalization."""
    return 1.0 if canonicalize_answer(answer) == canonicalize_answer(label) else 0.0


def _checked_mean(rewards: Sequence[float], op: str) -> float:
    if not rewards:
        raise PolicyError(f"{op} on an empty reward vector")
    for r in rewards:
        if r not in (0.0, 1.0):
            raise NumericError(f"{op} expects rewards in {{0,1}}, got {r}")
    return sum(rewards) / len(rewards)


def group_accuracy(rewards: Sequence[float]) -> float:
    """Fraction of rollouts agreeing with the pseudo-label (the difficulty
    score: high means the task is easy for the current player)."""
    return _checked_mean(rewards, "group_accuracy")


def player_instruction_reward(rewards: Sequence[float]) -> float:
    """Mean rollout reward for one instruction; feeds the coach reward.

    Same computation as group_accuracy, kept as a separate named operation
    because it plays a separate role. All-zero vectors are impossible when
    rewards target the group's own pseudo-label, so they are rejected.
    """
    mean = _checked_mean(rewards, "player_instruction_reward")
    if mean == 0.0:
        raise PolicyError("all-zero rewards cannot come from a pseudo-labeled group")
    return mean


def progress_delta(acc_post: float, acc_pre: float) -> float:
    """Validation accuracy change over one round; may be negative."""
    for name, value in (("acc_post", acc_post), ("acc_pre", acc_pre)):
        if not 0.0 <= value <= 1.0:
            raise NumericError(f"{name} must lie in [0, 1], got {value}")
    return acc_post - acc_pre


def coach_reward(player_reward: float, delta: float) -> float:
    """Multiplicative coach reward: instruction-level reward times progress.

    Zero progress annihilates the reward; the sign always follows the sign
    of the progress term.
    """
    if not 0.0 <= player_reward <= 1.0:
        raise NumericError(f"player reward must lie in [0, 1], got {player_reward}")
    return player_reward * delta


def build_rollout_group(instruction_id: int, samples: Sequence[AnswerSample],
                        std_eps: float) -> RolloutGroup:
    """Assemble one rollout group: vote, reward, and normalize in one place.

    ``acc`` and ``player_reward`` are assigned from the same computed mean,
    so their equality is exact by construction.
    """
    answers = [s.canonical_answer for s in samples]
    vote = majority_vote(answers)
    rewards = tuple(verify(a, vote.pseudo_label) for a in answers)
    acc = group_accuracy(rewards)
    advantages = tuple(normalize_advantages(rewards, std_eps))
    return RolloutGroup(instruction_id=instruction_id, samples=tuple(samples),
                        pseudo_label=vote.pseudo_label, rewards=rewards,
                        advantages=advantages, acc=acc, player_reward=acc)
