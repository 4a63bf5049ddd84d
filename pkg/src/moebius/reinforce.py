"""REINFORCE update for the coach, with an entropy bonus.

Plain score-function gradient over the accepted batch: rewards multiply the
log-probability gradients of the sampled tasks. Rejected filter candidates
never reach this update, which implicitly shapes the coach toward the
difficulty band. An optional EMA baseline is available but off by default;
with no baseline the update is the textbook estimator, and the baseline only
changes variance, not the expected step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from moebius.core import NumericError, PolicyError, TaskInstruction

if TYPE_CHECKING:
    from moebius.policies import CoachPolicy

BASELINE_MODES = ("none", "ema")
_EMA_DECAY = 0.9


@dataclass(frozen=True)
class CoachBatch:
    """The m (instruction, coach reward) pairs from one round."""

    pairs: tuple[tuple[TaskInstruction, float], ...]

    def __post_init__(self):
        if not self.pairs:
            raise PolicyError("empty coach batch")
        for task, reward in self.pairs:
            if not math.isfinite(reward):
                raise NumericError(f"non-finite coach reward on task {task.id}")

    @property
    def m(self) -> int:
        return len(self.pairs)


@dataclass
class ReinforceState:
    """Running baseline state carried across rounds (ema mode only)."""

    ema: float = 0.0
    initialized: bool = False

    def baseline(self) -> float:
        return self.ema if self.initialized else 0.0

    def absorb(self, batch_mean: float) -> None:
        if self.initialized:
            self.ema = _EMA_DECAY * self.ema + (1.0 - _EMA_DECAY) * batch_mean
        else:
            self.ema = batch_mean
            self.initialized = True


@dataclass(frozen=True)
class ReinforceStats:
    """Diagnostics from one coach update."""

    objective: float
    entropy: float
    mean_reward: float
    baseline: float


def reinforce_update(coach: "CoachPolicy", batch: CoachBatch, lr: float,
                     entropy_coef: float = 0.0, baseline_mode: str = "none",
                     state: ReinforceState | None = None) -> ReinforceStats:
    """One ascent step of (1/m) sum (R_i - b) grad log pi(x_i) + entropy bonus.

    With baseline_mode="none" (the default) b = 0; with "ema" b is the running
    mean of past rounds' rewards, updated after this batch is consumed.
    """
    if baseline_mode not in BASELINE_MODES:
        raise PolicyError(f"unknown baseline_mode {baseline_mode!r}")
    if baseline_mode == "ema" and state is None:
        raise PolicyError("ema baseline needs a ReinforceState")

    baseline = state.baseline() if baseline_mode == "ema" else 0.0
    gradient: np.ndarray | None = None
    objective = 0.0
    for task, reward in batch.pairs:
        term = (reward - baseline) * coach.logprob_grad(task)
        gradient = term if gradient is None else gradient + term
        objective += reward * coach.logprob(task)
    assert gradient is not None
    gradient /= batch.m
    objective /= batch.m

    entropy = coach.entropy()
    if entropy_coef != 0.0:
        gradient = gradient + entropy_coef * coach.entropy_grad()
        objective += entropy_coef * entropy

    if not np.all(np.isfinite(gradient)):
        raise NumericError("non-finite REINFORCE gradient; aborting round")
    coach.apply_step(gradient, lr)

    mean_reward = sum(r for _, r in batch.pairs) / batch.m
    if baseline_mode == "ema":
        state.absorb(mean_reward)
    return ReinforceStats(objective=objective, entropy=entropy,
                          mean_reward=mean_reward, baseline=baseline)
