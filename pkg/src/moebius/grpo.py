"""Group-normalized advantage estimation and the clipped-surrogate update.

Critic-free: advantages are rewards normalized within each instruction's
rollout group. The objective is the clipped importance-ratio surrogate minus
a KL penalty to a frozen reference policy, plus an optional entropy term,
all computed in closed form over the finite answer support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from moebius import _kernels as kernels
from moebius.core import NumericError, PolicyError, RolloutGroup, TaskInstruction

if TYPE_CHECKING:
    from moebius.config import GrpoConfig
    from moebius.policies import PlayerPolicy


def normalize_advantages(rewards: Sequence[float], std_eps: float) -> np.ndarray:
    """(r - mean) / (population std + eps) within one group.

    A zero-variance group gets all-zero advantages rather than values blown
    up by 1/eps; unanimous groups then contribute no surrogate gradient.
    """
    values = np.asarray(rewards, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise NumericError(f"advantage normalization needs >= 2 rewards, got {values.size}")
    mean = float(np.mean(values))
    std = float(math.sqrt(np.mean((values - mean) ** 2)))
    if std == 0.0:
        return np.zeros_like(values)
    return (values - mean) / (std + std_eps)


def clipped_surrogate(ratio: float, advantage: float, clip_eps: float) -> float:
    """min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)."""
    if not ratio > 0:
        raise NumericError(f"importance ratio must be positive, got {ratio}")
    clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    return min(ratio * advantage, clipped * advantage)


@dataclass(frozen=True)
class GrpoBatch:
    """One training batch: m instructions with their rollout groups.

    Sampling-time log-probabilities live on the samples and stay fixed across
    inner epochs, so epochs beyond the first exercise non-unit ratios.
    """

    instructions: tuple[TaskInstruction, ...]
    groups: tuple[RolloutGroup, ...]
    reference_version: str

    def __post_init__(self):
        if len(self.instructions) != len(self.groups):
            raise PolicyError("batch instruction/group count mismatch")
        for task, group in zip(self.instructions, self.groups):
            if task.id != group.instruction_id:
                raise PolicyError(f"group for instruction {group.instruction_id} "
                                  f"paired with task {task.id}")
            for sample in group.samples:
                if not math.isfinite(sample.sampler_logprob):
                    raise NumericError(f"non-finite sampling logprob on task {task.id}")

    @property
    def m(self) -> int:
        return len(self.instructions)


@dataclass(frozen=True)
class GrpoEval:
    """One objective/gradient evaluation plus its scalar diagnostics."""

    value: float
    gradient: np.ndarray
    surrogate: float
    kl: float
    entropy: float
    max_ratio_dev: float


@dataclass(frozen=True)
class GrpoUpdateStats:
    """Diagnostics from the final inner-epoch evaluation of one update."""

    objective: float
    surrogate: float
    kl: float
    entropy: float
    max_ratio_dev: float
    ratio_dev_by_epoch: tuple[float, ...]
    epochs: int


def grpo_objective(player: "PlayerPolicy", batch: GrpoBatch, reference: "PlayerPolicy",
                   cfg: "GrpoConfig", entropy_coef: float = 0.0) -> GrpoEval:
    """Objective value and analytic parameter gradient for the current player.

    Surrogate terms average over all (instruction, sample) pairs; the KL and
    entropy terms average per instruction. Where the clipped branch of the
    min is active the surrogate contributes no gradient, matching the
    piecewise structure of the clip.
    """
    if batch.m == 0:
        raise PolicyError("empty GRPO batch")
    surrogate_sum = 0.0
    sample_count = 0
    kl_sum = 0.0
    entropy_sum = 0.0
    max_ratio_dev = 0.0
    surrogate_grad: np.ndarray | None = None
    kl_grad_sum: np.ndarray | None = None
    entropy_grad_sum: np.ndarray | None = None

    for task, group in zip(batch.instructions, batch.groups):
        answers = [s.canonical_answer for s in group.samples]
        new_logps = player.logprobs(task, answers)
        grads = player.logprob_grads(task, answers)
        old_logps = np.array([s.sampler_logprob for s in group.samples])
        advantages = np.asarray(group.advantages, dtype=np.float64)
        if not (len(new_logps) == len(old_logps) == len(advantages) == grads.shape[0]):
            raise PolicyError(f"batch dimension mismatch on task {task.id}")

        ratios = np.exp(new_logps - old_logps)
        unclipped = ratios * advantages
        clipped = np.clip(ratios, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages
        surrogate_sum += float(np.sum(np.minimum(unclipped, clipped)))
        sample_count += len(answers)
        max_ratio_dev = max(max_ratio_dev, float(np.max(np.abs(ratios - 1.0))))
        flows = unclipped <= clipped
        term_grad = (flows * ratios * advantages) @ grads

        logp_full = player.dist(task)
        logq_full = reference.dist(task)
        if logq_full.shape != logp_full.shape:
            raise PolicyError(f"reference support mismatch on task {task.id}")
        gmat = player.grad_matrix(task)
        probs = np.exp(logp_full)
        kl_sum += kernels.kl_from_logprobs(logp_full, logq_full)
        kl_grad = (probs * (logp_full - logq_full)) @ gmat
        entropy_sum += kernels.entropy_from_logprobs(logp_full)
        entropy_grad = -(probs * logp_full) @ gmat

        if surrogate_grad is None:
            surrogate_grad = np.zeros_like(term_grad)
            kl_grad_sum = np.zeros_like(kl_grad)
            entropy_grad_sum = np.zeros_like(entropy_grad)
        surrogate_grad += term_grad
        kl_grad_sum += kl_grad
        entropy_grad_sum += entropy_grad

    m = batch.m
    surrogate = surrogate_sum / sample_count
    kl_mean = kl_sum / m
    entropy_mean = entropy_sum / m
    value = surrogate - cfg.kl_coef * kl_mean + entropy_coef * entropy_mean
    gradient = (surrogate_grad / sample_count
                - cfg.kl_coef * (kl_grad_sum / m)
                + entropy_coef * (entropy_grad_sum / m))
    return GrpoEval(value=value, gradient=gradient, surrogate=surrogate,
                    kl=kl_mean, entropy=entropy_mean, max_ratio_dev=max_ratio_dev)


def grpo_update(player: "PlayerPolicy", batch: GrpoBatch, reference: "PlayerPolicy",
                cfg: "GrpoConfig", lr: float, entropy_coef: float = 0.0) -> GrpoUpdateStats:
    """Run cfg.inner_epochs ascent steps on the batch; old logprobs stay fixed.

    Reported diagnostics come from the final epoch's pre-step evaluation.
    """
    last: GrpoEval | None = None
    ratio_devs: list[float] = []
    for _ in range(cfg.inner_epochs):
        last = grpo_objective(player, batch, reference, cfg, entropy_coef)
        if not np.all(np.isfinite(last.gradient)) or not math.isfinite(last.value):
            raise NumericError("non-finite GRPO gradient; aborting round")
        player.apply_step(last.gradient, lr)
        ratio_devs.append(last.max_ratio_dev)
    assert last is not None
    return GrpoUpdateStats(objective=last.value, surrogate=last.surrogate,
                           kl=last.kl, entropy=last.entropy,
                           max_ratio_dev=max(ratio_devs),
                           ratio_dev_by_epoch=tuple(ratio_devs),
                           epochs=cfg.inner_epochs)
