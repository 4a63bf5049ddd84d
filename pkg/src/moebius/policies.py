"""Coach and player policy interfaces plus finite-support softmax versions.

The concrete policies are small enough that log-probabilities, entropies,
KL divergences, and their gradients are all closed form; everything numeric
routes through the kernel backend so results are identical whichever kernel
implementation is active.
"""

from __future__ import annotations

import hashlib
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from moebius import _kernels as kernels
from moebius.core import (
    LANE_COACH_DRAW,
    LANE_ROLLOUT,
    AnswerSample,
    CapabilityError,
    NumericError,
    PolicyError,
    TaskInstruction,
    derive_rng,
)
from moebius.domain import FEAT_TRUTH, DomainSpec, ValidationSet, feature_matrix, generate_task

KIND_COACH = "softmax_coach"
KIND_PLAYER = "softmax_player"


@dataclass(frozen=True)
class PolicyParams:
    """Flat parameter snapshot; the JSON checkpoint format for any policy."""

    kind: str
    dims: tuple[int, ...]
    values: tuple[float, ...]
    step_count: int

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind, "dims": list(self.dims),
                "values": list(self.values), "step_count": self.step_count}

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> "PolicyParams":
        try:
            return cls(kind=str(payload["kind"]), dims=tuple(int(d) for d in payload["dims"]),
                       values=tuple(float(v) for v in payload["values"]),
                       step_count=int(payload["step_count"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise PolicyError(f"malformed policy checkpoint: missing/bad field {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def apply_gradient_step(values: np.ndarray, gradient: np.ndarray, lr: float) -> np.ndarray:
    """Single ascent step; shared by local policies and the wire server so
    both sides produce the same bits."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != values.shape:
        raise PolicyError(f"gradient shape {gradient.shape} != params shape {values.shape}")
    if not np.all(np.isfinite(gradient)):
        raise NumericError("non-finite gradient")
    return values + lr * gradient


class CoachPolicy(ABC):
    """Task-proposing policy over a discrete action support."""

    @abstractmethod
    def sample_task(self, round_index: int, task_id: int) -> TaskInstruction: ...

    @abstractmethod
    def logprob(self, task: TaskInstruction) -> float: ...

    @abstractmethod
    def logprob_grad(self, task: TaskInstruction) -> np.ndarray: ...

    @abstractmethod
    def entropy(self) -> float: ...

    @abstractmethod
    def entropy_grad(self) -> np.ndarray: ...

    @abstractmethod
    def apply_step(self, gradient: np.ndarray, lr: float) -> None: ...

    @abstractmethod
    def snapshot(self) -> PolicyParams: ...

    @abstractmethod
    def restore(self, params: PolicyParams) -> None: ...


class PlayerPolicy(ABC):
    """Task-solving policy over a finite answer support.

    ``exactly_evaluable`` backends expose the full answer distribution, which
    unlocks exact KL, closed-form validation accuracy, and analytic gradients.
    """

    exactly_evaluable: bool = False

    @abstractmethod
    def sample_answers(self, task: TaskInstruction, n: int) -> list[AnswerSample]: ...

    @abstractmethod
    def logprobs(self, task: TaskInstruction, answers: Sequence[str]) -> np.ndarray: ...

    @abstractmethod
    def apply_step(self, gradient: np.ndarray, lr: float) -> None: ...

    @abstractmethod
    def snapshot(self) -> PolicyParams: ...

    @abstractmethod
    def restore(self, params: PolicyParams) -> None: ...

    def dist(self, task: TaskInstruction) -> np.ndarray:
        raise CapabilityError("backend cannot enumerate its answer distribution")

    def grad_matrix(self, task: TaskInstruction) -> np.ndarray:
        raise CapabilityError("backend has no analytic log-probability gradient")

    def logprob_grads(self, task: TaskInstruction, answers: Sequence[str]) -> np.ndarray:
        raise CapabilityError("backend has no analytic log-probability gradient")

    def kl_to(self, reference: "PlayerPolicy", task: TaskInstruction) -> float:
        raise CapabilityError("backend cannot compute KL")

    def entropy(self, task: TaskInstruction) -> float:
        raise CapabilityError("backend cannot compute entropy")

    def entropy_grad(self, task: TaskInstruction) -> np.ndarray:
        raise CapabilityError("backend cannot compute entropy gradients")

    def exact_accuracy(self, validation: ValidationSet) -> float:
        raise CapabilityError("backend is not exactly evaluable")


class SoftmaxCoach(CoachPolicy):
    """Softmax distribution over difficulty levels; instance content uniform.

    The sampled difficulty index is the full action trace, so the policy
    log-probability (and its REINFORCE gradient) is exact; the instance seed
    contributes only a constant and stays out of the gradient.
    """

    def __init__(self, psi: np.ndarray, spec: DomainSpec, seed: int):
        psi = np.asarray(psi, dtype=np.float64).copy()
        if psi.shape != (spec.D,):
            raise PolicyError(f"coach logits must have shape ({spec.D},), got {psi.shape}")
        self.psi = psi
        self.spec = spec
        self.seed = seed
        self.step_count = 0

    def _logp(self) -> np.ndarray:
        return kernels.log_softmax(self.psi, 1.0)

    def sample_task(self, round_index: int, task_id: int) -> TaskInstruction:
        rng = derive_rng(self.seed, round_index, task_id, LANE_COACH_DRAW)
        uniform = rng.random(1)
        trace = int(kernels.draw_categorical(self._logp(), uniform)[0])
        instance_seed = int(rng.integers(0, 2**63))
        return generate_task(self.spec, trace + 1, instance_seed,
                             round_index=round_index, task_id=task_id, coach_trace=trace)

    def _check_trace(self, task: TaskInstruction) -> int:
        if not 0 <= task.coach_trace < self.spec.D:
            raise PolicyError(f"task difficulty trace {task.coach_trace} outside support")
        return task.coach_trace

    def logprob(self, task: TaskInstruction) -> float:
        return float(self._logp()[self._check_trace(task)])

    def logprob_grad(self, task: TaskInstruction) -> np.ndarray:
        trace = self._check_trace(task)
        grad = -np.exp(self._logp())
        grad[trace] += 1.0
        return grad

    def entropy(self) -> float:
        return kernels.entropy_from_logprobs(self._logp())

    def entropy_grad(self) -> np.ndarray:
        logp = self._logp()
        probs = np.exp(logp)
        return -probs * (logp + self.entropy())

    def apply_step(self, gradient: np.ndarray, lr: float) -> None:
        self.psi = apply_gradient_step(self.psi, gradient, lr)
        self.step_count += 1

    def snapshot(self) -> PolicyParams:
        return PolicyParams(kind=KIND_COACH, dims=(self.spec.D,),
                            values=tuple(float(v) for v in self.psi),
                            step_count=self.step_count)

    def restore(self, params: PolicyParams) -> None:
        if params.kind != KIND_COACH or params.dims != (self.spec.D,):
            raise PolicyError(f"cannot restore coach from {params.kind}{params.dims}")
        self.psi = np.array(params.values, dtype=np.float64)
        self.step_count = params.step_count


class SoftmaxPlayer(PlayerPolicy):
    """Linear-feature softmax over the K-answer support, exactly evaluable."""

    exactly_evaluable = True

    def __init__(self, theta: np.ndarray, temperature: float, spec: DomainSpec, seed: int):
        theta = np.asarray(theta, dtype=np.float64).copy()
        if theta.shape != (spec.num_features,):
            raise PolicyError(f"player weights must have shape ({spec.num_features},), "
                              f"got {theta.shape}")
        if not temperature > 0:
            raise PolicyError(f"temperature must be > 0, got {temperature}")
        self.theta = theta
        self.temperature = temperature
        self.spec = spec
        self.seed = seed
        self.step_count = 0

    def dist(self, task: TaskInstruction) -> np.ndarray:
        feat = feature_matrix(self.spec, task)
        logp = kernels.answer_logprobs(feat, self.theta, self.temperature)
        if not np.all(np.isfinite(logp)):
            raise NumericError(f"non-finite answer logits on task {task.id}")
        return logp

    def sample_answers(self, task: TaskInstruction, n: int) -> list[AnswerSample]:
        if n < 1:
            raise PolicyError(f"need n >= 1 rollouts, got {n}")
        feat = feature_matrix(self.spec, task)
        rng = derive_rng(self.seed, task.round, task.id, LANE_ROLLOUT)
        uniforms = rng.random(n)
        logp, idx = kernels.rollout(feat, self.theta, self.temperature, uniforms)
        if not np.all(np.isfinite(logp)):
            raise NumericError(f"non-finite answer logits on task {task.id}")
        return [AnswerSample(canonical_answer=str(int(y)),
                             sampler_logprob=float(logp[y]),
                             sample_index=j + 1)
                for j, y in enumerate(idx)]

    def _answer_indices(self, answers: Sequence[str]) -> np.ndarray:
        indices = []
        for answer in answers:
            try:
                y = int(answer)
            except ValueError:
                raise PolicyError(f"answer {answer!r} outside the task support")
            if not 0 <= y < self.spec.K:
                raise PolicyError(f"answer {answer!r} outside the task support")
            indices.append(y)
        return np.array(indices, dtype=np.int64)

    def logprobs(self, task: TaskInstruction, answers: Sequence[str]) -> np.ndarray:
        return self.dist(task)[self._answer_indices(answers)]

    def grad_matrix(self, task: TaskInstruction) -> np.ndarray:
        """Rows are d log p(y) / d theta for each answer y in the support."""
        feat = feature_matrix(self.spec, task)
        probs = np.exp(self.dist(task))
        fbar = probs @ feat
        return (feat - fbar) / self.temperature

    def logprob_grads(self, task: TaskInstruction, answers: Sequence[str]) -> np.ndarray:
        return self.grad_matrix(task)[self._answer_indices(answers)]

    def kl_to(self, reference: PlayerPolicy, task: TaskInstruction) -> float:
        logp = self.dist(task)
        logq = reference.dist(task)
        if logq.shape != logp.shape:
            raise PolicyError(f"answer support mismatch: {logp.shape} vs {logq.shape}")
        return kernels.kl_from_logprobs(logp, logq)

    def entropy(self, task: TaskInstruction) -> float:
        return kernels.entropy_from_logprobs(self.dist(task))

    def entropy_grad(self, task: TaskInstruction) -> np.ndarray:
        logp = self.dist(task)
        probs = np.exp(logp)
        return -(probs * logp) @ self.grad_matrix(task)

    def exact_accuracy(self, validation: ValidationSet) -> float:
        return kernels.exact_truth_mean(validation.feature_stack, self.theta,
                                        self.temperature, validation.truth_indices)

    def apply_step(self, gradient: np.ndarray, lr: float) -> None:
        self.theta = apply_gradient_step(self.theta, gradient, lr)
        self.step_count += 1

    def snapshot(self) -> PolicyParams:
        return PolicyParams(kind=KIND_PLAYER, dims=(self.spec.num_features,),
                            values=tuple(float(v) for v in self.theta),
                            step_count=self.step_count)

    def restore(self, params: PolicyParams) -> None:
        if params.kind != KIND_PLAYER or params.dims != (self.spec.num_features,):
            raise PolicyError(f"cannot restore player from {params.kind}{params.dims}")
        self.theta = np.array(params.values, dtype=np.float64)
        self.step_count = params.step_count


# ---------------------------------------------------------------------------
# Construction helpers
# ---------------------------------------------------------------------------

def make_initial_coach(spec: DomainSpec, seed: int,
                       init_logits: Sequence[float] | None = None) -> SoftmaxCoach:
    psi = np.zeros(spec.D) if init_logits is None else np.asarray(init_logits, dtype=np.float64)
    return SoftmaxCoach(psi, spec, seed)


def make_initial_player(spec: DomainSpec, seed: int, *, truth_weight: float = 0.5,
                        temperature: float = 1.0) -> SoftmaxPlayer:
    theta = np.zeros(spec.num_features)
    theta[FEAT_TRUTH] = truth_weight
    return SoftmaxPlayer(theta, temperature, spec, seed)


def coach_from_params(params: PolicyParams, spec: DomainSpec, seed: int) -> SoftmaxCoach:
    coach = make_initial_coach(spec, seed)
    coach.restore(params)
    return coach


def player_from_params(params: PolicyParams, spec: DomainSpec, seed: int,
                       temperature: float) -> SoftmaxPlayer:
    player = make_initial_player(spec, seed, temperature=temperature)
    player.restore(params)
    return player


# ---------------------------------------------------------------------------
# Functional views of the policy operations (mirrors the optimizer call sites)
# ---------------------------------------------------------------------------

def coach_logprob_grad(coach: CoachPolicy, task: TaskInstruction) -> np.ndarray:
    """onehot(sampled difficulty) - softmax(psi); components sum to zero."""
    return coach.logprob_grad(task)


def coach_entropy(coach: CoachPolicy) -> float:
    return coach.entropy()


def exact_kl(player: PlayerPolicy, reference: PlayerPolicy, task: TaskInstruction) -> float:
    """Closed-form KL(player || reference) over the task's answer support."""
    return player.kl_to(reference, task)


def player_sample_answers(player: PlayerPolicy, task: TaskInstruction, n: int) -> list[AnswerSample]:
    return player.sample_answers(task, n)


def sampled_kl(logp_self: Sequence[float], logp_other: Sequence[float]) -> float:
    """Monte Carlo KL estimate mean(log p - log q) over samples drawn from p.

    The fallback for backends that cannot enumerate their answer support;
    exactly-evaluable policies use the closed form instead.
    """
    ps = np.asarray(logp_self, dtype=np.float64)
    qs = np.asarray(logp_other, dtype=np.float64)
    if ps.shape != qs.shape or ps.ndim != 1 or ps.size == 0:
        raise PolicyError("sampled_kl needs two aligned nonempty logprob vectors")
    return float(np.mean(ps - qs))
