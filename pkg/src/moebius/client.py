"""Wire-backed coach and player policies.

Sampling, log-probabilities, and parameter updates go over the wire;
gradient/KL/entropy calculus runs on a local mirror rebuilt from the
server's snapshot (floats survive the JSON round trip exactly, so a run
driven through the reference server produces the same bits as an
in-process run). Transport failures surface as ``TransportError`` so the
orchestrator can abort the round cleanly, distinct from policy errors.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from typing import Any, Sequence

import numpy as np
import requests

from moebius.config import RunConfig
from moebius.core import AnswerSample, TaskInstruction, TransportError
from moebius.domain import ValidationSet
from moebius.policies import (
    CoachPolicy,
    PlayerPolicy,
    PolicyParams,
    SoftmaxCoach,
    SoftmaxPlayer,
    coach_from_params,
    player_from_params,
)

_RETRIABLE = (408, 429, 500, 502, 503, 504)


class Transport:
    """Tiny JSON-over-HTTP client with bounded retries on transient faults."""

    def __init__(self, base_url: str, timeout: float = 15.0, retries: int = 3):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries

    def _request(self, method: str, path: str, payload: dict[str, Any] | None = None,
                 params: dict[str, str] | None = None) -> dict[str, Any]:
        url = self.base_url + path
        last_error: Exception | None = None
        for attempt in range(self.retries):
            try:
                response = requests.request(method, url, json=payload, params=params,
                                            timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code in _RETRIABLE:
                last_error = TransportError(f"{url} -> {response.status_code}")
                continue
            if response.status_code != 200:
                detail = ""
                try:
                    detail = response.json().get("error", {}).get("message", "")
                except ValueError:
                    pass
                raise TransportError(f"{url} -> {response.status_code}: {detail}")
            try:
                return response.json()
            except ValueError as exc:
                raise TransportError(f"{url}: undecodable response body") from exc
        raise TransportError(f"{url}: retries exhausted ({last_error})")

    def post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        return self._request("POST", path, payload=payload)

    def get(self, path: str, params: dict[str, str]) -> dict[str, Any]:
        return self._request("GET", path, params=params)


def _answers_digest(task_id: int, answers: Sequence[str]) -> str:
    blob = json.dumps([task_id, list(answers)]).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class _RemoteBase:
    """State shared by both remote roles: transport, mirror, update counter."""

    role: str
    mirror_kind: type

    def __init__(self, transport: Transport, cfg: RunConfig, run_id: str):
        self._transport = transport
        self._cfg = cfg
        self._run_id = run_id
        self._mirror: SoftmaxCoach | SoftmaxPlayer | None = None
        self._update_counter = itertools.count()
        self._version = 0

    def _key(self, round_index: int, discriminator: str) -> str:
        # the snapshot version scopes read keys so a request repeated after
        # an update is a new request, not a cache replay
        return f"{self._run_id}:{round_index}:{self.role}:v{self._version}:{discriminator}"

    def _mirror_policy(self):
        if self._mirror is None:
            self._mirror = self._build_mirror(self.snapshot())
        return self._mirror

    def _build_mirror(self, params: PolicyParams):
        raise NotImplementedError

    def snapshot(self) -> PolicyParams:
        payload = self._transport.get("/v1/snapshot", {"role": self.role})
        self._version = payload["version"]
        return PolicyParams.from_json(payload["params"])

    def restore(self, params: PolicyParams) -> None:
        key = self._key(0, f"restore-{next(self._update_counter)}")
        payload = self._transport.post("/v1/update", {
            "run_id": self._run_id, "round": 0, "idempotency_key": key,
            "role": self.role, "restore": params.to_json()})
        self._version = payload["snapshot_version"]
        self._mirror = None

    def apply_step(self, gradient: np.ndarray, lr: float) -> None:
        gradient = np.asarray(gradient, dtype=np.float64)
        key = self._key(0, f"step-{next(self._update_counter)}")
        payload = self._transport.post("/v1/update", {
            "run_id": self._run_id, "round": 0, "idempotency_key": key,
            "role": self.role, "lr": float(lr),
            "gradient": {"values": [float(v) for v in gradient]}})
        self._version = payload["snapshot_version"]
        self._mirror = None


class RemotePlayerPolicy(_RemoteBase, PlayerPolicy):
    """PlayerPolicy implementation over the wire protocol."""

    role = "player"
    exactly_evaluable = True

    def _build_mirror(self, params: PolicyParams) -> SoftmaxPlayer:
        return player_from_params(params, self._cfg.domain, self._cfg.seed,
                                  self._cfg.player_temperature)

    def sample_answers(self, task: TaskInstruction, n: int) -> list[AnswerSample]:
        payload = self._transport.post("/v1/sample", {
            "run_id": self._run_id, "round": task.round,
            "idempotency_key": self._key(task.round, f"sample-{task.id}-{n}"),
            "role": "player", "task": task.to_json(), "n": n})
        return [AnswerSample(canonical_answer=entry["text"],
                             sampler_logprob=entry["logprob"], sample_index=j + 1)
                for j, entry in enumerate(payload["answers"])]

    def logprobs(self, task: TaskInstruction, answers: Sequence[str]) -> np.ndarray:
        payload = self._transport.post("/v1/logprob", {
            "run_id": self._run_id, "round": task.round,
            "idempotency_key": self._key(task.round,
                                         f"logprob-{_answers_digest(task.id, answers)}"),
            "role": "player", "task": task.to_json(), "answers": list(answers)})
        return np.array(payload["logprobs"], dtype=np.float64)

    # closed-form calculus comes from the snapshot mirror

    def dist(self, task: TaskInstruction) -> np.ndarray:
        return self._mirror_policy().dist(task)

    def grad_matrix(self, task: TaskInstruction) -> np.ndarray:
        return self._mirror_policy().grad_matrix(task)

    def logprob_grads(self, task: TaskInstruction, answers: Sequence[str]) -> np.ndarray:
        return self._mirror_policy().logprob_grads(task, answers)

    def kl_to(self, reference: PlayerPolicy, task: TaskInstruction) -> float:
        return self._mirror_policy().kl_to(reference, task)

    def entropy(self, task: TaskInstruction) -> float:
        return self._mirror_policy().entropy(task)

    def entropy_grad(self, task: TaskInstruction) -> np.ndarray:
        return self._mirror_policy().entropy_grad(task)

    def exact_accuracy(self, validation: ValidationSet) -> float:
        return self._mirror_policy().exact_accuracy(validation)


class RemoteCoachPolicy(_RemoteBase, CoachPolicy):
    """CoachPolicy implementation over the wire protocol.

    Proposed tasks come back JSON-encoded in the sample response's text
    field; the optional request task object carries the round-scoped
    candidate slot id the server derives its stream from.
    """

    role = "coach"

    def _build_mirror(self, params: PolicyParams) -> SoftmaxCoach:
        return coach_from_params(params, self._cfg.domain, self._cfg.seed)

    def sample_task(self, round_index: int, task_id: int) -> TaskInstruction:
        payload = self._transport.post("/v1/sample", {
            "run_id": self._run_id, "round": round_index,
            "idempotency_key": self._key(round_index, f"sample-{task_id}"),
            "role": "coach", "task": {"id": task_id}, "n": 1})
        return TaskInstruction.from_json(json.loads(payload["answers"][0]["text"]))

    def logprob(self, task: TaskInstruction) -> float:
        return self._mirror_policy().logprob(task)

    def logprob_grad(self, task: TaskInstruction) -> np.ndarray:
        return self._mirror_policy().logprob_grad(task)

    def entropy(self) -> float:
        return self._mirror_policy().entropy()

    def entropy_grad(self) -> np.ndarray:
        return self._mirror_policy().entropy_grad()


def remote_policy_pair(base_url: str, cfg: RunConfig, *, run_id: str = "run",
                       timeout: float = 15.0, retries: int = 3,
                       ) -> tuple[RemoteCoachPolicy, RemotePlayerPolicy]:
    """Connect both roles of a policy service."""
    transport = Transport(base_url, timeout=timeout, retries=retries)
    return (RemoteCoachPolicy(transport, cfg, run_id),
            RemotePlayerPolicy(transport, cfg, run_id))
