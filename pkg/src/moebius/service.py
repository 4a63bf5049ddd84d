"""Wire protocol and reference HTTP server for remote policy backends.

Four endpoints carry everything the training loop needs from a policy:
POST /v1/sample, POST /v1/logprob, POST /v1/update, GET /v1/snapshot.
Every request names its run, round, and an idempotency key; replaying a key
within a round returns the originally produced bytes, so retries can never
double-apply an update. Sampling is deterministic server-side because draws
are keyed by (seed, round, task id), the same derivation the in-process
policies use.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any
from urllib.parse import parse_qs, urlparse

import jsonschema
import numpy as np

from moebius.core import CapabilityError, MoebiusError, TaskInstruction
from moebius.policies import CoachPolicy, PlayerPolicy, PolicyParams

ROLES = ("coach", "player")


class WireError(MoebiusError):
    """Schema-invalid or semantically bad wire message."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


_TASK_SCHEMA = {
    "type": "object",
    "properties": {
        "id": {"type": "integer", "minimum": 0},
        "prompt": {"type": "string"},
        "difficulty": {"type": "integer", "minimum": 1},
        "instance_seed": {"type": "integer", "minimum": 0},
        "coach_trace": {"type": "integer", "minimum": 0},
        "round": {"type": "integer", "minimum": 0},
    },
    "required": ["id"],
    "additionalProperties": False,
}

_PARAMS_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"type": "string"},
        "dims": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "values": {"type": "array", "items": {"type": "number"}},
        "step_count": {"type": "integer", "minimum": 0},
    },
    "required": ["kind", "dims", "values", "step_count"],
    "additionalProperties": False,
}

SAMPLE_REQUEST_SCHEMA = {
    "type": "object",
    "properties": {
        "run_id": {"type": "string"},
        "round": {"type": "integer", "minimum": 0},
        "idempotency_key": {"type": "string"},
        "role": {"enum": list(ROLES)},
        "task": _TASK_SCHEMA,
        "n": {"type": "integer", "minimum": 1},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["run_id", "round", "idempotency_key", "role", "n"],
    "additionalProperties": False,
}

SAMPLE_RESPONSE_SCHEMA = {
    "type": "object",
    "properties": {
        "answers": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"text": {"type": "string"}, "logprob": {"type": "number"}},
                "required": ["text", "logprob"],
                "additionalProperties": False,
            },
        },
        "snapshot_version": {"type": "integer", "minimum": 0},
        "idempotency_key": {"type": "string"},
    },
    "required": ["answers", "snapshot_version", "idempotency_key"],
    "additionalProperties": False,
}

LOGPROB_REQUEST_SCHEMA = {
    "type": "object",
    "properties": {
        "run_id": {"type": "string"},
        "round": {"type": "integer", "minimum": 0},
        "idempotency_key": {"type": "string"},
        "role": {"enum": list(ROLES)},
        "task": _TASK_SCHEMA,
        "answers": {"type": "array", "items": {"type": "string"}},
    },
    "required": ["run_id", "round", "idempotency_key", "role", "task", "answers"],
    "additionalProperties": False,
}

LOGPROB_RESPONSE_SCHEMA = {
    "type": "object",
    "properties": {
        "logprobs": {"type": "array", "items": {"type": "number"}},
        "idempotency_key": {"type": "string"},
    },
    "required": ["logprobs", "idempotency_key"],
    "additionalProperties": False,
}

UPDATE_REQUEST_SCHEMA = {
    "type": "object",
    "properties": {
        "run_id": {"type": "string"},
        "round": {"type": "integer", "minimum": 0},
        "idempotency_key": {"type": "string"},
        "role": {"enum": list(ROLES)},
        "lr": {"type": "number"},
        "gradient": {
            "type": "object",
            "properties": {"values": {"type": "array", "items": {"type": "number"}}},
            "required": ["values"],
            "additionalProperties": False,
        },
        "batch": {"type": "object"},
        "restore": _PARAMS_SCHEMA,
    },
    "required": ["run_id", "round", "idempotency_key", "role"],
    "additionalProperties": False,
}

UPDATE_RESPONSE_SCHEMA = {
    "type": "object",
    "properties": {
        "snapshot_version": {"type": "integer", "minimum": 0},
        "idempotency_key": {"type": "string"},
    },
    "required": ["snapshot_version", "idempotency_key"],
    "additionalProperties": False,
}

SNAPSHOT_RESPONSE_SCHEMA = {
    "type": "object",
    "properties": {
        "role": {"enum": list(ROLES)},
        "params": _PARAMS_SCHEMA,
        "version": {"type": "integer", "minimum": 0},
    },
    "required": ["role", "params", "version"],
    "additionalProperties": False,
}

ENDPOINT_SCHEMAS = {
    "/v1/sample": (SAMPLE_REQUEST_SCHEMA, SAMPLE_RESPONSE_SCHEMA),
    "/v1/logprob": (LOGPROB_REQUEST_SCHEMA, LOGPROB_RESPONSE_SCHEMA),
    "/v1/update": (UPDATE_REQUEST_SCHEMA, UPDATE_RESPONSE_SCHEMA),
}


def validate_message(payload: dict[str, Any], schema: dict[str, Any]) -> dict[str, Any]:
    """Schema-check one wire message; returns it unchanged on success."""
    try:
        jsonschema.validate(payload, schema)
    except jsonschema.ValidationError as exc:
        raise WireError("invalid_message", exc.message) from exc
    return payload


def _check_update_payload(payload: dict[str, Any]) -> str:
    variants = [key for key in ("gradient", "batch", "restore") if key in payload]
    if len(variants) != 1:
        raise WireError("invalid_message",
                        "update needs exactly one of gradient|batch|restore")
    if variants[0] == "gradient" and "lr" not in payload:
        raise WireError("invalid_message", "gradient update needs lr")
    return variants[0]


def decode_task(payload: dict[str, Any]) -> TaskInstruction:
    try:
        return TaskInstruction.from_json(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise WireError("invalid_task", f"task object incomplete: {exc}") from exc


# ---------------------------------------------------------------------------
# Reference server
# ---------------------------------------------------------------------------

@dataclass
class _RoleState:
    policy: Any
    version: int = 0


class PolicyService:
    """In-process policy pair exposed over the wire protocol.

    Sample/logprob requests read the current snapshot concurrently; updates
    serialize behind a single-writer lock and bump the role's snapshot
    version. Responses are cached by (round, idempotency key), and replays
    return the original bytes.
    """

    def __init__(self, coach: CoachPolicy, player: PlayerPolicy, *,
                 host: str = "127.0.0.1", port: int = 0):
        self._roles = {"coach": _RoleState(coach), "player": _RoleState(player)}
        self._write_lock = threading.Lock()
        self._cache_lock = threading.Lock()
        self._idempotency: dict[int, dict[str, bytes]] = {}
        handler = _make_handler(self)
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "PolicyService":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    # -- idempotency cache ---------------------------------------------------

    def _cached(self, round_index: int, key: str) -> bytes | None:
        with self._cache_lock:
            return self._idempotency.get(round_index, {}).get(key)

    def _remember(self, round_index: int, key: str, body: bytes) -> None:
        # round 0 is the persistent lane clients use for update requests;
        # it survives pruning so retried updates can never double-apply
        with self._cache_lock:
            self._idempotency.setdefault(round_index, {})[key] = body
            stale = [r for r in self._idempotency if r != 0 and r < round_index - 1]
            for r in stale:
                del self._idempotency[r]

    # -- endpoint logic --------------------------------------------------------

    def handle_post(self, path: str, payload: dict[str, Any]) -> bytes:
        if path not in ENDPOINT_SCHEMAS:
            raise WireError("unknown_endpoint", f"no such endpoint {path}")
        validate_message(payload, ENDPOINT_SCHEMAS[path][0])
        round_index, key = payload["round"], payload["idempotency_key"]
        if path == "/v1/update":
            # check-and-apply must be one step or a retried update could
            # land twice
            with self._write_lock:
                cached = self._cached(round_index, key)
                if cached is not None:
                    return cached
                body = json.dumps(self._update(payload), sort_keys=True).encode()
                self._remember(round_index, key, body)
                return body
        cached = self._cached(round_index, key)
        if cached is not None:
            return cached
        handler = self._sample if path == "/v1/sample" else self._logprob
        body = json.dumps(handler(payload), sort_keys=True).encode()
        self._remember(round_index, key, body)
        return body

    def _sample(self, payload: dict[str, Any]) -> dict[str, Any]:
        role = payload["role"]
        state = self._roles[role]
        if role == "player":
            if "task" not in payload:
                raise WireError("invalid_message", "player sampling needs a task")
            task = decode_task(payload["task"])
            samples = state.policy.sample_answers(task, payload["n"])
            answers = [{"text": s.canonical_answer, "logprob": s.sampler_logprob}
                       for s in samples]
        else:
            slot = payload.get("task", {}).get("id")
            if slot is None:
                raise WireError("invalid_message",
                                "coach sampling needs task.id as the candidate slot")
            if payload["n"] != 1:
                raise WireError("invalid_message", "coach sampling draws one task per slot")
            task = state.policy.sample_task(payload["round"], int(slot))
            answers = [{"text": json.dumps(task.to_json(), sort_keys=True),
                        "logprob": state.policy.logprob(task)}]
        return {"answers": answers, "snapshot_version": state.version,
                "idempotency_key": payload["idempotency_key"]}

    def _logprob(self, payload: dict[str, Any]) -> dict[str, Any]:
        role = payload["role"]
        state = self._roles[role]
        task = decode_task(payload["task"])
        if role == "player":
            values = [float(v) for v in state.policy.logprobs(task, payload["answers"])]
        else:
            values = [state.policy.logprob(decode_task(json.loads(text)))
                      for text in payload["answers"]]
        return {"logprobs": values, "idempotency_key": payload["idempotency_key"]}

    def _update(self, payload: dict[str, Any]) -> dict[str, Any]:
        # caller holds the write lock
        variant = _check_update_payload(payload)
        state = self._roles[payload["role"]]
        if variant == "gradient":
            state.policy.apply_step(np.array(payload["gradient"]["values"],
                                             dtype=np.float64), payload["lr"])
        elif variant == "restore":
            state.policy.restore(PolicyParams.from_json(payload["restore"]))
        else:
            raise CapabilityError(
                "reference server applies explicit gradients only; "
                "batch-payload updates belong to training backends")
        state.version += 1
        return {"snapshot_version": state.version,
                "idempotency_key": payload["idempotency_key"]}

    def handle_snapshot(self, role: str) -> dict[str, Any]:
        if role not in self._roles:
            raise WireError("invalid_message", f"role must be one of {ROLES}, got {role!r}")
        state = self._roles[role]
        return {"role": role, "params": state.policy.snapshot().to_json(),
                "version": state.version}


def _make_handler(service: PolicyService) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # keep test output quiet
            pass

        def _send(self, status: int, body: bytes) -> None:
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_error_json(self, status: int, code: str, message: str) -> None:
            self._send(status, json.dumps(
                {"error": {"code": code, "message": message}}).encode())

        def do_POST(self):
            try:
                length = int(self.headers.get("Content-Length", "0"))
                try:
                    payload = json.loads(self.rfile.read(length))
                except json.JSONDecodeError as exc:
                    raise WireError("invalid_json", str(exc)) from exc
                if not isinstance(payload, dict):
                    raise WireError("invalid_message", "request body must be an object")
                self._send(200, service.handle_post(self.path, payload))
            except WireError as exc:
                self._send_error_json(400, exc.code, exc.message)
            except CapabilityError as exc:
                self._send_error_json(400, "unsupported_capability", str(exc))
            except MoebiusError as exc:
                self._send_error_json(400, "policy_error", str(exc))
            except Exception as exc:  # pragma: no cover - defensive
                self._send_error_json(500, "internal_error", str(exc))

        def do_GET(self):
            parsed = urlparse(self.path)
            if parsed.path != "/v1/snapshot":
                self._send_error_json(404, "unknown_endpoint", f"no such endpoint {parsed.path}")
                return
            role = parse_qs(parsed.query).get("role", [""])[0]
            try:
                self._send(200, json.dumps(service.handle_snapshot(role),
                                           sort_keys=True).encode())
            except WireError as exc:
                self._send_error_json(400, exc.code, exc.message)

    return Handler


def serve(coach: CoachPolicy, player: PlayerPolicy, bind: str = "127.0.0.1:0") -> PolicyService:
    """Start the reference service on ``host:port``; port 0 picks a free one."""
    host, _, port_text = bind.partition(":")
    try:
        port = int(port_text or "0")
    except ValueError as exc:
        raise MoebiusError(f"bad bind address {bind!r}") from exc
    return PolicyService(coach, player, host=host or "127.0.0.1", port=port).start()
