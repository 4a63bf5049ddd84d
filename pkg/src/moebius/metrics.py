"""Metrics stream (JSONL), schema validation, digests, and the replay audit.

One JSON object per line, canonical key order, no timestamps: two runs with
the same config must produce byte-identical files. The audit re-derives every
recorded identity (accuracy chaining, delta, coach-reward product, filter
counts) from the file alone and reports the first violated check per line.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import jsonschema

from moebius.core import MoebiusError, RoundRecord

_STATS_SCHEMA = {
    "type": "object",
    "properties": {
        "candidates_sampled": {"type": "integer", "minimum": 0},
        "rejected_too_easy": {"type": "integer", "minimum": 0},
        "rejected_too_hard": {"type": "integer", "minimum": 0},
        "fallback_used": {"type": "boolean"},
        "zero_variance_groups": {"type": "integer", "minimum": 0},
    },
    "required": ["candidates_sampled", "rejected_too_easy", "rejected_too_hard",
                 "fallback_used", "zero_variance_groups"],
    "additionalProperties": False,
}

_LOSS_SCHEMA = {
    "type": "object",
    "properties": {key: {"type": "number"} for key in
                   ("player_objective", "player_surrogate", "player_kl",
                    "player_entropy", "max_ratio_dev", "coach_objective",
                    "coach_entropy")},
    "required": ["player_objective", "player_surrogate", "player_kl",
                 "player_entropy", "max_ratio_dev", "coach_objective",
                 "coach_entropy"],
    "additionalProperties": False,
}

ROUND_RECORD_SCHEMA = {
    "type": "object",
    "properties": {
        "round": {"type": "integer", "minimum": 0},
        "instruction_ids": {"type": "array", "items": {"type": "integer"}},
        "acc_pre": {"type": "number", "minimum": 0, "maximum": 1},
        "acc_post": {"type": "number", "minimum": 0, "maximum": 1},
        "delta": {"type": "number"},
        "player_rewards": {"type": "array", "items": {"type": "number"}},
        "coach_rewards": {"type": "array", "items": {"type": "number"}},
        "filter_stats": _STATS_SCHEMA,
        "loss_stats": _LOSS_SCHEMA,
    },
    "required": ["round", "instruction_ids", "acc_pre", "acc_post", "delta",
                 "player_rewards", "coach_rewards", "filter_stats", "loss_stats"],
    "additionalProperties": False,
}

ABORT_RECORD_SCHEMA = {
    "type": "object",
    "properties": {
        "round": {"type": "integer", "minimum": 0},
        "aborted": {"const": True},
        "error": {"type": "string"},
    },
    "required": ["round", "aborted", "error"],
    "additionalProperties": False,
}


def encode_line(payload: dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


class MetricsWriter:
    """Append-only JSONL writer, flushed per record for crash safety."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8")

    def write_record(self, record: RoundRecord) -> None:
        self._write(record.to_json())

    def write_abort(self, round_index: int, error: str) -> None:
        self._write({"round": round_index, "aborted": True, "error": error})

    def _write(self, payload: dict[str, Any]) -> None:
        self._fh.write(encode_line(payload) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def read_lines(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield (1-based line number, parsed object); malformed JSON is an error."""
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise MoebiusError(f"{path}:{lineno}: malformed JSONL: {exc}") from exc


def read_records(path: str | Path) -> list[RoundRecord]:
    records = []
    for _, payload in read_lines(path):
        if payload.get("aborted"):
            continue
        jsonschema.validate(payload, ROUND_RECORD_SCHEMA)
        records.append(RoundRecord.from_json(payload))
    return records


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Replay audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    round: int
    check: str
    detail: str

    def to_json(self) -> dict[str, Any]:
        return {"round": self.round, "check": self.check, "detail": self.detail}


@dataclass(frozen=True)
class AuditReport:
    lines: int
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict[str, Any]:
        return {"lines": self.lines, "ok": self.ok,
                "violations": [v.to_json() for v in self.violations]}


def _first_violation(payload: dict[str, Any], prev_acc_post: float | None) -> Violation | None:
    """Checks run in a fixed order; only the first failure per line reports.

    Order: accuracy chain, delta identity, coach-reward product, filter
    counts. A single-field fault therefore maps to a single violation.
    """
    round_index = payload["round"]
    if prev_acc_post is not None and payload["acc_pre"] != prev_acc_post:
        return Violation(round_index, "acc_chain",
                         f"acc_pre {payload['acc_pre']!r} != previous acc_post {prev_acc_post!r}")
    if payload["delta"] != payload["acc_post"] - payload["acc_pre"]:
        return Violation(round_index, "delta_identity",
                         f"delta {payload['delta']!r} != acc_post - acc_pre")
    for i, (pr, cr) in enumerate(zip(payload["player_rewards"], payload["coach_rewards"])):
        if cr != pr * payload["delta"]:
            return Violation(round_index, "coach_product",
                             f"coach_rewards[{i}] {cr!r} != player_rewards[{i}] * delta")
    stats = payload["filter_stats"]
    expected = (len(payload["instruction_ids"]) + stats["rejected_too_easy"]
                + stats["rejected_too_hard"])
    if stats["candidates_sampled"] != expected:
        return Violation(round_index, "filter_counts",
                         f"candidates_sampled {stats['candidates_sampled']} != "
                         f"m + rejected counts {expected}")
    if not (len(payload["instruction_ids"]) == len(payload["player_rewards"])
            == len(payload["coach_rewards"])):
        return Violation(round_index, "batch_lengths",
                         "instruction/player/coach vector lengths differ")
    return None


def replay_audit(path: str | Path) -> AuditReport:
    """Re-derive all recorded identities from a metrics file."""
    violations: list[Violation] = []
    prev_acc_post: float | None = None
    lines = 0
    for lineno, payload in read_lines(path):
        lines += 1
        if isinstance(payload, dict) and payload.get("aborted"):
            try:
                jsonschema.validate(payload, ABORT_RECORD_SCHEMA)
            except jsonschema.ValidationError as exc:
                violations.append(Violation(int(payload.get("round", -1)), "schema",
                                            f"line {lineno}: {exc.message}"))
            continue
        try:
            jsonschema.validate(payload, ROUND_RECORD_SCHEMA)
        except jsonschema.ValidationError as exc:
            violations.append(Violation(int(payload.get("round", -1)) if isinstance(payload, dict) else -1,
                                        "schema", f"line {lineno}: {exc.message}"))
            continue
        violation = _first_violation(payload, prev_acc_post)
        if violation is not None:
            violations.append(violation)
        prev_acc_post = payload["acc_post"]
    return AuditReport(lines=lines, violations=tuple(violations))


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

_CSV_COLUMNS = ["round", "acc_pre", "acc_post", "delta", "mean_player_reward",
                "mean_coach_reward", "candidates_sampled", "rejected_too_easy",
                "rejected_too_hard", "fallback_used", "zero_variance_groups",
                "player_objective", "player_surrogate", "player_kl",
                "player_entropy", "max_ratio_dev", "coach_objective",
                "coach_entropy"]


def export_csv(metrics_path: str | Path, csv_path: str | Path) -> int:
    """Convert a metrics stream into a flat CSV; returns the row count."""
    rows = 0
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_COLUMNS)
        writer.writeheader()
        for _, payload in read_lines(metrics_path):
            if payload.get("aborted"):
                continue
            rewards = payload["player_rewards"]
            coach_rewards = payload["coach_rewards"]
            row = {
                "round": payload["round"],
                "acc_pre": payload["acc_pre"],
                "acc_post": payload["acc_post"],
                "delta": payload["delta"],
                "mean_player_reward": sum(rewards) / len(rewards) if rewards else "",
                "mean_coach_reward": sum(coach_rewards) / len(coach_rewards) if coach_rewards else "",
                **payload["filter_stats"],
                **payload["loss_stats"],
            }
            writer.writerow(row)
            rows += 1
    return rows
