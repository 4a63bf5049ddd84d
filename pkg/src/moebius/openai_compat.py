"""Inference-only adapter for OpenAI-compatible chat-completions endpoints.

Supports the analysis workflows that need raw model text (difficulty
profiling, majority-vote consistency checks): generate n completions,
extract an answer from each, canonicalize, vote. Weight updates are not a
capability of chat endpoints, so requesting one raises before any request
is sent. The bearer token, when needed, comes from MOEBIUS_BEARER_TOKEN.
"""

from __future__ import annotations

import os
import re
import time
from typing import Any, Sequence

import requests

from moebius.core import CapabilityError, TransportError, canonicalize_answer
from moebius.rewards import majority_vote

BEARER_TOKEN_ENV = "MOEBIUS_BEARER_TOKEN"
_INT_TOKEN_RE = re.compile(r"-?\d+")
_RETRIABLE_STATUS = (408, 429, 500, 502, 503, 504)


def extract_boxed(text: str) -> str | None:
    """Last boxed{...} expression, brace-balanced; None when absent."""
    marker = "\\boxed{"
    start = text.rfind(marker)
    if start == -1:
        return None
    pos = start + len(marker)
    depth = 1
    while pos < len(text) and depth > 0:
        if text[pos] == "{":
            depth += 1
        elif text[pos] == "}":
            depth -= 1
        pos += 1
    if depth != 0:
        return None
    return text[start + len(marker):pos - 1]


def extract_answer(text: str, pattern: str | None = None) -> str:
    """Pull a canonical answer out of free-form model text.

    Heuristic: last boxed expression, else the last match of ``pattern``
    (first group if any), else the last integer token, else the empty
    string. The result is canonicalized.
    """
    boxed = extract_boxed(text)
    if boxed is not None:
        return canonicalize_answer(boxed)
    if pattern is not None:
        matches = list(re.finditer(pattern, text))
        if matches:
            last = matches[-1]
            return canonicalize_answer(last.group(1) if last.groups() else last.group(0))
    integers = _INT_TOKEN_RE.findall(text)
    if integers:
        return canonicalize_answer(integers[-1])
    return ""


def openai_compat_generate(endpoint: str, model: str, prompt: str, n: int = 1,
                           temperature: float = 0.7, top_p: float = 1.0,
                           max_tokens: int = 2048, *, timeout: float = 60.0,
                           retries: int = 3) -> list[str]:
    """Request n completions from a chat-completions endpoint.

    Transient failures (connection errors, 429, 5xx) retry with bounded
    exponential backoff; auth failures and malformed response bodies raise
    immediately.
    """
    url = endpoint.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(BEARER_TOKEN_ENV)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = {"model": model, "messages": [{"role": "user", "content": prompt}],
            "n": n, "temperature": temperature, "top_p": top_p,
            "max_tokens": max_tokens}

    last_error: Exception | None = None
    for attempt in range(retries):
        if attempt:
            time.sleep(0.5 * 2 ** (attempt - 1))
        try:
            response = requests.post(url, json=body, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            last_error = exc
            continue
        if response.status_code in (401, 403):
            raise TransportError(f"{url}: authentication failed ({response.status_code})")
        if response.status_code in _RETRIABLE_STATUS:
            last_error = TransportError(f"{url} -> {response.status_code}")
            continue
        if response.status_code != 200:
            raise TransportError(f"{url} -> {response.status_code}: {response.text[:200]}")
        try:
            choices = response.json()["choices"]
            texts = [choice["message"]["content"] for choice in choices]
        except (ValueError, KeyError, TypeError) as exc:
            raise TransportError(f"{url}: malformed completion body: {exc}") from exc
        if len(texts) != n:
            raise TransportError(f"{url}: asked for {n} completions, got {len(texts)}")
        return texts
    raise TransportError(f"{url}: retries exhausted ({last_error})")


def consistency_profile(texts: Sequence[str], pattern: str | None = None) -> dict[str, Any]:
    """Majority-vote profile of raw completions: pseudo-label and agreement.

    The agreement fraction is the same consistency score the difficulty
    filter uses, so this is the inference-only way to band-check a task.
    """
    answers = [extract_answer(text, pattern) for text in texts]
    vote = majority_vote(answers)
    agreement = sum(1 for a in answers if a == vote.pseudo_label) / len(answers)
    return {"pseudo_label": vote.pseudo_label, "acc": agreement,
            "vote_counts": vote.vote_counts, "tie_broken": vote.tie_broken,
            "answers": answers}


class OpenAICompatBackend:
    """Thin handle pairing an endpoint with a model name.

    Inference only: generation works, weight updates are a hard capability
    error raised before any network traffic.
    """

    def __init__(self, endpoint: str, model: str, *, temperature: float = 0.7,
                 top_p: float = 1.0, max_tokens: int = 2048, timeout: float = 60.0,
                 retries: int = 3):
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.top_p = top_p
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.retries = retries

    def generate(self, prompt: str, n: int = 1) -> list[str]:
        return openai_compat_generate(self.endpoint, self.model, prompt, n,
                                      self.temperature, self.top_p, self.max_tokens,
                                      timeout=self.timeout, retries=self.retries)

    def update(self, *_args, **_kwargs):
        raise CapabilityError("chat-completions backends cannot apply weight updates")
