"""Pure-Python kernel implementations.

Reference twin of the compiled core in ``_core.pyx``. Every loop here mirrors
the compiled loop operation for operation (same accumulation order, same libm
calls), so the two backends produce bit-identical doubles and a run digests
the same whichever one is active. Keep the twins in lockstep when editing.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND = "pure"


def log_softmax(logits, temperature):
    """Log-probabilities of softmax(logits / temperature)."""
    values = np.ascontiguousarray(logits, dtype=np.float64).tolist()
    n = len(values)
    scaled = [v / temperature for v in values]
    peak = scaled[0]
    for k in range(1, n):
        if scaled[k] > peak:
            peak = scaled[k]
    total = 0.0
    for k in range(n):
        total += math.exp(scaled[k] - peak)
    lse = peak + math.log(total)
    return np.array([v - lse for v in scaled], dtype=np.float64)


def answer_logprobs(feat, theta, temperature):
    """Log-probabilities over the answer support for one task.

    ``feat`` is the (K, F) per-answer feature matrix; logits are feat @ theta.
    """
    feat_rows = np.ascontiguousarray(feat, dtype=np.float64).tolist()
    weights = np.ascontiguousarray(theta, dtype=np.float64).tolist()
    n_feat = len(weights)
    logits = []
    for row in feat_rows:
        acc = 0.0
        for f in range(n_feat):
            acc += weights[f] * row[f]
        logits.append(acc)
    return log_softmax(np.array(logits, dtype=np.float64), temperature)


def draw_categorical(logprobs, uniforms):
    """Map pre-drawn uniforms to category indices via the cumulative dist."""
    logp = np.ascontiguousarray(logprobs, dtype=np.float64).tolist()
    us = np.ascontiguousarray(uniforms, dtype=np.float64).tolist()
    n_cat = len(logp)
    cdf = []
    running = 0.0
    for k in range(n_cat):
        running += math.exp(logp[k])
        cdf.append(running)
    out = []
    for u in us:
        idx = 0
        while idx < n_cat - 1 and u >= cdf[idx]:
            idx += 1
        out.append(idx)
    return np.array(out, dtype=np.int64)


def rollout(feat, theta, temperature, uniforms):
    """One fused rollout: answer log-probs plus categorical draws."""
    logp = answer_logprobs(feat, theta, temperature)
    idx = draw_categorical(logp, uniforms)
    return logp, idx


def exact_truth_mean(feat_stack, theta, temperature, truth_idx):
    """Mean probability assigned to the ground-truth answer over a task stack.

    ``feat_stack`` is (V, K, F); ``truth_idx`` holds each task's correct
    answer index. This is the exact-evaluation inner loop.
    """
    stack = np.ascontiguousarray(feat_stack, dtype=np.float64)
    truths = np.ascontiguousarray(truth_idx, dtype=np.int64).tolist()
    n_tasks = stack.shape[0]
    total = 0.0
    for v in range(n_tasks):
        logp = answer_logprobs(stack[v], theta, temperature)
        total += math.exp(float(logp[truths[v]]))
    return total / n_tasks


def entropy_from_logprobs(logprobs):
    """Shannon entropy (natural log) of the distribution exp(logprobs)."""
    logp = np.ascontiguousarray(logprobs, dtype=np.float64).tolist()
    acc = 0.0
    for k in range(len(logp)):
        acc -= math.exp(logp[k]) * logp[k]
    return acc


def kl_from_logprobs(logp_p, logp_q):
    """Exact KL(p || q) from two aligned log-probability vectors."""
    ps = np.ascontiguousarray(logp_p, dtype=np.float64).tolist()
    qs = np.ascontiguousarray(logp_q, dtype=np.float64).tolist()
    acc = 0.0
    for k in range(len(ps)):
        acc += math.exp(ps[k]) * (ps[k] - qs[k])
    return acc
