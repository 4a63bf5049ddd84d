# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core.

Bit-identical twin of ``pure.py``: same accumulation order, same libm calls,
so switching backends never changes a single double. Keep in lockstep with
the pure module when editing.
"""

from libc.math cimport exp, log

import numpy as np

BACKEND = "compiled"


cdef void _log_softmax_into(const double[::1] logits, double temperature,
                            double[::1] out) noexcept nogil:
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t k
    cdef double peak, total, lse
    for k in range(n):
        out[k] = logits[k] / temperature
    peak = out[0]
    for k in range(1, n):
        if out[k] > peak:
            peak = out[k]
    total = 0.0
    for k in range(n):
        total += exp(out[k] - peak)
    lse = peak + log(total)
    for k in range(n):
        out[k] = out[k] - lse


cdef void _answer_logprobs_into(const double[:, ::1] feat, const double[::1] theta,
                                double temperature, double[::1] out) noexcept nogil:
    cdef Py_ssize_t n_ans = feat.shape[0]
    cdef Py_ssize_t n_feat = feat.shape[1]
    cdef Py_ssize_t k, f
    cdef double acc
    for k in range(n_ans):
        acc = 0.0
        for f in range(n_feat):
            acc += theta[f] * feat[k, f]
        out[k] = acc
    _log_softmax_into(out, temperature, out)


cdef void _draw_into(const double[::1] logp, const double[::1] uniforms,
                     double[::1] cdf, long long[::1] out) noexcept nogil:
    cdef Py_ssize_t n_cat = logp.shape[0]
    cdef Py_ssize_t n_draw = uniforms.shape[0]
    cdef Py_ssize_t k, j, idx
    cdef double running = 0.0
    for k in range(n_cat):
        running += exp(logp[k])
        cdf[k] = running
    for j in range(n_draw):
        idx = 0
        while idx < n_cat - 1 and uniforms[j] >= cdf[idx]:
            idx += 1
        out[j] = idx


def log_softmax(logits, temperature):
    """Log-probabilities of softmax(logits / temperature)."""
    cdef const double[::1] src = np.ascontiguousarray(logits, dtype=np.float64)
    out = np.empty(src.shape[0], dtype=np.float64)
    cdef double[::1] dst = out
    cdef double t = temperature
    with nogil:
        _log_softmax_into(src, t, dst)
    return out


def answer_logprobs(feat, theta, temperature):
    """Log-probabilities over the answer support for one task."""
    cdef const double[:, ::1] f = np.ascontiguousarray(feat, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(theta, dtype=np.float64)
    out = np.empty(f.shape[0], dtype=np.float64)
    cdef double[::1] dst = out
    cdef double t = temperature
    with nogil:
        _answer_logprobs_into(f, w, t, dst)
    return out


def draw_categorical(logprobs, uniforms):
    """Map pre-drawn uniforms to category indices via the cumulative dist."""
    cdef const double[::1] logp = np.ascontiguousarray(logprobs, dtype=np.float64)
    cdef const double[::1] us = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef double[::1] cdf = np.empty(logp.shape[0], dtype=np.float64)
    out = np.empty(us.shape[0], dtype=np.int64)
    cdef long long[::1] dst = out
    with nogil:
        _draw_into(logp, us, cdf, dst)
    return out


def rollout(feat, theta, temperature, uniforms):
    """One fused rollout: answer log-probs plus categorical draws."""
    cdef const double[:, ::1] f = np.ascontiguousarray(feat, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const double[::1] us = np.ascontiguousarray(uniforms, dtype=np.float64)
    logp = np.empty(f.shape[0], dtype=np.float64)
    idx = np.empty(us.shape[0], dtype=np.int64)
    cdef double[::1] logp_v = logp
    cdef long long[::1] idx_v = idx
    cdef double[::1] cdf = np.empty(f.shape[0], dtype=np.float64)
    cdef double t = temperature
    with nogil:
        _answer_logprobs_into(f, w, t, logp_v)
        _draw_into(logp_v, us, cdf, idx_v)
    return logp, idx


def exact_truth_mean(feat_stack, theta, temperature, truth_idx):
    """Mean probability assigned to the ground-truth answer over a task stack."""
    cdef const double[:, :, ::1] stack = np.ascontiguousarray(feat_stack, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const long long[::1] truths = np.ascontiguousarray(truth_idx, dtype=np.int64)
    cdef double[::1] logp = np.empty(stack.shape[1], dtype=np.float64)
    cdef Py_ssize_t n_tasks = stack.shape[0]
    cdef Py_ssize_t v
    cdef double t = temperature
    cdef double total = 0.0
    with nogil:
        for v in range(n_tasks):
            _answer_logprobs_into(stack[v], w, t, logp)
            total += exp(logp[truths[v]])
    return total / n_tasks


def entropy_from_logprobs(logprobs):
    """Shannon entropy (natural log) of the distribution exp(logprobs)."""
    cdef const double[::1] logp = np.ascontiguousarray(logprobs, dtype=np.float64)
    cdef Py_ssize_t k
    cdef double acc = 0.0
    with nogil:
        for k in range(logp.shape[0]):
            acc -= exp(logp[k]) * logp[k]
    return acc


def kl_from_logprobs(logp_p, logp_q):
    """Exact KL(p || q) from two aligned log-probability vectors."""
    cdef const double[::1] ps = np.ascontiguousarray(logp_p, dtype=np.float64)
    cdef const double[::1] qs = np.ascontiguousarray(logp_q, dtype=np.float64)
    cdef Py_ssize_t k
    cdef double acc = 0.0
    with nogil:
        for k in range(ps.shape[0]):
            acc += exp(ps[k]) * (ps[k] - qs[k])
    return acc
