"""Numeric kernel backend selection.

The compiled core is preferred when its extension module imported cleanly;
otherwise the pure-Python twin takes over. Set ``MOEBIUS_PURE_PYTHON=1`` to
force the pure backend (used by the equivalence tests and the benchmark).
Both backends are bit-identical by construction, so the choice never changes
results, only speed.
"""

from __future__ import annotations

import os

from moebius._kernels import pure as _pure

if os.environ.get("MOEBIUS_PURE_PYTHON"):
    _impl = _pure
else:
    try:
        from moebius._kernels import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pure

BACKEND: str = _impl.BACKEND

log_softmax = _impl.log_softmax
answer_logprobs = _impl.answer_logprobs
draw_categorical = _impl.draw_categorical
rollout = _impl.rollout
exact_truth_mean = _impl.exact_truth_mean
entropy_from_logprobs = _impl.entropy_from_logprobs
kl_from_logprobs = _impl.kl_from_logprobs

__all__ = ["BACKEND", "log_softmax", "answer_logprobs", "draw_categorical",
           "rollout", "exact_truth_mean", "entropy_from_logprobs",
           "kl_from_logprobs"]
