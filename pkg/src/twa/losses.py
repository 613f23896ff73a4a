"""Sequence losses over realized-token log-probabilities, with analytic gradients.

Every loss returns a :class:`LossReport` whose ``grad_logp`` holds
dL/d(log p_t) for each token it was given. Chaining to logits is done by the
model (``grad_logits = grad_logp * (onehot - softmax)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tokenize_align import TokenWeightVector

UL_CLAMP = 1e-7
LN2 = math.log(2.0)


@dataclass
class LossReport:
    value: float
    grad_logp: np.ndarray


def log1mexp(s: float) -> float:
    """log(1 - exp(s)) for s < 0, switching branches at -ln 2 for accuracy."""
    if not s < 0:
        raise ValueError(f"log1mexp requires s < 0, got {s}")
    if s > -LN2:
        return math.log(-math.expm1(s))
    return math.log1p(-math.exp(s))


def _as_logp(logp) -> np.ndarray:
    return np.atleast_1d(np.asarray(logp, dtype=np.float64))


def cross_entropy_loss(logp) -> LossReport:
    """Plain teacher-forced CE: -sum(log p_t)."""
    logp = _as_logp(logp)
    return LossReport(-float(np.sum(logp)), -np.ones_like(logp))


def twa_error_span_loss(logp, w: float) -> LossReport:
    """Span unlikelihood ``-|w| log(1 - p_span)`` with ``p_span = exp(sum log p_t)``.

    The span log-prob is clamped to ``-1e-7`` from above, and the gradient is
    evaluated at the clamped point. Every token in the span receives the
    same dL/d(log p_t) = dL/dS.
    """
    logp = _as_logp(logp)
    scale = abs(w)
    s = min(float(np.sum(logp)), -UL_CLAMP)
    value = -scale * log1mexp(s)
    # d/dS[-log(1 - e^S)] = e^S / (1 - e^S) = 1 / expm1(-S)
    grad = scale / math.expm1(-s)
    return LossReport(value, np.full_like(logp, grad))


def twa_non_error_span_loss(logp, off_trajectory: bool) -> LossReport:
    logp = _as_logp(logp)
    if off_trajectory:
        return LossReport(0.0, np.zeros_like(logp))
    return cross_entropy_loss(logp)


def nl_span_loss(logp, w: float, scaled: bool = True) -> LossReport:
    """Negative likelihood on a span: ``|w| * log p_span`` (minimized, unbounded below)."""
    logp = _as_logp(logp)
    scale = abs(w) if scaled else 1.0
    return LossReport(scale * float(np.sum(logp)), np.full_like(logp, scale))


def twa_sequence_loss(
    weights: TokenWeightVector,
    logp,
    error_loss: str = "ul",
    nl_scaled: bool = True,
) -> LossReport:
    """Sum of span losses over the weight grouping of one sequence.

    ``error_loss`` selects the treatment of negative-weight spans: ``"ul"``
    (span unlikelihood), ``"nl"`` (negative likelihood) or ``"ignore"``
    (dropped from the loss, used for the non-error-only ablation).
    """
    logp = _as_logp(logp)
    if len(logp) != len(weights):
        raise ValueError(f"{len(weights)} weights for {len(logp)} log-probs")
    grad = np.zeros_like(logp)
    value = 0.0
    for start, end, w in weights.spans:
        seg = logp[start:end]
        if w < 0:
            if error_loss == "ul":
                rep = twa_error_span_loss(seg, w)
            elif error_loss == "nl":
                rep = nl_span_loss(seg, w, scaled=nl_scaled)
            elif error_loss == "ignore":
                continue
            else:
                raise ValueError(f"unknown error_loss {error_loss!r}")
        else:
            rep = twa_non_error_span_loss(seg, off_trajectory=(w == 0))
        value += rep.value
        grad[start:end] = rep.grad_logp
    return LossReport(value, grad)


def twa_seq_baseline_loss(has_error: bool, logp) -> LossReport:
    """Whole-sequence unlikelihood (|w| = 1) if the output has any error, else CE."""
    if has_error:
        return twa_error_span_loss(logp, -1.0)
    return cross_entropy_loss(logp)


def _log_sigmoid(z: float) -> float:
    return -float(np.logaddexp(0.0, -z))


def dpo_loss(
    logp_w: float,
    logp_l: float,
    ref_logp_w: float,
    ref_logp_l: float,
    beta: float = 0.1,
) -> LossReport:
    """DPO on summed sequence log-probs.

    ``grad_logp`` is ``[dL/dlogp_w, dL/dlogp_l]``; the reference terms are
    constants.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    z = beta * ((logp_w - ref_logp_w) - (logp_l - ref_logp_l))
    value = -_log_sigmoid(z)
    sig_neg = math.exp(_log_sigmoid(-z))  # sigma(-z)
    return LossReport(value, np.array([-beta * sig_neg, beta * sig_neg]))
