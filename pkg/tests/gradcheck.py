"""Finite-difference harness for losses composed with the tiny model."""

import numpy as np

from twa.losses import (
    dpo_loss,
    nl_span_loss,
    twa_error_span_loss,
    twa_non_error_span_loss,
    twa_seq_baseline_loss,
    twa_sequence_loss,
)
from twa.model import ModelConfig, Seq2SeqModel, grad_logits_from_logp, realized_logprobs
from twa.tokenize_align import BOS, EOS, TokenWeightVector, group_spans

LOSSES = ("twa_error_span_loss", "twa_non_error_span_loss", "twa_sequence_loss",
          "nl_span_loss", "twa_seq_baseline_loss", "dpo_loss")

TINY = dict(vocab_size=11, embed_dim=8, hidden_dim=16, num_heads=2, max_src_len=8, max_tgt_len=8)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-6))


def _sequence(rng, lo, hi, vocab):
    body = rng.integers(4, vocab, size=int(rng.integers(lo, hi)))
    return np.concatenate([[BOS], body, [EOS]]).astype(np.int64)


def random_instance(name: str, rng: np.random.Generator):
    """A tiny model and an objective ``f(model) -> (value, grads)`` for one loss."""
    model = Seq2SeqModel(ModelConfig(**TINY, seed=int(rng.integers(0, 2**31))))
    v = TINY["vocab_size"]
    n_seq = 2 if name == "dpo_loss" else 1
    srcs = [_sequence(rng, 1, 5, v) for _ in range(n_seq)]
    tgts = [_sequence(rng, 1, 5, v) for _ in range(n_seq)]
    width_s = max(map(len, srcs))
    width_t = max(map(len, tgts))
    src = np.zeros((n_seq, width_s), dtype=np.int64)
    tgt = np.zeros((n_seq, width_t), dtype=np.int64)
    for i in range(n_seq):
        src[i, :len(srcs[i])] = srcs[i]
        tgt[i, :len(tgts[i])] = tgts[i]
    lens = [len(t) - 1 for t in tgts]

    w = -float(rng.choice([0.1, 1.0, 5.0]))
    ws = rng.choice([1.0, 0.0, -0.1, -1.0, -5.0], size=lens[0])
    has_error = bool(rng.integers(0, 2))
    beta = float(rng.uniform(0.05, 1.0))
    refs = rng.uniform(-10, -1, size=2)
    # short spans keep p_span well inside (0, 1) for the unlikelihood term
    a = int(rng.integers(0, lens[0]))
    b = int(rng.integers(a + 1, min(lens[0], a + 2) + 1))

    def loss(logp):
        n = lens[0]
        grad = np.zeros_like(logp)
        if name == "twa_error_span_loss":
            rep = twa_error_span_loss(logp[0, a:b], w)
            grad[0, a:b] = rep.grad_logp
        elif name == "nl_span_loss":
            rep = nl_span_loss(logp[0, a:b], w)
            grad[0, a:b] = rep.grad_logp
        elif name == "twa_non_error_span_loss":
            rep = twa_non_error_span_loss(logp[0, :n], False)
            grad[0, :n] = rep.grad_logp
        elif name == "twa_sequence_loss":
            rep = twa_sequence_loss(TokenWeightVector(ws, group_spans(ws)), logp[0, :n])
            grad[0, :n] = rep.grad_logp
        elif name == "twa_seq_baseline_loss":
            rep = twa_seq_baseline_loss(has_error, logp[0, :n])
            grad[0, :n] = rep.grad_logp
        else:
            rep = dpo_loss(logp[0, :lens[0]].sum(), logp[1, :lens[1]].sum(), refs[0], refs[1], beta)
            grad[0, :lens[0]] = rep.grad_logp[0]
            grad[1, :lens[1]] = rep.grad_logp[1]
        return rep.value, grad

    def objective(m):
        logits, trace = m.forward(src, tgt)
        logp_all, logp = realized_logprobs(logits, tgt)
        value, grad_logp = loss(logp)
        return value, m.backward(trace, grad_logits_from_logp(logp_all, tgt, grad_logp))

    return model, objective


def _value_at(model, objective, flat_update):
    m = model.copy()
    for k, delta in flat_update.items():
        m.params[k] += delta
    return objective(m)[0]


def check_instance(model, objective, rng, n_coords=12, eps=1e-5) -> float:
    """Worst relative error over a random direction and a coordinate subset."""
    _, grads = objective(model)
    names = sorted(model.params)
    # random-direction derivative
    direction = {k: rng.standard_normal(model.params[k].shape) for k in names}
    analytic = sum(float((grads[k] * direction[k]).sum()) for k in names)
    up = _value_at(model, objective, {k: eps * d for k, d in direction.items()})
    dn = _value_at(model, objective, {k: -eps * d for k, d in direction.items()})
    worst = rel_err([analytic], [(up - dn) / (2 * eps)])
    # individual coordinates, weighted toward parameters with nonzero gradient
    sizes = np.array([model.params[k].size for k in names])
    picks = rng.choice(sizes.sum(), size=n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    a_vec, n_vec = [], []
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        k, j = names[i], int(flat - offsets[i])
        e = np.zeros(model.params[k].size)
        e[j] = eps
        e = e.reshape(model.params[k].shape)
        a_vec.append(grads[k].flat[j])
        n_vec.append((_value_at(model, objective, {k: e}) - _value_at(model, objective, {k: -e})) / (2 * eps))
    return max(worst, rel_err(a_vec, n_vec))
