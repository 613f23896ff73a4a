"""System comparison: paired bootstrap tests, rank clusters, per-token rank shifts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .annotations import AnnotatedExample
from .model import Seq2SeqModel, pad_batch
from .tokenize_align import Vocab, encode, error_token_mask


@dataclass
class SystemScores:
    name: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.values.mean())


def bootstrap_indices(n: int, n_resamples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, n, size=(n_resamples, n))


def pairwise_significance(a, b, n_resamples: int = 1000, seed: int = 0) -> float:
    """Two-sided paired bootstrap p-value for a difference in means.

    With ``d = a - b`` and observed mean ``m``, each resample of example indices
    gives a mean ``m*``; ``p = min(1, 2 * #{sign(m*) != sign(m)} / n_resamples)``
    where a zero resample mean counts as a flip. ``p = 1`` when ``m == 0``.
    Swapping ``a`` and ``b`` gives the same value.
    """
    a = a.values if isinstance(a, SystemScores) else np.asarray(a, dtype=np.float64)
    b = b.values if isinstance(b, SystemScores) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"score vectors differ in length: {a.shape} vs {b.shape}")
    if a.ndim != 1 or len(a) < 2:
        raise ValueError("need at least two paired examples")
    diff = a - b
    observed = diff.mean()
    if observed == 0:
        return 1.0
    means = diff[bootstrap_indices(len(diff), n_resamples, seed)].mean(axis=1)
    flips = np.count_nonzero(np.sign(means) != np.sign(observed))
    return float(min(1.0, 2.0 * flips / n_resamples))


def bootstrap_interval(diff, n_resamples: int = 1000, seed: int = 0, level: float = 0.95):
    """Percentile interval of the resampled mean of paired differences."""
    diff = np.asarray(diff, dtype=np.float64)
    means = diff[bootstrap_indices(len(diff), n_resamples, seed)].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return float(lo), float(hi)


def significance_matrix(systems: Sequence[SystemScores], n_resamples=1000, seed=0) -> np.ndarray:
    k = len(systems)
    out = np.ones((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = pairwise_significance(systems[i], systems[j], n_resamples, seed)
    return out


def cluster_ranks(
    systems: Sequence[SystemScores],
    alpha: float = 0.05,
    n_resamples: int = 1000,
    seed: int = 0,
    higher_is_better: bool = True,
) -> dict[str, int]:
    """Walk systems best-first; a system significantly different from any
    member of the current cluster opens the next rank."""
    if not systems:
        raise ValueError("need at least one system")
    sign = -1.0 if higher_is_better else 1.0
    order = sorted(range(len(systems)), key=lambda i: (sign * systems[i].mean, i))
    ranks: dict[str, int] = {}
    rank, cluster = 1, []
    for i in order:
        sys = systems[i]
        if any(pairwise_significance(sys, other, n_resamples, seed) < alpha for other in cluster):
            rank += 1
            cluster = []
        cluster.append(sys)
        ranks[sys.name] = rank
    return ranks


# --- token rank changes ------------------------------------------------------

@dataclass(frozen=True)
class RankChangeRecord:
    example_index: int
    position: int
    token: str
    base_rank: int
    trained_rank: int
    in_error_span: bool

    @property
    def delta(self) -> int:
        """Positive when the trained model ranks the token higher (better)."""
        return self.base_rank - self.trained_rank


def token_ranks(logits: np.ndarray, realized: np.ndarray) -> np.ndarray:
    """1 + number of vocabulary entries with a strictly larger logit."""
    chosen = np.take_along_axis(logits, realized[..., None], axis=-1)
    return 1 + (logits > chosen).sum(axis=-1)


def _realized_ranks(model: Seq2SeqModel, src_ids, tgt_ids) -> np.ndarray:
    logits, _ = model.forward(pad_batch([src_ids]), pad_batch([tgt_ids]))
    return token_ranks(logits[0, :-1], np.asarray(tgt_ids[1:]))


def token_rank_change(
    base: Seq2SeqModel,
    trained: Seq2SeqModel,
    examples: Sequence[AnnotatedExample],
    vocab: Vocab,
) -> list[RankChangeRecord]:
    """Rank of every realized output token (EOS included) under both models."""
    if base.config.vocab_size != trained.config.vocab_size or base.config.vocab_size != len(vocab):
        raise ValueError("base model, trained model and vocabulary must share one vocabulary")
    records = []
    for idx, ex in enumerate(examples):
        src = encode(ex.source_text, vocab).token_ids
        tok = encode(ex.output_text, vocab)
        errors = error_token_mask(tok, ex.spans)
        r_base = _realized_ranks(base, src, tok.token_ids)
        r_trained = _realized_ranks(trained, src, tok.token_ids)
        for pos in range(len(errors)):
            records.append(RankChangeRecord(
                idx, pos, vocab.tokens[tok.token_ids[pos + 1]],
                int(r_base[pos]), int(r_trained[pos]), bool(errors[pos]),
            ))
    return records
