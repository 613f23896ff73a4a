"""Greedy longest-match subword tokenizer with exact character offsets, and
projection of character-level error spans onto per-token loss weights."""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .annotations import ErrorSpan

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")
MAX_NGRAM = 6


class Vocab:
    """Ordered subword inventory. Ids 0-3 are PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the four reserved tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens) if i >= 4}
        if len(self.index) != len(tokens) - 4:
            raise ValueError("duplicate vocabulary entries")
        self.max_piece = max((len(t) for t in tokens[4:]), default=1)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def to_json(self) -> str:
        return json.dumps(self.tokens, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())


def build_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Reserved ids, every observed character, then the most frequent 2..6-grams.

    N-grams are ranked by corpus count (overlapping occurrences), ties broken
    lexicographically, and added until ``target_size`` entries exist.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    chars = sorted({c for text in corpus for c in text})
    if target_size < len(chars) + len(SPECIAL_TOKENS):
        raise ValueError(
            f"target_size {target_size} < {len(chars)} characters + 4 reserved ids"
        )
    counts: Counter[str] = Counter()
    for text in corpus:
        for n in range(2, MAX_NGRAM + 1):
            for i in range(len(text) - n + 1):
                counts[text[i:i + n]] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    room = target_size - len(SPECIAL_TOKENS) - len(chars)
    pieces = [g for g, _ in ranked[:room]]
    return Vocab(list(SPECIAL_TOKENS) + chars + pieces)


@dataclass(frozen=True)
class TokenizedOutput:
    token_ids: tuple[int, ...]
    char_ranges: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.token_ids)


def encode(text: str, vocab: Vocab) -> TokenizedOutput:
    ids, ranges = [BOS], [(0, 0)]
    i, n = 0, len(text)
    while i < n:
        for size in range(min(vocab.max_piece, n - i), 0, -1):
            tid = vocab.index.get(text[i:i + size])
            if tid is not None:
                ids.append(tid)
                ranges.append((i, i + size))
                i += size
                break
        else:
            ids.append(UNK)
            ranges.append((i, i + 1))
            i += 1
    ids.append(EOS)
    ranges.append((n, n))
    return TokenizedOutput(tuple(ids), tuple(ranges))


def decode(ids: Iterable[int], vocab: Vocab, unk: str = "�") -> str:
    """Join token strings, stopping at EOS and dropping PAD/BOS."""
    out = []
    for tid in ids:
        tid = int(tid)
        if tid == EOS:
            break
        if tid in (PAD, BOS):
            continue
        out.append(unk if tid == UNK else vocab.tokens[tid])
    return "".join(out)


def token_strings(tok: TokenizedOutput, vocab: Vocab) -> list[str]:
    return [vocab.tokens[t] for t in tok.token_ids]


# --- weights -----------------------------------------------------------------

@dataclass(frozen=True)
class TokenWeightVector:
    """Weights for token positions 1..end of a tokenized output (BOS excluded).

    ``spans`` holds maximal runs of equal weight as ``(start, end, weight)``,
    indices relative to ``weights``.
    """

    weights: np.ndarray
    spans: tuple[tuple[int, int, float], ...]

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def error_mask(self) -> np.ndarray:
        return self.weights < 0


def group_spans(weights: np.ndarray) -> tuple[tuple[int, int, float], ...]:
    spans = []
    start = 0
    for i in range(1, len(weights) + 1):
        if i == len(weights) or weights[i] != weights[start]:
            spans.append((start, i, float(weights[start])))
            start = i
    return tuple(spans)


def _overlap_severity(tok: TokenizedOutput, spans: Sequence[ErrorSpan]) -> list:
    text_len = tok.char_ranges[-1][1]
    worst = [None] * (len(tok) - 1)
    for span in spans:
        span.check_bounds(text_len)
        for k, (a, b) in enumerate(tok.char_ranges[1:]):
            if a < span.end_char and span.start_char < b:
                if worst[k] is None or span.severity.rank > worst[k].rank:
                    worst[k] = span.severity
    return worst


def error_token_mask(tok: TokenizedOutput, spans: Sequence[ErrorSpan]) -> np.ndarray:
    """Boolean mask over positions 1..end: token overlaps a span by >= 1 char."""
    return np.array([s is not None for s in _overlap_severity(tok, spans)], dtype=bool)


def assign_token_weights(
    tok: TokenizedOutput,
    spans: Sequence[ErrorSpan],
    ignore_off_trajectory: bool = True,
) -> TokenWeightVector:
    """Per-token weights: -severity on error tokens, 1 on-trajectory, 0 off it.

    Overlapping spans resolve to the most severe one. Once the first error
    token is reached, later non-error tokens get weight 0 when
    ``ignore_off_trajectory`` is set; later error tokens stay negative.
    """
    worst = _overlap_severity(tok, spans)
    weights = np.ones(len(worst), dtype=np.float64)
    seen_error = False
    for k, sev in enumerate(worst):
        if sev is not None:
            weights[k] = -sev.training_weight
            seen_error = True
        elif seen_error and ignore_off_trajectory:
            weights[k] = 0.0
    return TokenWeightVector(weights, group_spans(weights))
