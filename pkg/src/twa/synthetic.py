"""Toy character-level translation task with planted, exactly annotated errors.

Each source symbol has one correct translation (a seeded bijection) and one
fixed wrong translation, its *confusion*. A subset of symbols is *hard*:
error spans are anchored on hard symbols when a sentence has any, and the
optional pretraining corpus mistranslates hard symbols often, giving a base
model that is worse than the annotated submissions.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field

import numpy as np

from .annotations import AnnotatedExample, Dataset, ErrorSpan, Severity

CORRUPTION_TYPES = ("substitute", "insert", "delete")


@dataclass(frozen=True)
class TaskSpec:
    alphabet_size: int = 12
    table_seed: int = 0
    min_len: int = 6
    max_len: int = 12
    corruption_prob: float = 0.5
    min_span: int = 1
    max_span: int = 5
    corruption_type: str = "substitute"
    major_min_len: int = 4
    hard_fraction: float = 0.25
    base_error_rate: float = 0.7

    def __post_init__(self):
        if not 2 <= self.alphabet_size <= 26:
            raise ValueError("alphabet_size must be in [2, 26]")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 1 <= self.min_span <= self.max_span:
            raise ValueError("need 1 <= min_span <= max_span")
        if self.corruption_type not in CORRUPTION_TYPES:
            raise ValueError(f"corruption_type must be one of {CORRUPTION_TYPES}")
        if not 0.0 <= self.corruption_prob <= 1.0:
            raise ValueError("corruption_prob must be a probability")

    @property
    def alphabet(self) -> str:
        return string.ascii_lowercase[: self.alphabet_size]


@dataclass(frozen=True)
class Tables:
    translation: dict[str, str]
    confusion: dict[str, str]
    hard: frozenset[str]


def make_tables(spec: TaskSpec) -> Tables:
    rng = np.random.default_rng([spec.table_seed, 1])
    alpha = spec.alphabet
    n = len(alpha)
    perm = rng.permutation(n)
    translation = {alpha[i]: alpha[perm[i]] for i in range(n)}
    # the confusion of a symbol is the correct translation of another symbol
    shift = rng.permutation(np.arange(1, n))[0]
    confusion = {alpha[i]: alpha[perm[(i + shift) % n]] for i in range(n)}
    n_hard = max(1, round(spec.hard_fraction * n))
    hard = frozenset(alpha[i] for i in rng.permutation(n)[:n_hard])
    return Tables(translation, confusion, hard)


def translate(source: str, tables: Tables) -> str:
    return "".join(tables.translation[c] for c in source)


def severity_for_length(length: int, spec: TaskSpec) -> Severity:
    return Severity.MAJOR if length >= spec.major_min_len else Severity.MINOR


@dataclass
class SyntheticData:
    train: Dataset
    validation: Dataset
    clean_targets: dict[str, str] = field(default_factory=dict)


def _random_source(spec: TaskSpec, rng: np.random.Generator) -> str:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    alpha = spec.alphabet
    return "".join(alpha[i] for i in rng.integers(0, len(alpha), size=n))


def _anchor(source: str, tables: Tables, rng: np.random.Generator) -> int:
    hard_pos = [i for i, c in enumerate(source) if c in tables.hard]
    if hard_pos:
        return int(hard_pos[rng.integers(0, len(hard_pos))])
    return int(rng.integers(0, len(source)))


def corrupt(source: str, spec: TaskSpec, tables: Tables, rng: np.random.Generator):
    """One corrupted output of ``source`` and its error span (exact char range)."""
    clean = translate(source, tables)
    start = _anchor(source, tables, rng)
    length = int(rng.integers(spec.min_span, spec.max_span + 1))
    kind = spec.corruption_type
    if kind == "substitute":
        end = min(start + length, len(clean))
        wrong = "".join(tables.confusion[c] for c in source[start:end])
        out = clean[:start] + wrong + clean[end:]
        span = (start, end, end - start)
    elif kind == "insert":
        ins = "".join(tables.confusion[source[(start + k) % len(source)]] for k in range(length))
        out = clean[:start] + ins + clean[start:]
        span = (start, start + length, length)
    else:
        # keep at least one character; the span marks the character after the gap
        length = min(length, len(clean) - 1)
        if length == 0:
            return _substitute_one(source, clean, start, tables)
        start = min(start, len(clean) - length)
        out = clean[:start] + clean[start + length:]
        mark = min(start, len(out) - 1)
        span = (mark, mark + 1, length)
    s, e, damage = span
    return out, ErrorSpan(s, e, kind, severity_for_length(damage, spec))


def _substitute_one(source, clean, start, tables):
    out = clean[:start] + tables.confusion[source[start]] + clean[start + 1:]
    return out, ErrorSpan(start, start + 1, "substitute", Severity.MINOR)


def _references(spec, tables, n, prefix, rng):
    examples, clean = [], {}
    for i in range(n):
        sid = f"{prefix}{i:05d}"
        src = _random_source(spec, rng)
        tgt = translate(src, tables)
        clean[sid] = tgt
        examples.append(AnnotatedExample(sid, "ref", src, tgt, (), is_reference=True))
    return examples, clean


def generate(
    spec: TaskSpec,
    n_sources: int,
    n_systems_per_source: int,
    seed: int,
    n_validation: int | None = None,
) -> SyntheticData:
    """Training submissions plus one reference per source, and a reference-only
    validation split over disjoint sources. Deterministic per ``seed``."""
    tables = make_tables(spec)
    rng = np.random.default_rng([seed, 2])
    train, clean = [], {}
    for i in range(n_sources):
        sid = f"s{i:05d}"
        src = _random_source(spec, rng)
        tgt = translate(src, tables)
        clean[sid] = tgt
        for j in range(n_systems_per_source):
            if rng.random() < spec.corruption_prob:
                out, span = corrupt(src, spec, tables, rng)
                train.append(AnnotatedExample(sid, f"sys{j}", src, out, (span,)))
            else:
                train.append(AnnotatedExample(sid, f"sys{j}", src, tgt, ()))
        train.append(AnnotatedExample(sid, "ref", src, tgt, (), is_reference=True))
    if n_validation is None:
        n_validation = max(1, n_sources // 5)
    valid, vclean = _references(spec, tables, n_validation, "v", rng)
    clean.update(vclean)
    return SyntheticData(Dataset(train), Dataset(valid), clean)


def heldout(spec: TaskSpec, n: int, seed: int, prefix: str = "t") -> tuple[Dataset, dict[str, str]]:
    """Reference-only evaluation sources, independent of ``generate`` streams."""
    tables = make_tables(spec)
    rng = np.random.default_rng([seed, 3])
    examples, clean = _references(spec, tables, n, prefix, rng)
    return Dataset(examples), clean


def pretraining_corpus(spec: TaskSpec, n: int, seed: int) -> Dataset:
    """Unannotated parallel data from a weaker system with the same error
    process as the submissions: each hard symbol starts a run of confused
    characters with probability ``base_error_rate``."""
    tables = make_tables(spec)
    rng = np.random.default_rng([seed, 4])
    out = []
    for i in range(n):
        src = _random_source(spec, rng)
        chars, k = [], 0
        while k < len(src):
            if src[k] in tables.hard and rng.random() < spec.base_error_rate:
                length = int(rng.integers(spec.min_span, spec.max_span + 1))
                chars.extend(tables.confusion[c] for c in src[k:k + length])
                k += length
            else:
                chars.append(tables.translation[src[k]])
                k += 1
        out.append(AnnotatedExample(f"p{i:05d}", "base", src, "".join(chars), ()))
    return Dataset(out)


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def oracle_metric(hypothesis: str, target: str) -> float:
    """1 - edit distance / max length; 1.0 for two empty strings."""
    m = max(len(hypothesis), len(target))
    if m == 0:
        return 1.0
    return 1.0 - levenshtein(hypothesis, target) / m


def write_clean_targets(path, clean: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for sid in sorted(clean):
            f.write(f"{sid}\t{json.dumps(clean[sid], ensure_ascii=False)}\n")


def read_clean_targets(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                sid, text = line.split("\t")
                out[sid] = json.loads(text)
            except ValueError as err:
                raise ValueError(f"clean-target table line {lineno}: {err}") from None
    return out
