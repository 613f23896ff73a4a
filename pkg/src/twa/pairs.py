"""DPO preference pairs from sequence-level MQM scores (lower score is better)."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

from .annotations import (
    AnnotatedExample,
    AnnotationError,
    Dataset,
    mqm_score,
    parse_record,
    serialize_example,
)
from .tokenize_align import encode

log = logging.getLogger(__name__)

PREFERRED_SOURCES = ("reference_only", "all_submissions", "reference_and_submissions")
DISPREFERRED_SOURCES = ("best_submission", "worst_submission", "all_submissions")
SCORE_MODES = ("sum", "mean")

_VALID = {
    ("reference_only", "best_submission"),
    ("reference_only", "worst_submission"),
    ("reference_only", "all_submissions"),
    ("all_submissions", "all_submissions"),
    ("reference_and_submissions", "all_submissions"),
}


@dataclass(frozen=True)
class PairConfig:
    preferred_source: str = "reference_and_submissions"
    dispreferred_source: str = "all_submissions"
    score_mode: str = "sum"

    def __post_init__(self):
        if self.preferred_source not in PREFERRED_SOURCES:
            raise ValueError(f"preferred_source must be one of {PREFERRED_SOURCES}")
        if self.dispreferred_source not in DISPREFERRED_SOURCES:
            raise ValueError(f"dispreferred_source must be one of {DISPREFERRED_SOURCES}")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}")
        if (self.preferred_source, self.dispreferred_source) not in _VALID:
            raise ValueError(
                f"unsupported combination {self.preferred_source}/{self.dispreferred_source}"
            )

    @property
    def uses_references(self) -> bool:
        return self.preferred_source != "all_submissions"


@dataclass(frozen=True)
class PreferencePair:
    source_id: str
    preferred: AnnotatedExample
    dispreferred: AnnotatedExample


def sequence_score(example: AnnotatedExample, mode: str, vocab=None) -> float:
    """MQM sum, or MQM per output token (BOS/EOS excluded) in ``mean`` mode."""
    total = mqm_score(example)
    if mode == "sum":
        return total
    if vocab is None:
        raise ValueError("mean score mode needs a vocabulary")
    n_tokens = len(encode(example.output_text, vocab)) - 2
    return total / n_tokens if n_tokens else 0.0


def build_pairs(dataset: Dataset, config: PairConfig, vocab=None) -> list[PreferencePair]:
    """Preference pairs per source group, sorted by (source, preferred, dispreferred) system."""
    groups = dataset.groups()
    if config.uses_references and not any(ex.is_reference for ex in dataset):
        raise ValueError(f"{config.preferred_source} pairs need references in the dataset")
    pairs: list[PreferencePair] = []
    skipped = 0
    for sid, group in groups.items():
        refs = [ex for ex in group if ex.is_reference]
        subs = [ex for ex in group if not ex.is_reference]
        if not subs or (config.preferred_source == "reference_only" and not refs):
            skipped += 1
            continue
        scored = [(sequence_score(ex, config.score_mode, vocab), ex) for ex in subs]

        if config.preferred_source in ("all_submissions", "reference_and_submissions"):
            for (sa, a), (sb, b) in itertools.combinations(scored, 2):
                if sa < sb:
                    pairs.append(PreferencePair(sid, a, b))
                elif sb < sa:
                    pairs.append(PreferencePair(sid, b, a))

        if config.uses_references:
            if config.dispreferred_source == "all_submissions":
                losers = subs
            else:
                if config.dispreferred_source == "best_submission":
                    key = lambda t: (t[0], t[1].system_id)  # noqa: E731
                else:
                    key = lambda t: (-t[0], t[1].system_id)  # noqa: E731
                losers = [min(scored, key=key)[1]]
            for ref in refs:
                pairs.extend(PreferencePair(sid, ref, sub) for sub in losers)
    if skipped:
        log.warning("skipped %d source group(s) with no usable examples", skipped)
    pairs.sort(key=lambda p: (p.source_id, p.preferred.system_id, p.dispreferred.system_id))
    return pairs


# --- serialization: one pair per line, preferred record then dispreferred ----

def serialize_pairs(pairs: list[PreferencePair]) -> str:
    return "".join(
        serialize_example(p.preferred) + "\t" + serialize_example(p.dispreferred) + "\n"
        for p in pairs
    )


def parse_pairs(lines) -> list[PreferencePair]:
    out = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 12:
            raise AnnotationError(f"line {lineno}: expected 12 fields for a pair, got {len(fields)}")
        win = parse_record(fields[:6], f"line {lineno} (preferred)")
        lose = parse_record(fields[6:], f"line {lineno} (dispreferred)")
        if win.source_id != lose.source_id or win.source_text != lose.source_text:
            raise AnnotationError(f"line {lineno}: pair members come from different sources")
        out.append(PreferencePair(win.source_id, win, lose))
    return out
