"""Span-annotated translation data: types, MQM scoring, I/O and statistics.

Records are stored one per line, tab-separated, in this fixed field order::

    source_id  system_id  is_reference(0/1)  source_text  output_text  spans

``source_text`` and ``output_text`` are JSON string literals; ``spans`` is a
JSON array of ``{"s": int, "e": int, "cat": str, "sev": str}`` objects with
``sev`` one of ``minor_punct``, ``minor``, ``major``, ``nontranslation``.
Character offsets count Unicode code points of the output text.
"""

from __future__ import annotations

import enum
import json
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field

import numpy as np


class AnnotationError(ValueError):
    """Raised for malformed records or spans that violate their bounds."""


class Severity(enum.Enum):
    MINOR_PUNCT = "minor_punct"
    MINOR = "minor"
    MAJOR = "major"
    NONTRANSLATION = "nontranslation"

    @property
    def mqm_penalty(self) -> float:
        return _MQM_PENALTY[self]

    @property
    def training_weight(self) -> float:
        # Non-translations score 25 under MQM but are trained like majors.
        return min(_MQM_PENALTY[self], 5.0)

    @property
    def rank(self) -> int:
        """Position in the severity order, higher is more severe."""
        return _SEVERITY_RANK[self]


_MQM_PENALTY = {
    Severity.MINOR_PUNCT: 0.1,
    Severity.MINOR: 1.0,
    Severity.MAJOR: 5.0,
    Severity.NONTRANSLATION: 25.0,
}
_SEVERITY_RANK = {
    Severity.MINOR_PUNCT: 0,
    Severity.MINOR: 1,
    Severity.MAJOR: 2,
    Severity.NONTRANSLATION: 3,
}


@dataclass(frozen=True)
class ErrorSpan:
    start_char: int
    end_char: int
    category: str
    severity: Severity

    def check_bounds(self, text_len: int) -> None:
        if not (0 <= self.start_char < self.end_char <= text_len):
            raise AnnotationError(
                f"span [{self.start_char}, {self.end_char}) out of bounds "
                f"for text of length {text_len}"
            )


@dataclass(frozen=True)
class AnnotatedExample:
    source_id: str
    system_id: str
    source_text: str
    output_text: str
    spans: tuple[ErrorSpan, ...] = ()
    is_reference: bool = False

    def __post_init__(self):
        spans = tuple(sorted(self.spans, key=lambda s: (s.start_char, s.end_char)))
        object.__setattr__(self, "spans", spans)
        if self.is_reference and spans:
            raise AnnotationError(
                f"reference {self.source_id}/{self.system_id} carries error spans"
            )
        for span in spans:
            span.check_bounds(len(self.output_text))

    @property
    def has_error(self) -> bool:
        return bool(self.spans)


@dataclass
class Dataset:
    """Ordered collection of examples, grouped by ``source_id`` on demand."""

    examples: list[AnnotatedExample] = field(default_factory=list)

    def __post_init__(self):
        sources: dict[str, str] = {}
        for ex in self.examples:
            known = sources.setdefault(ex.source_id, ex.source_text)
            if known != ex.source_text:
                raise AnnotationError(
                    f"source {ex.source_id!r} has inconsistent source_text"
                )

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[AnnotatedExample]:
        return iter(self.examples)

    def groups(self) -> dict[str, list[AnnotatedExample]]:
        """Examples by source id, in first-seen order, input order within a group."""
        out: dict[str, list[AnnotatedExample]] = {}
        for ex in self.examples:
            out.setdefault(ex.source_id, []).append(ex)
        return out

    @property
    def source_ids(self) -> list[str]:
        return list(self.groups())

    def references(self) -> "Dataset":
        return Dataset([ex for ex in self.examples if ex.is_reference])

    def submissions(self) -> "Dataset":
        return Dataset([ex for ex in self.examples if not ex.is_reference])


def mqm_score(example: AnnotatedExample) -> float:
    """Sum of MQM penalties over the example's error spans (0 when error-free)."""
    return float(sum(span.severity.mqm_penalty for span in example.spans))


def filter_error_free(dataset: Dataset) -> Dataset:
    return Dataset([ex for ex in dataset.examples if not ex.spans])


# --- serialization -----------------------------------------------------------

def serialize_example(ex: AnnotatedExample) -> str:
    spans = [
        {"s": s.start_char, "e": s.end_char, "cat": s.category, "sev": s.severity.value}
        for s in ex.spans
    ]
    return "\t".join([
        ex.source_id,
        ex.system_id,
        "1" if ex.is_reference else "0",
        json.dumps(ex.source_text, ensure_ascii=False),
        json.dumps(ex.output_text, ensure_ascii=False),
        json.dumps(spans, ensure_ascii=False, separators=(",", ":")),
    ])


def parse_record(fields: list[str], where: str) -> AnnotatedExample:
    """Build an example from the six record fields; ``where`` names it in errors."""
    if len(fields) != 6:
        raise AnnotationError(f"{where}: expected 6 tab-separated fields, got {len(fields)}")
    source_id, system_id, ref_flag, src_json, out_json, spans_json = fields
    if ref_flag not in ("0", "1"):
        raise AnnotationError(f"{where}: is_reference must be 0 or 1, got {ref_flag!r}")
    try:
        source_text = json.loads(src_json)
        output_text = json.loads(out_json)
        raw_spans = json.loads(spans_json)
    except json.JSONDecodeError as err:
        raise AnnotationError(f"{where}: invalid JSON field ({err})") from None
    if not isinstance(source_text, str) or not isinstance(output_text, str):
        raise AnnotationError(f"{where}: texts must be JSON strings")
    if not isinstance(raw_spans, list):
        raise AnnotationError(f"{where}: spans must be a JSON array")
    spans = []
    for raw in raw_spans:
        try:
            span = ErrorSpan(int(raw["s"]), int(raw["e"]), str(raw["cat"]), Severity(raw["sev"]))
        except (KeyError, TypeError, ValueError) as err:
            raise AnnotationError(f"{where}: bad span {raw!r} ({err})") from None
        spans.append(span)
    try:
        return AnnotatedExample(
            source_id=source_id,
            system_id=system_id,
            source_text=source_text,
            output_text=output_text,
            spans=tuple(spans),
            is_reference=ref_flag == "1",
        )
    except AnnotationError as err:
        raise AnnotationError(f"{where} ({source_id}/{system_id}): {err}") from None


def parse_dataset(lines: Iterable[str]) -> Dataset:
    """Parse line-delimited records; blank lines are skipped."""
    examples = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        examples.append(parse_record(line.split("\t"), f"line {lineno}"))
    try:
        return Dataset(examples)
    except AnnotationError as err:
        raise AnnotationError(f"dataset: {err}") from None


def serialize_dataset(dataset: Dataset) -> str:
    return "".join(serialize_example(ex) + "\n" for ex in dataset.examples)


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as f:
        return parse_dataset(f)


def write_dataset(path, dataset: Dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_dataset(dataset))


# --- statistics --------------------------------------------------------------

@dataclass
class StatsReport:
    token_counts: np.ndarray
    error_proportions: np.ndarray
    mean_tokens: float
    std_tokens: float
    mean_error_proportion: float
    std_error_proportion: float
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray

    def as_dict(self) -> dict:
        return {
            "n_examples": int(len(self.token_counts)),
            "mean_tokens": self.mean_tokens,
            "std_tokens": self.std_tokens,
            "mean_error_proportion": self.mean_error_proportion,
            "std_error_proportion": self.std_error_proportion,
            "histogram_counts": self.histogram_counts.tolist(),
            "histogram_edges": self.histogram_edges.tolist(),
        }


def dataset_stats(dataset: Dataset, vocab, bins: int = 10) -> StatsReport:
    """Token counts and error-token proportions per output.

    Counts cover text tokens only (BOS/EOS excluded). A token is an error token
    when it overlaps an annotated span by at least one character.
    """
    from .tokenize_align import encode, error_token_mask

    counts, props = [], []
    for ex in dataset.examples:
        tok = encode(ex.output_text, vocab)
        mask = error_token_mask(tok, ex.spans)[:-1]  # drop EOS
        n = len(mask)
        counts.append(n)
        props.append(float(mask.sum()) / n if n else 0.0)
    counts = np.asarray(counts, dtype=np.int64)
    props = np.asarray(props, dtype=np.float64)
    hist, edges = np.histogram(props, bins=bins, range=(0.0, 1.0))

    def _moments(x):
        return (float(x.mean()), float(x.std())) if len(x) else (0.0, 0.0)

    mt, st = _moments(counts.astype(np.float64))
    mp, sp = _moments(props)
    return StatsReport(counts, props, mt, st, mp, sp, hist, edges)
