import numpy as np
import pytest
from hypothesis import strategies as st

from twa.annotations import AnnotatedExample, Dataset, ErrorSpan, Severity

SEVERITIES = list(Severity)


@st.composite
def annotated_examples(draw, alphabet="abcdeé漢 \t\"\\", source_id=None):
    text = draw(st.text(alphabet=alphabet, min_size=0, max_size=20))
    spans = []
    if text:
        for _ in range(draw(st.integers(0, 3))):
            s = draw(st.integers(0, len(text) - 1))
            e = draw(st.integers(s + 1, len(text)))
            spans.append(ErrorSpan(s, e, draw(st.sampled_from(["acc", "flu/punct", "x y"])),
                                   draw(st.sampled_from(SEVERITIES))))
    sid = source_id or draw(st.sampled_from(["s1", "s2", "s3"]))
    return AnnotatedExample(sid, draw(st.sampled_from(["A", "B", "C"])), f"src-{sid}",
                            text, tuple(spans))


def random_dataset(rng: np.random.Generator, n: int) -> Dataset:
    alphabet = list("abcxyz .,!é漢\t\"")
    examples = []
    for i in range(n):
        sid = f"s{rng.integers(0, 10)}"
        text = "".join(rng.choice(alphabet, size=int(rng.integers(0, 15))))
        spans = []
        is_ref = bool(rng.random() < 0.15)
        if text and not is_ref:
            for _ in range(int(rng.integers(0, 3))):
                s = int(rng.integers(0, len(text)))
                e = int(rng.integers(s + 1, len(text) + 1))
                spans.append(ErrorSpan(s, e, "cat", SEVERITIES[int(rng.integers(0, 4))]))
        examples.append(AnnotatedExample(sid, f"sys{i}", f"source {sid}", text, tuple(spans), is_ref))
    return Dataset(examples)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
