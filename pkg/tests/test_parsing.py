import numpy as np
import pytest

from modules.codebook import LabelVector
from modules.parsing import (
    REASONS,
    ParseOutcome,
    assemble_per_theme,
    parse_single_answer,
    parse_single_line,
)
from modules.prompting import canonical_line

ALL_ZERO = "A=0, B=0, C=0, D=0, E=0, F=0, G=0, H=0, I=0, J=0, K=0, L=0, X=0"


def test_canonical_line_strict(codebook):
    out = parse_single_line("A=1, B=0, C=1, D=1, E=0, F=0, G=0, H=0, I=0, J=0, K=0, L=0, X=0", codebook, "strict")
    assert out.ok
    assert out.vector.positives() == ["A", "C", "D"]


def test_canonical_lines_parse_back(codebook):
    rng = np.random.default_rng(11)
    for values in rng.integers(0, 2, size=(1000, len(codebook))):
        v = LabelVector(codebook.alphabet, tuple(int(x) for x in values))
        line = canonical_line(v, codebook)
        assert parse_single_line(line, codebook, "strict").vector == v
        assert parse_single_line(line, codebook, "lenient").vector == v


def test_missing_code(codebook):
    out = parse_single_line(ALL_ZERO.replace(", X=0", ""), codebook, "strict")
    assert out.failure.reason == "missing-code"
    assert out.failure.codes == ("X",)


def test_duplicate_code(codebook):
    out = parse_single_line(ALL_ZERO + ", A=1", codebook, "lenient")
    assert out.failure.reason == "duplicate-code"


def test_non_binary_value(codebook):
    out = parse_single_line(ALL_ZERO.replace("E=0", "E=maybe"), codebook, "lenient")
    assert out.failure.reason == "non-binary-value"
    assert out.failure.codes == ("E",)


def test_no_line(codebook):
    assert parse_single_line("I cannot classify this post.", codebook).failure.reason == "no-line-found"
    assert parse_single_line("", codebook, "strict").failure.reason == "no-line-found"


def test_prose_rejected_strict_accepted_lenient(codebook):
    text = f"Sure! Here is the classification:\n{ALL_ZERO.replace('L=0', 'L=1')}\nLet me know if you need more."
    assert parse_single_line(text, codebook, "strict").failure.reason == "extra-prose-strict"
    lenient = parse_single_line(text, codebook, "lenient")
    assert lenient.ok
    assert lenient.vector.positives() == ["L"]


def test_lenient_tolerates_brackets_and_spacing(codebook):
    text = "A = [1], B=0, C=0 , D=0, E=0, F=0, G=0, H=0, I=0, J=0, K=0, L=0, X=0."
    out = parse_single_line(text, codebook, "lenient")
    assert out.ok
    assert out.vector["A"] == 1


def test_strict_rejects_out_of_order(codebook):
    shuffled = "B=0, A=0, C=0, D=0, E=0, F=0, G=0, H=0, I=0, J=0, K=0, L=0, X=0"
    assert parse_single_line(shuffled, codebook, "strict").failure.reason == "extra-prose-strict"
    assert parse_single_line(shuffled, codebook, "lenient").ok


def test_bytes_input(codebook):
    assert parse_single_line(ALL_ZERO.encode(), codebook).ok


def test_fuzz_never_raises(codebook):
    rng = np.random.default_rng(2025)
    pieces = list("ABCDEFGHIJKLXZ=01,;[] \n.") + ["A=", "=1", ", ", "Sure", "é", "\x00"]
    for _ in range(10_000):
        text = "".join(rng.choice(pieces, size=int(rng.integers(0, 40))))
        for mode in ("strict", "lenient"):
            out = parse_single_line(text, codebook, mode)
            assert out.ok or out.failure.reason in REASONS
        out = parse_single_answer(text, "A")
        assert out.ok or out.failure.reason in REASONS


@pytest.mark.parametrize("text, value", [("A=1", 1), ("A=[0]", 0), ("  A=[1]\n", 1)])
def test_single_answer_strict(text, value):
    out = parse_single_answer(text, "A", "strict")
    assert out.ok and out.vector["A"] == value


def test_single_answer_prose():
    text = "The post is relevant, so A=1."
    assert parse_single_answer(text, "A", "strict").failure.reason == "extra-prose-strict"
    assert parse_single_answer(text, "A", "lenient").vector["A"] == 1


def test_single_answer_conflict_and_text():
    assert parse_single_answer("A=1 ... actually A=0", "A").failure.reason == "duplicate-code"
    assert parse_single_answer("A=relevant", "A").failure.reason == "non-binary-value"
    assert parse_single_answer("B=1", "A").failure.reason == "no-line-found"


def test_assemble_per_theme(codebook):
    outcomes = {c: parse_single_answer(f"{c}={int(c in 'HI')}", c) for c in codebook.alphabet}
    out = assemble_per_theme(outcomes, codebook)
    assert out.vector.positives() == ["H", "I"]


def test_assemble_reports_failed_codes(codebook):
    outcomes = [ParseOutcome.success(LabelVector((c,), (0,))) for c in codebook.alphabet]
    outcomes[3] = parse_single_answer("no idea", "D")
    out = assemble_per_theme(outcomes, codebook)
    assert not out.ok
    assert out.failure.codes == ("D",)
    assert out.failure.reason == "no-line-found"
