"""Turn model output into total LabelVectors.

Two grammars:
  * single line  ``A=0, B=1, ..., X=0`` over the whole alphabet
  * single answer ``A=1`` / ``A=[1]`` for one targeted code

``strict`` accepts only the exact canonical payload; ``lenient`` scans prose
for the first line that carries a complete assignment. Parsers never raise.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from modules.codebook import Codebook, LabelVector

MODES = ("strict", "lenient")
REASONS = ("missing-code", "duplicate-code", "non-binary-value", "no-line-found", "extra-prose-strict")

# letter not glued to a preceding word character, optional [] around the value
RE_ASSIGNMENT = re.compile(r"(?<![A-Za-z0-9_])([A-Z])\s*=\s*(\[[^\]\n]*\]|[^\s,;]*)")
RE_STRICT_PART = re.compile(r"([A-Z])=(\S*)")
RE_STRICT_ANSWER = re.compile(r"([A-Z])=(?:\[([01])\]|([01]))")


@dataclass(frozen=True)
class ParseFailure:
    reason: str
    detail: str
    codes: tuple[str, ...] = ()


@dataclass(frozen=True)
class ParseOutcome:
    vector: LabelVector | None = None
    failure: ParseFailure | None = None

    @property
    def ok(self) -> bool:
        return self.vector is not None

    @classmethod
    def success(cls, vector: LabelVector) -> ParseOutcome:
        return cls(vector=vector)

    @classmethod
    def fail(cls, reason, detail, codes=()) -> ParseOutcome:
        return cls(failure=ParseFailure(reason, detail, tuple(codes)))


def _as_text(text) -> str:
    if isinstance(text, (bytes, bytearray)):
        return bytes(text).decode("utf-8", errors="replace")
    return "" if text is None else str(text)


def _alphabet(cb_or_codes) -> tuple[str, ...]:
    return tuple(cb_or_codes.alphabet) if isinstance(cb_or_codes, Codebook) else tuple(cb_or_codes)


def _clean_value(raw: str, lenient: bool) -> str:
    value = raw.strip()
    if value.startswith("[") and value.endswith("]"):
        value = value[1:-1].strip()
    if lenient:
        value = value.rstrip(".!\"')")
    return value


def _judge(assignments, alphabet, lenient) -> ParseOutcome:
    """Check (code, raw value) pairs for a complete binary assignment."""
    seen = {}
    duplicates = []
    for code, raw in assignments:
        if code not in alphabet:
            continue
        if code in seen:
            duplicates.append(code)
            continue
        seen[code] = _clean_value(raw, lenient)
    if duplicates:
        return ParseOutcome.fail("duplicate-code", f"code(s) assigned twice: {', '.join(duplicates)}", duplicates)
    bad = [c for c in alphabet if c in seen and seen[c] not in ("0", "1")]
    if bad:
        detail = ", ".join(f"{c}={seen[c]!r}" for c in bad)
        return ParseOutcome.fail("non-binary-value", f"non-binary value for {detail}", bad)
    missing = [c for c in alphabet if c not in seen]
    if missing:
        return ParseOutcome.fail("missing-code", f"no assignment for {', '.join(missing)}", missing)
    return ParseOutcome.success(LabelVector(alphabet, tuple(int(seen[c]) for c in alphabet)))


def _parse_strict_line(payload: str, alphabet) -> ParseOutcome:
    lines = [line for line in payload.splitlines() if line.strip()]
    if not lines:
        return ParseOutcome.fail("no-line-found", "empty response")
    if len(lines) > 1:
        if not any(RE_ASSIGNMENT.search(line) for line in lines):
            return ParseOutcome.fail("no-line-found", "no assignment line in response")
        return ParseOutcome.fail("extra-prose-strict", f"{len(lines)} non-empty lines; expected exactly one")
    line = lines[0].strip()
    parts = line.split(", ")
    matches = [RE_STRICT_PART.fullmatch(part) for part in parts]
    if not any(matches):
        if RE_ASSIGNMENT.search(line):
            return ParseOutcome.fail("extra-prose-strict", "assignments are not in the canonical 'A=x, B=x' form")
        return ParseOutcome.fail("no-line-found", "no assignment in response")
    if not all(matches):
        stray = next(p for p, m in zip(parts, matches) if m is None)
        return ParseOutcome.fail("extra-prose-strict", f"unexpected text {stray[:40]!r}")
    assignments = [(m.group(1), m.group(2)) for m in matches]
    unknown = [c for c, _ in assignments if c not in alphabet]
    if unknown:
        return ParseOutcome.fail("extra-prose-strict", f"code(s) outside the alphabet: {', '.join(unknown)}")
    outcome = _judge(assignments, alphabet, lenient=False)
    if outcome.ok and tuple(c for c, _ in assignments) != alphabet:
        return ParseOutcome.fail("extra-prose-strict", "codes are not in canonical order")
    return outcome


def parse_single_line(text, cb, mode="lenient") -> ParseOutcome:
    """Parse an ``A=_, B=_, ...`` classification line over the codebook alphabet."""
    payload = _as_text(text)
    alphabet = _alphabet(cb)
    if mode == "strict":
        return _parse_strict_line(payload, alphabet)

    best, best_hits = None, 0
    for line in payload.splitlines():
        assignments = RE_ASSIGNMENT.findall(line)
        hits = sum(1 for code, _ in assignments if code in alphabet)
        if not hits:
            continue
        outcome = _judge(assignments, alphabet, lenient=True)
        if outcome.ok:
            return outcome
        if hits > best_hits:
            best, best_hits = outcome, hits
    if best is None:
        return ParseOutcome.fail("no-line-found", "no line carries code assignments")
    return best


def parse_single_answer(text, code: str, mode="lenient") -> ParseOutcome:
    """Parse a one-theme answer such as ``A=1`` or ``A=[0]``."""
    payload = _as_text(text)
    stripped = payload.strip()
    if mode == "strict":
        m = RE_STRICT_ANSWER.fullmatch(stripped)
        if m and m.group(1) == code:
            return ParseOutcome.success(LabelVector((code,), (int(m.group(2) or m.group(3)),)))
    found = [raw for letter, raw in RE_ASSIGNMENT.findall(payload) if letter == code]
    if not found:
        return ParseOutcome.fail("no-line-found", f"no assignment for {code}", (code,))
    if mode == "strict":
        return ParseOutcome.fail("extra-prose-strict", f"answer for {code} is surrounded by other text", (code,))
    values = {_clean_value(raw, lenient=True) for raw in found}
    if len(values) > 1:
        return ParseOutcome.fail("duplicate-code", f"conflicting answers for {code}: {sorted(values)}", (code,))
    value = values.pop()
    if value not in ("0", "1"):
        return ParseOutcome.fail("non-binary-value", f"non-binary value for {code}={value!r}", (code,))
    return ParseOutcome.success(LabelVector((code,), (int(value),)))


def assemble_per_theme(outcomes, cb) -> ParseOutcome:
    """Merge one single-code outcome per alphabet code into one vector.

    ``outcomes`` is a mapping code -> ParseOutcome or a sequence aligned with
    the alphabet.
    """
    alphabet = _alphabet(cb)
    if not isinstance(outcomes, dict):
        outcomes = dict(zip(alphabet, outcomes))
    failed = [c for c in alphabet if c not in outcomes or not outcomes[c].ok]
    if failed:
        reasons = {outcomes[c].failure.reason for c in failed if c in outcomes}
        reason = reasons.pop() if len(reasons) == 1 else "missing-code"
        return ParseOutcome.fail(reason, f"no usable answer for {', '.join(failed)}", failed)
    values = {}
    for code in alphabet:
        vector = outcomes[code].vector
        if code not in vector.codes:
            return ParseOutcome.fail("missing-code", f"outcome for {code} covers {vector.codes}", (code,))
        values[code] = vector[code]
    return ParseOutcome.success(LabelVector.from_mapping(values, alphabet))
