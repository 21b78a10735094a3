"""Theme taxonomy (codes, definitions, exemplars) and expert gold labels."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterator, Mapping

import pandas as pd
import yaml

from modules.errors import CodebookError, ConfigError, GoldLabelError

logger = logging.getLogger(__name__)

DEFAULT_ALPHABET = tuple("ABCDEFGHIJKL") + ("X",)


@dataclass(frozen=True)
class LabelVector(Mapping):
    """Total binary assignment over an ordered code alphabet."""

    codes: tuple[str, ...]
    values: tuple[int, ...]

    def __post_init__(self):
        if len(self.codes) != len(self.values):
            raise ValueError("codes and values differ in length")
        if len(set(self.codes)) != len(self.codes):
            raise ValueError(f"duplicate codes in {self.codes}")
        bad = [c for c, v in zip(self.codes, self.values) if v not in (0, 1) or isinstance(v, bool)]
        if bad:
            raise ValueError(f"non-binary value for code(s) {', '.join(bad)}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, int], alphabet) -> LabelVector:
        alphabet = tuple(alphabet)
        missing = [c for c in alphabet if c not in mapping]
        if missing:
            raise ValueError(f"missing code(s) {', '.join(missing)}")
        extra = [c for c in mapping if c not in alphabet]
        if extra:
            raise ValueError(f"unknown code(s) {', '.join(map(str, extra))}")
        return cls(alphabet, tuple(int(mapping[c]) for c in alphabet))

    @classmethod
    def zeros(cls, alphabet) -> LabelVector:
        alphabet = tuple(alphabet)
        return cls(alphabet, (0,) * len(alphabet))

    def __getitem__(self, code: str) -> int:
        try:
            return self.values[self.codes.index(code)]
        except ValueError:
            raise KeyError(code) from None

    def __iter__(self) -> Iterator[str]:
        return iter(self.codes)

    def __len__(self) -> int:
        return len(self.codes)

    def __eq__(self, other):
        if isinstance(other, LabelVector):
            return self.codes == other.codes and self.values == other.values
        return NotImplemented

    def __hash__(self):
        return hash((self.codes, self.values))

    def positives(self) -> list[str]:
        return [c for c, v in zip(self.codes, self.values) if v == 1]

    def complement(self) -> LabelVector:
        return LabelVector(self.codes, tuple(1 - v for v in self.values))

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.codes, self.values))


@dataclass(frozen=True)
class Exemplar:
    text: str
    labels: Mapping[str, int]
    theme: str = ""


@dataclass(frozen=True)
class ThemeDef:
    code: str
    name: str
    definition: str
    exemplars: tuple[Exemplar, ...] = ()
    null: bool = False


@dataclass(frozen=True)
class Finding:
    kind: str
    subject: str
    message: str

    def __str__(self):
        return self.message


@dataclass(frozen=True)
class Codebook:
    alphabet: tuple[str, ...]
    themes: tuple[ThemeDef, ...]
    version: str = "unversioned"

    @property
    def null_code(self) -> str | None:
        flagged = [t.code for t in self.themes if t.null]
        return flagged[0] if len(flagged) == 1 else None

    @property
    def exemplars(self) -> tuple[Exemplar, ...]:
        return tuple(ex for theme in self.themes for ex in theme.exemplars)

    def theme(self, code: str) -> ThemeDef:
        for t in self.themes:
            if t.code == code:
                return t
        raise KeyError(code)

    def vector(self, mapping: Mapping[str, int]) -> LabelVector:
        return LabelVector.from_mapping(mapping, self.alphabet)

    def __len__(self):
        return len(self.alphabet)


@dataclass(frozen=True)
class GoldLabelSet:
    corpus_name: str
    labels: Mapping[str, LabelVector]
    note: str = ""
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __len__(self):
        return len(self.labels)

    @property
    def ids(self) -> list[str]:
        return sorted(self.labels)


# ---------- Validation ----------
def validate_codebook(cb: Codebook) -> list[Finding]:
    findings = []
    counts = Counter(cb.alphabet)
    theme_codes = [t.code for t in cb.themes]
    theme_counts = Counter(theme_codes)
    for code in sorted(set(counts) | set(theme_counts)):
        n = max(counts[code], theme_counts[code])
        if n > 1:
            findings.append(Finding("duplicate-code", code, f"duplicate code {code!r} ({n} entries)"))
    for code in counts:
        if len(code) != 1 or not code.isupper():
            findings.append(Finding("bad-code", code, f"code {code!r} is not a single uppercase letter"))
    if set(theme_codes) != set(cb.alphabet):
        missing = sorted(set(cb.alphabet) - set(theme_codes))
        extra = sorted(set(theme_codes) - set(cb.alphabet))
        findings.append(
            Finding("alphabet-mismatch", ",".join(missing + extra),
                    f"alphabet/theme mismatch: without theme {missing}, not in alphabet {extra}")
        )
    for theme in cb.themes:
        if not theme.definition or not theme.definition.strip():
            findings.append(Finding("missing-definition", theme.code, f"theme {theme.code!r} has no definition"))
    nulls = [t.code for t in cb.themes if t.null]
    if not nulls:
        findings.append(Finding("no-null-theme", "", "no null theme"))
    elif len(nulls) > 1:
        findings.append(Finding("multiple-null-themes", ",".join(nulls), f"more than one null theme: {nulls}"))
    alphabet = set(cb.alphabet)
    for i, ex in enumerate(cb.exemplars):
        name = f"exemplar {i} ({ex.theme or 'unassigned'})"
        if not ex.text.strip():
            findings.append(Finding("empty-exemplar", name, f"{name} has empty text"))
        missing = [c for c in cb.alphabet if c not in ex.labels]
        for code in missing:
            findings.append(Finding("incomplete-exemplar", f"{name}:{code}", f"{name} is missing code {code}"))
        for code, value in ex.labels.items():
            if code not in alphabet:
                findings.append(Finding("unknown-code", f"{name}:{code}", f"{name} labels unknown code {code}"))
            elif value not in (0, 1) or isinstance(value, bool):
                findings.append(
                    Finding("non-binary-exemplar", f"{name}:{code}", f"{name} has non-binary value {value!r} for {code}")
                )
    return findings


def lint_vector(v: LabelVector, cb: Codebook) -> list[str]:
    """Warn when the null theme co-occurs with a substantive code."""
    null = cb.null_code
    if null is None or v[null] != 1:
        return []
    others = [c for c in v.positives() if c != null]
    if others:
        return [f"null theme {null}=1 together with {', '.join(others)}"]
    return []


# ---------- Loading / dumping ----------
def _theme_from_raw(raw, path) -> ThemeDef:
    if not isinstance(raw, dict) or "code" not in raw:
        raise ConfigError(f"{path}: every theme entry needs a 'code'")
    code = str(raw["code"])
    exemplars = []
    for ex in raw.get("exemplars") or []:
        labels = {str(k): v for k, v in (ex.get("labels") or {}).items()}
        exemplars.append(Exemplar(text=str(ex.get("text", "")), labels=MappingProxyType(labels), theme=code))
    return ThemeDef(
        code=code,
        name=str(raw.get("name", "")),
        definition=str(raw.get("definition") or ""),
        exemplars=tuple(exemplars),
        null=bool(raw.get("null_theme", False)),
    )


def load_codebook(path) -> Codebook:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"codebook file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    themes = tuple(_theme_from_raw(t, path) for t in raw.get("themes") or [])
    alphabet = tuple(str(c) for c in raw.get("alphabet") or [t.code for t in themes])
    cb = Codebook(alphabet=alphabet, themes=themes, version=str(raw.get("version", "unversioned")))
    findings = validate_codebook(cb)
    if findings:
        raise CodebookError(findings)
    # canonical order follows the alphabet
    order = {c: i for i, c in enumerate(cb.alphabet)}
    cb = Codebook(cb.alphabet, tuple(sorted(cb.themes, key=lambda t: order[t.code])), cb.version)
    logger.info("loaded codebook %s with %d codes", cb.version, len(cb))
    return cb


def codebook_to_dict(cb: Codebook) -> dict:
    themes = []
    for t in cb.themes:
        entry = {"code": t.code, "name": t.name, "definition": t.definition}
        if t.null:
            entry["null_theme"] = True
        if t.exemplars:
            entry["exemplars"] = [{"text": ex.text, "labels": dict(ex.labels)} for ex in t.exemplars]
        themes.append(entry)
    return {"version": cb.version, "alphabet": list(cb.alphabet), "themes": themes}


def dump_codebook(cb: Codebook, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        yaml.safe_dump(codebook_to_dict(cb), sort_keys=False, allow_unicode=True, width=100),
        encoding="utf-8",
    )
    return path


def load_gold(path, corpus, cb: Codebook, note="") -> GoldLabelSet:
    """Wide gold table: ``post_id`` then one 0/1 column per code."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"gold label file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise GoldLabelError(f"{path}: empty gold label file")
    if "post_id" not in df.columns:
        raise GoldLabelError(f"{path}: header must start with post_id")
    missing = [c for c in cb.alphabet if c not in df.columns]
    if missing:
        raise GoldLabelError(f"{path}: missing column(s) for code(s) {', '.join(missing)}")
    known = set(corpus.ids)
    labels, warnings = {}, []
    for row_number, row in enumerate(df.to_dict(orient="records"), start=2):
        post_id = row["post_id"].strip()
        if post_id not in known:
            raise GoldLabelError(f"{path}: row {row_number}: unknown post id {post_id!r}")
        if post_id in labels:
            raise GoldLabelError(f"{path}: row {row_number}: post id {post_id!r} labeled twice")
        values = {}
        for code in cb.alphabet:
            cell = row[code].strip()
            if cell not in ("0", "1"):
                raise GoldLabelError(f"{path}: row {row_number}, code {code}: non-binary value {cell!r}")
            values[code] = int(cell)
        vector = cb.vector(values)
        for w in lint_vector(vector, cb):
            warnings.append(f"{post_id}: {w}")
            logger.warning("gold %s: %s", post_id, w)
        labels[post_id] = vector
    logger.info("loaded %d gold label vectors from %s", len(labels), path)
    return GoldLabelSet(corpus_name=corpus.name, labels=MappingProxyType(labels), note=note, warnings=tuple(warnings))


def write_gold(labels: Mapping[str, LabelVector], cb: Codebook, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [{"post_id": pid, **labels[pid].as_dict()} for pid in sorted(labels)]
    pd.DataFrame(rows, columns=["post_id", *cb.alphabet]).to_csv(path, index=False)
    return path
