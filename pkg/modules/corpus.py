"""Post collections: ingestion, keyword relevance filtering, cleanup,
reproducible sampling and temporal splits.

A ``Corpus`` is immutable; every operation returns a new one whose posts are
ordered by ``(created_at, id)``.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from modules.errors import (
    ConfigError,
    CorpusFormatError,
    DuplicatePostError,
    KeywordRuleError,
    SamplingError,
)

logger = logging.getLogger(__name__)

POST_FIELDS = ("id", "title", "body", "source", "created_at", "url")
FORMATS = ("post-lines", "delimited-table")

RE_WHITESPACE = re.compile(r"\s+")
RE_URL = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
RE_MARKUP = re.compile(r"<[^>]*>|&[a-z]+;|&#\d+;|!?\[[^\]]*\]\([^)]*\)|[*_~`#>|\[\]()-]")
MALFORMED_NON_ALNUM_SHARE = 0.9


# ---------- Domain types ----------
@dataclass(frozen=True)
class Post:
    id: str
    title: str
    body: str
    source: str
    created_at: datetime
    url: str | None = None

    @property
    def text(self) -> str:
        return f"{self.title}\n{self.body}"

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "body": self.body,
            "source": self.source,
            "created_at": format_timestamp(self.created_at),
            "url": self.url or "",
        }


@dataclass(frozen=True)
class Corpus:
    name: str
    posts: tuple[Post, ...]
    provenance: str = ""
    time_range: tuple[datetime, datetime] | None = None

    @classmethod
    def of(cls, name, posts, provenance="", time_range=None) -> Corpus:
        posts = tuple(sorted(posts, key=lambda p: (p.created_at, p.id)))
        counts = Counter(p.id for p in posts)
        dupes = [pid for pid, n in counts.items() if n > 1]
        if dupes:
            raise DuplicatePostError(dupes)
        if time_range is None and posts:
            time_range = (posts[0].created_at, posts[-1].created_at)
        return cls(name=name, posts=posts, provenance=provenance, time_range=time_range)

    def __len__(self) -> int:
        return len(self.posts)

    def __iter__(self):
        return iter(self.posts)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.posts]

    def derive(self, name, posts, note) -> Corpus:
        provenance = f"{self.provenance}; {note}" if self.provenance else note
        return Corpus.of(name, posts, provenance=provenance)


@dataclass(frozen=True)
class KeywordTerm:
    text: str
    mode: str = "word"
    case_sensitive: bool = False

    def __post_init__(self):
        if not self.text.strip():
            raise ConfigError("keyword term must not be empty")
        if self.mode not in ("word", "substring"):
            raise ConfigError(f"unknown match mode {self.mode!r} for term {self.text!r}")

    def pattern(self) -> re.Pattern:
        needle = re.escape(self.text if self.case_sensitive else self.text.casefold())
        if self.mode == "word":
            needle = rf"(?<!\w){needle}(?!\w)"
        return re.compile(needle)


@dataclass(frozen=True)
class KeywordSet:
    groups: dict[str, tuple[KeywordTerm, ...]]
    rule: str = ""
    _patterns: dict = field(default_factory=dict, compare=False, repr=False)

    def group_matches(self, name: str, text: str) -> bool:
        folded = text.casefold()
        for term in self.groups[name]:
            pattern = self._patterns.get(term)
            if pattern is None:
                pattern = self._patterns.setdefault(term, term.pattern())
            if pattern.search(text if term.case_sensitive else folded):
                return True
        return False


@dataclass(frozen=True)
class SamplingSpec:
    target_n: int
    seed: int
    method: str = "uniform-without-replacement"

    def __post_init__(self):
        if self.target_n < 1:
            raise SamplingError(f"target_n must be >= 1, got {self.target_n}")
        if self.method != "uniform-without-replacement":
            raise SamplingError(f"unsupported sampling method {self.method!r}")


@dataclass(frozen=True)
class CleanReport:
    removed: dict[str, int]
    removed_ids: dict[str, tuple[str, ...]]

    @property
    def total_removed(self) -> int:
        return sum(self.removed.values())


# ---------- Timestamps ----------
def parse_timestamp(value) -> datetime:
    if isinstance(value, datetime):
        ts = value
    else:
        text = str(value).strip()
        if not text:
            raise ValueError("empty timestamp")
        ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# ---------- Loading / writing ----------
def _post_from_record(record, path, number) -> Post:
    if not isinstance(record, dict):
        raise CorpusFormatError(path, number, "expected an object with post fields")
    missing = [f for f in ("id", "created_at") if not str(record.get(f) or "").strip()]
    if missing:
        raise CorpusFormatError(path, number, f"missing field(s) {', '.join(missing)}")
    try:
        created_at = parse_timestamp(record["created_at"])
    except (TypeError, ValueError) as e:
        raise CorpusFormatError(path, number, f"bad created_at {record['created_at']!r}: {e}")
    url = str(record.get("url") or "").strip() or None
    return Post(
        id=str(record["id"]).strip(),
        title=str(record.get("title") or ""),
        body=str(record.get("body") or ""),
        source=str(record.get("source") or ""),
        created_at=created_at,
        url=url,
    )


def _read_post_lines(path: Path) -> list[Post]:
    posts = []
    with path.open("rb") as f:
        for number, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise CorpusFormatError(path, number, f"not valid UTF-8 (byte {e.start})") from None
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(path, number, f"invalid JSON ({e.msg})")
            posts.append(_post_from_record(record, path, number))
    return posts


def _first_undecodable_line(path: Path):
    for number, raw in enumerate(path.read_bytes().splitlines(), start=1):
        try:
            raw.decode("utf-8")
        except UnicodeDecodeError:
            return number
    return "?"


def _read_delimited_table(path: Path) -> list[Post]:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        raise CorpusFormatError(path, "?", f"unparseable table ({e})")
    except UnicodeDecodeError:
        number = _first_undecodable_line(path)
        raise CorpusFormatError(path, number, "not valid UTF-8") from None
    missing = [f for f in ("id", "created_at") if f not in df.columns]
    if missing:
        raise CorpusFormatError(path, 1, f"header lacks column(s) {', '.join(missing)}")
    # record numbers count the header as record 1
    return [
        _post_from_record(row, path, number)
        for number, row in enumerate(df.to_dict(orient="records"), start=2)
    ]


def load_posts(path, format="post-lines", name=None) -> Corpus:
    """Load one post collection; raises on malformed records or duplicate ids."""
    path = Path(path)
    if format not in FORMATS:
        raise ConfigError(f"unknown corpus format {format!r}; expected one of {FORMATS}")
    if not path.exists():
        raise ConfigError(f"corpus file not found: {path}")
    posts = _read_post_lines(path) if format == "post-lines" else _read_delimited_table(path)
    corpus = Corpus.of(name or path.stem, posts, provenance=f"loaded {path.name}")
    logger.info("loaded %d posts from %s", len(corpus), path)
    return corpus


def write_posts(corpus: Corpus, path, format="post-lines") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [p.to_record() for p in corpus.posts]
    if format == "post-lines":
        with path.open("w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    elif format == "delimited-table":
        pd.DataFrame(records, columns=list(POST_FIELDS)).to_csv(path, index=False)
    else:
        raise ConfigError(f"unknown corpus format {format!r}")
    return path


# ---------- Keywords ----------
def load_keywords(path) -> KeywordSet:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"keyword file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    groups_raw = raw.get("groups")
    if not isinstance(groups_raw, dict) or not groups_raw:
        raise ConfigError(f"{path}: expected a non-empty 'groups' mapping")
    defaults = raw.get("defaults") or {}
    groups = {}
    for name, terms in groups_raw.items():
        if not re.fullmatch(r"[A-Za-z_][\w-]*", str(name)) or str(name).upper() in ("AND", "OR"):
            raise ConfigError(f"{path}: invalid group name {name!r}")
        parsed = []
        for term in terms or []:
            spec = {"text": term} if isinstance(term, str) else dict(term)
            parsed.append(
                KeywordTerm(
                    text=str(spec.get("text", "")),
                    mode=spec.get("mode", defaults.get("mode", "word")),
                    case_sensitive=bool(spec.get("case_sensitive", defaults.get("case_sensitive", False))),
                )
            )
        if not parsed:
            raise ConfigError(f"{path}: group {name!r} has no terms")
        groups[str(name)] = tuple(parsed)
    return KeywordSet(groups=groups, rule=str(raw.get("rule") or " OR ".join(groups)))


_RULE_TOKEN = re.compile(r"\s*(\(|\)|[A-Za-z_][\w-]*)")


def _tokenize_rule(rule: str) -> list[str]:
    tokens, pos = [], 0
    rule = rule.strip()
    while pos < len(rule):
        m = _RULE_TOKEN.match(rule, pos)
        if not m:
            raise KeywordRuleError(f"cannot parse rule {rule!r} at position {pos}")
        tokens.append(m.group(1))
        pos = m.end()
        while pos < len(rule) and rule[pos].isspace():
            pos += 1
    return tokens


def parse_rule(rule: str, keywords: KeywordSet):
    """Compile ``group AND (group OR group)`` into a predicate over text.

    AND binds tighter than OR.
    """
    tokens = _tokenize_rule(rule)
    if not tokens:
        raise KeywordRuleError("empty keyword rule")
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def take():
        nonlocal pos
        pos += 1
        return tokens[pos - 1]

    def parse_or():
        terms = [parse_and()]
        while peek() is not None and peek().upper() == "OR":
            take()
            terms.append(parse_and())
        return terms[0] if len(terms) == 1 else (lambda t, fs=tuple(terms): any(f(t) for f in fs))

    def parse_and():
        terms = [parse_atom()]
        while peek() is not None and peek().upper() == "AND":
            take()
            terms.append(parse_atom())
        return terms[0] if len(terms) == 1 else (lambda t, fs=tuple(terms): all(f(t) for f in fs))

    def parse_atom():
        token = peek()
        if token is None:
            raise KeywordRuleError(f"rule {rule!r} ends unexpectedly")
        take()
        if token == "(":
            inner = parse_or()
            if peek() != ")":
                raise KeywordRuleError(f"rule {rule!r}: missing ')'")
            take()
            return inner
        if token == ")" or token.upper() in ("AND", "OR"):
            raise KeywordRuleError(f"rule {rule!r}: unexpected {token!r}")
        if token not in keywords.groups:
            raise KeywordRuleError(f"rule references unknown keyword group {token!r}")
        return lambda t, name=token: keywords.group_matches(name, t)

    predicate = parse_or()
    if pos != len(tokens):
        raise KeywordRuleError(f"rule {rule!r}: unexpected {tokens[pos]!r}")
    return predicate


def keyword_filter(corpus: Corpus, keywords: KeywordSet, rule: str) -> Corpus:
    predicate = parse_rule(rule, keywords)
    kept = [p for p in corpus.posts if predicate(p.text)]
    logger.info("keyword rule %r kept %d of %d posts", rule, len(kept), len(corpus))
    return corpus.derive(corpus.name, kept, f"keyword_filter[{rule}]")


# ---------- Cleanup ----------
def normalize_text(text: str) -> str:
    return RE_WHITESPACE.sub(" ", text or "").strip()


def is_malformed(body: str) -> bool:
    """Body made only of URLs/markup, or >90% non-alphanumeric characters."""
    body = normalize_text(body)
    if not body:
        return False
    stripped = RE_MARKUP.sub("", RE_URL.sub("", body))
    if not any(ch.isalnum() for ch in stripped):
        return True
    visible = [ch for ch in body if not ch.isspace()]
    non_alnum = sum(1 for ch in visible if not ch.isalnum())
    return non_alnum / len(visible) > MALFORMED_NON_ALNUM_SHARE


def dedup_clean(corpus: Corpus) -> tuple[Corpus, CleanReport]:
    """Remove blank, malformed and duplicate posts (earliest duplicate wins)."""
    removed = {"blank": [], "malformed": [], "duplicate": []}
    seen = set()
    kept = []
    for post in corpus.posts:
        title, body = normalize_text(post.title), normalize_text(post.body)
        if not title and not body:
            removed["blank"].append(post.id)
            continue
        if is_malformed(post.body):
            removed["malformed"].append(post.id)
            continue
        key = (title.casefold(), body.casefold())
        if key in seen:
            removed["duplicate"].append(post.id)
            continue
        seen.add(key)
        kept.append(post)
    report = CleanReport(
        removed={reason: len(ids) for reason, ids in removed.items()},
        removed_ids={reason: tuple(ids) for reason, ids in removed.items()},
    )
    logger.info("dedup_clean removed %s", report.removed)
    return corpus.derive(corpus.name, kept, f"dedup_clean{report.removed}"), report


# ---------- Sampling / splitting ----------
def sample_random(corpus: Corpus, spec: SamplingSpec) -> Corpus:
    """Uniform sample without replacement.

    Algorithm: posts in canonical order; ``numpy.random.default_rng(seed)``
    draws ``permutation(len(corpus))`` and the first ``target_n`` positions
    are kept; output is re-sorted canonically.
    """
    if spec.target_n > len(corpus):
        raise SamplingError(
            f"cannot sample {spec.target_n} posts from corpus {corpus.name!r} of {len(corpus)}"
        )
    ordered = sorted(corpus.posts, key=lambda p: (p.created_at, p.id))
    rng = np.random.default_rng(spec.seed & 0xFFFFFFFFFFFFFFFF)
    chosen = rng.permutation(len(ordered))[: spec.target_n]
    picked = [ordered[i] for i in chosen]
    return corpus.derive(corpus.name, picked, f"sample_random[n={spec.target_n}, seed={spec.seed}]")


def temporal_split(corpus: Corpus, boundary) -> tuple[Corpus, Corpus]:
    boundary = parse_timestamp(boundary)
    stamp = format_timestamp(boundary)
    before = [p for p in corpus.posts if p.created_at < boundary]
    after = [p for p in corpus.posts if p.created_at >= boundary]
    return (
        corpus.derive(f"{corpus.name}_before", before, f"created_at < {stamp}"),
        corpus.derive(f"{corpus.name}_after", after, f"created_at >= {stamp}"),
    )
