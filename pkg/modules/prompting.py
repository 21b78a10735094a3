"""Prompt rendering for the three prompt generations.

* ``v1-per-theme``      one prompt per code, answer ``A=[answer]``
* ``v2-multi-question`` numbered questions, answers compiled on one line
* ``v3-single-line``    category list + strict single-line output format

Scaffolds are text assets under ``data/templates`` with ``{{name}}``
placeholders. A line ``=== user ===`` separates the instruction part from the
part carrying the post; in the default ``single`` role mode both go out as one
user message.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from modules.codebook import Codebook, Exemplar, LabelVector
from modules.errors import PromptError

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "data" / "templates"
VERSIONS = ("v1-per-theme", "v2-multi-question", "v3-single-line")
DEFAULT_VERSION = "v3-single-line"
ROLE_MODES = ("single", "system-user")
ROLE_MARKER = "=== user ==="
TRUNCATION_MARKER = " [...]"
DEFAULT_EXEMPLAR_BUDGET = 1500

PLACEHOLDERS = {
    "v1-per-theme": {"post", "theme_name", "definition", "code", "examples"},
    "v2-multi-question": {"post", "questions", "examples"},
    "v3-single-line": {"post", "n_themes", "format_hint", "first_code", "last_code", "format_line", "categories", "examples"},
}
RE_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


@dataclass(frozen=True)
class ShotPolicy:
    shots: int = 0
    selection: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.shots < 0:
            raise PromptError(f"shots must be >= 0, got {self.shots}")
        if self.selection is not None:
            object.__setattr__(self, "selection", tuple(int(i) for i in self.selection))
            if len(self.selection) != self.shots:
                raise PromptError(f"selection {list(self.selection)} does not hold {self.shots} index(es)")


@dataclass(frozen=True)
class PromptTemplate:
    version: str
    scaffold: str
    source: str = ""

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.scaffold.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    version: str
    shots: int
    target: tuple[str, ...]
    post_id: str
    payload: str
    system: str | None = None

    @property
    def full_text(self) -> str:
        return self.text if self.system is None else f"{self.system}\n\n{self.text}"

    def messages(self) -> list[dict]:
        msgs = [] if self.system is None else [{"role": "system", "content": self.system}]
        msgs.append({"role": "user", "content": self.text})
        return msgs

    def with_reminder(self, reminder: str) -> RenderedPrompt:
        return RenderedPrompt(
            text=f"{self.text}\n\n{reminder}",
            version=self.version,
            shots=self.shots,
            target=self.target,
            post_id=self.post_id,
            payload=self.payload,
            system=self.system,
        )


def load_template(version=DEFAULT_VERSION, path=None) -> PromptTemplate:
    if version not in VERSIONS:
        raise PromptError(f"unknown template version {version!r}; expected one of {VERSIONS}")
    path = Path(path) if path else TEMPLATE_DIR / f"{version}.txt"
    if not path.exists():
        raise PromptError(f"template scaffold not found: {path}")
    scaffold = path.read_text(encoding="utf-8")
    unknown = set(RE_PLACEHOLDER.findall(scaffold)) - PLACEHOLDERS[version]
    if unknown:
        raise PromptError(f"{path}: unknown placeholder(s) {sorted(unknown)} for {version}")
    if RE_PLACEHOLDER.findall(scaffold).count("post") != 1:
        raise PromptError(f"{path}: scaffold must contain {{{{post}}}} exactly once")
    return PromptTemplate(version=version, scaffold=scaffold, source=str(path))


def canonical_line(v: LabelVector, cb) -> str:
    alphabet = cb.alphabet if isinstance(cb, Codebook) else tuple(cb)
    return ", ".join(f"{code}={v[code]}" for code in alphabet)


def select_exemplars(cb: Codebook, policy: ShotPolicy, seed: int = 0) -> list[Exemplar]:
    pool = cb.exemplars
    if policy.shots == 0:
        return []
    if len(pool) < policy.shots:
        raise PromptError(f"{policy.shots}-shot policy needs {policy.shots} exemplars; codebook has {len(pool)}")
    if policy.selection is not None:
        bad = [i for i in policy.selection if not 0 <= i < len(pool)]
        if bad:
            raise PromptError(f"exemplar index(es) {bad} out of range; codebook has {len(pool)} exemplars")
        return [pool[i] for i in policy.selection]
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    return [pool[int(i)] for i in rng.choice(len(pool), size=policy.shots, replace=False)]


def _truncate(text: str, budget: int) -> str:
    if budget and len(text) > budget:
        return text[:budget].rstrip() + TRUNCATION_MARKER
    return text


def _fill(scaffold: str, values: dict) -> str:
    # one pass, so placeholder-like text inside the post is never expanded
    return RE_PLACEHOLDER.sub(lambda m: values[m.group(1)], scaffold)


def _split_roles(scaffold: str, roles: str) -> tuple[str | None, str]:
    head, marker, tail = scaffold.partition(ROLE_MARKER)
    if not marker:
        return None, scaffold
    if roles == "system-user":
        return head.strip(), tail.strip("\n")
    return None, head.rstrip("\n") + "\n\n" + tail.lstrip("\n")


def _examples_block(exemplars, cb, budget, code=None) -> str:
    if not exemplars:
        return ""
    blocks = []
    for i, ex in enumerate(exemplars, start=1):
        vector = LabelVector.from_mapping(ex.labels, cb.alphabet)
        if code is None:
            answer = f"Classification:\n{canonical_line(vector, cb)}"
        else:
            answer = f"Answer:\n{code}={vector[code]}"
        blocks.append(f'{i}. Post:\n"{_truncate(ex.text, budget)}"\n\n{answer}')
    return "\nExamples:\n\n" + "\n\n".join(blocks) + "\n"


def _payload(post, include_title: bool) -> str:
    body = post.body.strip()
    title = post.title.strip()
    payload = f"{title}\n\n{body}" if include_title and title else body
    if not payload.strip():
        raise PromptError(f"post {post.id!r} has an empty body")
    return payload


def render_prompts(
    post,
    cb: Codebook,
    tpl: PromptTemplate,
    policy: ShotPolicy,
    *,
    seed: int = 0,
    include_title: bool = False,
    roles: str = "single",
    exemplar_char_budget: int = DEFAULT_EXEMPLAR_BUDGET,
) -> list[RenderedPrompt]:
    """Render every prompt one post needs (13 for v1, one otherwise)."""
    if roles not in ROLE_MODES:
        raise PromptError(f"unknown role mode {roles!r}")
    payload = _payload(post, include_title)
    exemplars = select_exemplars(cb, policy, seed)
    system_part, user_part = _split_roles(tpl.scaffold, roles)

    def build(values, target):
        values = {**values, "post": payload}
        system = _fill(system_part, values) if system_part is not None else None
        return RenderedPrompt(
            text=_fill(user_part, values).strip() + "\n",
            version=tpl.version,
            shots=policy.shots,
            target=tuple(target),
            post_id=post.id,
            payload=payload,
            system=system,
        )

    if tpl.version == "v1-per-theme":
        return [
            build(
                {
                    "theme_name": theme.name,
                    "definition": theme.definition,
                    "code": theme.code,
                    "examples": _examples_block(exemplars, cb, exemplar_char_budget, code=theme.code),
                },
                (theme.code,),
            )
            for theme in cb.themes
        ]

    examples = _examples_block(exemplars, cb, exemplar_char_budget)
    if tpl.version == "v2-multi-question":
        questions = "\n\n".join(
            f'{i}. {t.name}: {t.definition} Format: "{t.code}=[answer]".'
            for i, t in enumerate(cb.themes, start=1)
        )
        return [build({"questions": questions, "examples": examples}, cb.alphabet)]

    categories = "\n\n".join(f"{t.code}. {t.name}\n{t.definition}" for t in cb.themes)
    return [
        build(
            {
                "n_themes": str(len(cb)),
                "format_hint": ", ".join(f"{c}={v}" for c, v in zip(cb.alphabet[:2], ("1", "0"))),
                "first_code": cb.alphabet[0],
                "last_code": cb.alphabet[-1],
                "format_line": ", ".join(f"{c}=_" for c in cb.alphabet),
                "categories": categories,
                "examples": examples,
            },
            cb.alphabet,
        )
    ]


def render_prompt(post, cb, tpl, policy, **kwargs):
    """One RenderedPrompt for v2/v3; the per-theme list for v1."""
    prompts = render_prompts(post, cb, tpl, policy, **kwargs)
    return prompts if tpl.version == "v1-per-theme" else prompts[0]
