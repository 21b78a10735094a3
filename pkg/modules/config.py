"""Run configuration: one YAML document validated with pydantic.

Sections mirror the modules: ``corpus`` (ingest), ``classify``, ``codebook``,
``gold``, ``prompting``, ``backends``, ``retry``, ``evaluation``, ``output``
and ``seeds``. Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import logging
import math
from datetime import datetime
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from modules.errors import ConfigError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
DEFAULT_CODEBOOK = DATA_DIR / "codebook.yaml"
DEFAULT_KEYWORDS = DATA_DIR / "keywords.yaml"
DEFAULT_MOCK_RULES = DATA_DIR / "mock_rules.yaml"
DEFAULT_LABEL_TEMPLATE = "{dataset}_{shots}shot_{model}"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackendConfig(_Section):
    kind: Literal["remote-chat", "mock-rules", "replay"] = "mock-rules"
    label: Optional[str] = None
    endpoint: Optional[str] = None
    model: Optional[str] = None
    temperature: float = Field(default=0.0, ge=0.0)
    max_output_tokens: int = Field(default=256, ge=1)
    credential_env: str = "OPENAI_API_KEY"
    timeout: float = Field(default=60.0, gt=0)
    replay_path: Optional[Path] = None
    rules_path: Optional[Path] = None
    in_flight: int = Field(default=4, ge=1)
    rate_per_second: Optional[float] = Field(default=None, gt=0)
    cache: bool = True

    @field_validator("temperature")
    @classmethod
    def _finite(cls, value):
        if not math.isfinite(value):
            raise ValueError("temperature must be finite")
        return value

    @model_validator(mode="after")
    def _kind_requirements(self):
        if self.kind == "remote-chat" and not (self.endpoint and self.model):
            raise ValueError("remote-chat backend requires endpoint and model")
        if self.kind == "replay" and self.replay_path is None:
            raise ValueError("replay backend requires replay_path")
        return self

    @property
    def name(self) -> str:
        """Model label used in model-prompt combination names."""
        return self.label or self.model or self.kind

    @property
    def model_id(self) -> str:
        return self.model or self.kind

    @property
    def deterministic(self) -> bool:
        return self.kind != "remote-chat" or self.temperature == 0


class RetryPolicy(_Section):
    max_attempts: int = Field(default=3, ge=1)
    reask_on_malformed: bool = True
    initial_delay: float = Field(default=1.0, ge=0)
    multiplier: float = Field(default=2.0, ge=1)
    max_delay: float = Field(default=30.0, ge=0)
    transport_attempts: int = Field(default=5, ge=1)


class CorpusSection(_Section):
    path: Optional[Path] = None
    format: Literal["post-lines", "delimited-table"] = "post-lines"
    name: str = "corpus"
    keywords: Path = DEFAULT_KEYWORDS
    rule: Optional[str] = None
    split_at: Optional[datetime] = None
    sample_n: Optional[int] = Field(default=None, ge=1)
    sample_from: Literal["all", "before", "after"] = "all"


class ClassifySection(_Section):
    corpus: Optional[Path] = None
    format: Literal["post-lines", "delimited-table"] = "post-lines"
    dataset: str = "DS1"
    label_template: str = DEFAULT_LABEL_TEMPLATE
    runs: Optional[int] = Field(default=None, ge=1)
    workers: int = Field(default=4, ge=1)
    promote_from: Optional[Path] = None
    promote_top: int = Field(default=1, ge=1)


class PromptingSection(_Section):
    version: Literal["v1-per-theme", "v2-multi-question", "v3-single-line"] = "v3-single-line"
    template_path: Optional[Path] = None
    shots: list[int] = Field(default_factory=lambda: [2])
    selections: dict[int, list[int]] = Field(default_factory=dict)
    include_title: bool = False
    roles: Literal["single", "system-user"] = "single"
    exemplar_char_budget: int = Field(default=1500, ge=0)
    parse_mode: Literal["strict", "lenient"] = "lenient"

    @field_validator("shots")
    @classmethod
    def _shots(cls, value):
        if not value or any(k < 0 for k in value):
            raise ValueError("shots must list at least one non-negative count")
        return value


class EvaluationSection(_Section):
    failure_policy: Literal["exclude-and-report", "score-all-zero", "score-as-wrong"] = "exclude-and-report"
    confidence: float = Field(default=0.95, gt=0, lt=1)
    bootstrap_resamples: int = Field(default=2000, ge=100)
    tie_method: Literal["average", "min", "max", "first", "dense"] = "average"
    top_k: int = Field(default=3, ge=1)


class OutputSection(_Section):
    dir: Path = Path("runs/latest")
    # response cache shared across run directories; default <dir>/cache.jsonl
    cache: Optional[Path] = None


class Seeds(_Section):
    sampling: int = 20240101
    exemplar: int = 7
    bootstrap: int = 2025


class RunConfig(_Section):
    corpus: CorpusSection = Field(default_factory=CorpusSection)
    classify: ClassifySection = Field(default_factory=ClassifySection)
    codebook: Path = DEFAULT_CODEBOOK
    gold: Optional[Path] = None
    prompting: PromptingSection = Field(default_factory=PromptingSection)
    backends: list[BackendConfig] = Field(default_factory=lambda: [BackendConfig()])
    retry: RetryPolicy = Field(default_factory=RetryPolicy)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    output: OutputSection = Field(default_factory=OutputSection)
    seeds: Seeds = Field(default_factory=Seeds)

    @model_validator(mode="after")
    def _unique_labels(self):
        names = [b.name for b in self.backends]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"backend labels must be unique: {dupes}")
        return self

    @property
    def runs(self) -> int:
        """Repeat runs: explicit, else 1 when every backend is deterministic, else 3."""
        if self.classify.runs is not None:
            return self.classify.runs
        return 1 if all(b.deterministic for b in self.backends) else 3

    def manifest_dict(self) -> dict:
        data = self.model_dump(mode="json")
        data["classify"]["runs"] = self.runs
        return data


def _resolve(path, base: Path):
    if path is None:
        return None
    path = Path(path).expanduser()
    return path if path.is_absolute() else (base / path).resolve()


def resolve_paths(cfg: RunConfig, base) -> RunConfig:
    base = Path(base)
    cfg = cfg.model_copy(deep=True)
    cfg.corpus.path = _resolve(cfg.corpus.path, base)
    cfg.corpus.keywords = _resolve(cfg.corpus.keywords, base)
    cfg.classify.corpus = _resolve(cfg.classify.corpus, base)
    cfg.codebook = _resolve(cfg.codebook, base)
    cfg.gold = _resolve(cfg.gold, base)
    cfg.prompting.template_path = _resolve(cfg.prompting.template_path, base)
    cfg.output.dir = _resolve(cfg.output.dir, base)
    cfg.output.cache = _resolve(cfg.output.cache, base)
    cfg.classify.promote_from = _resolve(cfg.classify.promote_from, base)
    for b in cfg.backends:
        b.replay_path = _resolve(b.replay_path, base)
        b.rules_path = _resolve(b.rules_path, base)
    return cfg


def apply_seed_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``name=value`` seed overrides from the command line."""
    if not overrides:
        return cfg
    seeds = cfg.seeds.model_dump()
    for item in overrides:
        name, sep, value = str(item).partition("=")
        if not sep or name not in seeds:
            raise ConfigError(f"bad --seed {item!r}; expected one of {sorted(seeds)}=<int>")
        try:
            seeds[name] = int(value)
        except ValueError:
            raise ConfigError(f"bad --seed {item!r}: {value!r} is not an integer") from None
    return cfg.model_copy(update={"seeds": Seeds(**seeds)})


def config_from_dict(raw: dict, base=".") -> RunConfig:
    try:
        cfg = RunConfig.model_validate(raw or {})
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from None
    return resolve_paths(cfg, base)


def load_config(path=None, seeds=None) -> RunConfig:
    """Read a YAML run configuration; no path means all defaults."""
    if path is None:
        return apply_seed_overrides(config_from_dict({}, Path.cwd()), seeds)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = config_from_dict(raw, path.parent.resolve())
    logger.debug("loaded config %s", path)
    return apply_seed_overrides(cfg, seeds)
