"""Command implementations: ingest, classify, evaluate, distribute, rank.

Each ``cmd_*`` takes a ``RunConfig`` and writes into ``cfg.output.dir``:

    corpus/        derived corpora + ingest_summary.json
    manifest.json  frozen config, input hashes, per-post ledger
    results.jsonl  one final record per (label, run, post)
    cache.jsonl    response cache (or output.cache)     audit.jsonl  request log
    evaluation/    report.json + report.csv (or ranking.*)
    distribution/  distribution.json + distribution.csv
"""

from __future__ import annotations

import json
import logging
import re
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import pandas as pd

from modules import __version__
from modules.backends import CompletionClient, classify_with_retry
from modules.codebook import Codebook, load_codebook, load_gold
from modules.config import BackendConfig, RunConfig
from modules.corpus import (
    SamplingSpec,
    dedup_clean,
    keyword_filter,
    load_keywords,
    load_posts,
    sample_random,
    temporal_split,
    write_posts,
)
from modules.errors import BackendError, ClassificationFailure, ConfigError, PromptError, ThemagatorError
from modules.evaluation import (
    EvalReport,
    ModelRanking,
    avg_rank,
    distribution_records,
    evaluate_label,
    load_metrics_table,
    ranking_records,
    theme_distribution,
)
from modules.parsing import ParseOutcome, assemble_per_theme, parse_single_answer, parse_single_line
from modules.prompting import ShotPolicy, load_template, render_prompts, select_exemplars
from modules.store import ResultsStore, RunLock, RunManifest, file_sha256

logger = logging.getLogger(__name__)

LEDGER_FLUSH_EVERY = 25


@dataclass(frozen=True)
class Combination:
    label: str
    backend: BackendConfig
    policy: ShotPolicy
    promoted_from: str | None = None

    def key(self, run: int) -> str:
        return f"{self.label}@{run}"


@dataclass
class StageSummary:
    counts: dict[str, int] = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        return ", ".join(f"{k}={v}" for k, v in self.counts.items())


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ThemagatorError as e:
        e.args = (f"{name}: {e}",)
        raise


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _write_csv(path: Path, rows, columns=None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, lineterminator="\n")
    return path


# ---------- Ingest ----------
def cmd_ingest(cfg: RunConfig) -> StageSummary:
    """load -> keyword_filter -> dedup_clean -> [temporal_split] -> [sample_random]."""
    c = cfg.corpus
    if c.path is None:
        raise ConfigError("corpus.path is required for ingest")
    out = cfg.output.dir / "corpus"
    summary = StageSummary()

    corpus = _stage("load", load_posts, c.path, c.format, c.name)
    summary.counts["loaded"] = len(corpus)
    keywords = _stage("filter", load_keywords, c.keywords)
    rule = c.rule or keywords.rule
    corpus = _stage("filter", keyword_filter, corpus, keywords, rule)
    summary.counts["filtered"] = len(corpus)
    summary.files["filtered"] = str(write_posts(corpus, out / "filtered.jsonl"))
    corpus, report = _stage("clean", dedup_clean, corpus)
    summary.counts["cleaned"] = len(corpus)
    summary.details["removed"] = report.removed
    summary.files["cleaned"] = str(write_posts(corpus, out / "cleaned.jsonl"))

    if c.split_at is not None:
        before, after = _stage("split", temporal_split, corpus, c.split_at)
        summary.counts["before"] = len(before)
        summary.counts["after"] = len(after)
        summary.files["before"] = str(write_posts(before, out / "before.jsonl"))
        summary.files["after"] = str(write_posts(after, out / "after.jsonl"))
        corpus = {"all": corpus, "before": before, "after": after}[c.sample_from]
    elif c.sample_from != "all":
        raise ConfigError(f"corpus.sample_from={c.sample_from!r} needs corpus.split_at")

    if c.sample_n is not None:
        spec = SamplingSpec(target_n=c.sample_n, seed=cfg.seeds.sampling)
        corpus = _stage("sample", sample_random, corpus, spec)
        summary.counts["sampled"] = len(corpus)
        summary.files["sampled"] = str(write_posts(corpus, out / "sampled.jsonl"))

    summary.files["corpus"] = str(write_posts(corpus, out / "corpus.jsonl"))
    summary.details.update(rule=rule, provenance=corpus.provenance, seed=cfg.seeds.sampling)
    _write_json(out / "ingest_summary.json", {"counts": summary.counts, **summary.details, "files": summary.files})
    logger.info("ingest %s", summary.line())
    return summary


# ---------- Classify ----------
def combination_label(template: str, dataset: str, shots: int, model: str) -> str:
    return template.format(dataset=dataset, shots=shots, model=model)


_LABEL_FIELDS = {"dataset": r"(?P<dataset>.+?)", "shots": r"(?P<shots>\d+)", "model": r"(?P<model>.+)"}


def label_pattern(template: str) -> re.Pattern:
    """Regex that splits a combination label back into dataset, shots and model."""
    parts = []
    for literal, name, _spec, _conv in string.Formatter().parse(template):
        parts.append(re.escape(literal))
        if name is not None:
            if name not in _LABEL_FIELDS:
                raise ConfigError(f"label template {template!r}: unknown field {{{name}}}")
            parts.append(_LABEL_FIELDS[name])
    return re.compile("".join(parts))


def load_promotion(path, top_n: int, template: str) -> list[tuple[str, str, int]]:
    """Top ``top_n`` rows of a ranking as ``(source label, model, shots)``, best first.

    Reads ranking.json or report.json; a CSV is treated as a metrics table and ranked.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"promotion ranking not found: {path}")
    if path.suffix == ".csv":
        rows = ranking_records(avg_rank(load_metrics_table(path)))
    else:
        rows = json.loads(path.read_text(encoding="utf-8")).get("ranking") or []
    if not rows or any("label" not in r or "avg_rank" not in r for r in rows):
        raise ConfigError(f"{path}: no ranking rows with label and avg_rank")
    ranked = sorted(rows, key=lambda r: (float(r["avg_rank"]), str(r["label"])))[:top_n]
    pattern = label_pattern(template)
    chosen = []
    for row in ranked:
        m = pattern.fullmatch(str(row["label"]).rsplit("/", 1)[-1])
        if m is None or "model" not in m.groupdict() or "shots" not in m.groupdict():
            raise ConfigError(f"{path}: cannot read model and shots from label {row['label']!r} with {template!r}")
        chosen.append((str(row["label"]), m["model"], int(m["shots"])))
    return chosen


def _policy(cfg: RunConfig, k: int) -> ShotPolicy:
    selection = cfg.prompting.selections.get(k)
    return ShotPolicy(k, tuple(selection) if selection is not None else None)


def combinations(cfg: RunConfig) -> list[Combination]:
    """Every (backend x shots) pair, or the promoted pairs of an earlier ranking."""
    template, dataset = cfg.classify.label_template, cfg.classify.dataset
    combos = []
    if cfg.classify.promote_from is not None:
        backends = {b.name: b for b in cfg.backends}
        for source, model, k in load_promotion(cfg.classify.promote_from, cfg.classify.promote_top, template):
            if model not in backends:
                raise ConfigError(f"promoted combination {source!r} needs a backend labeled {model!r}")
            label = combination_label(template, dataset, k, model)
            combos.append(Combination(label, backends[model], _policy(cfg, k), promoted_from=source))
            logger.info("promoted %s -> %s", source, label)
    else:
        for backend in cfg.backends:
            for k in cfg.prompting.shots:
                label = combination_label(template, dataset, k, backend.name)
                combos.append(Combination(label, backend, _policy(cfg, k)))
    labels = [c.label for c in combos]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"label template {cfg.classify.label_template!r} yields duplicate labels {labels}")
    return combos


def classify_corpus_path(cfg: RunConfig) -> Path:
    return cfg.classify.corpus or cfg.output.dir / "corpus" / "corpus.jsonl"


def _load_classify_corpus(cfg: RunConfig):
    path = classify_corpus_path(cfg)
    if not path.exists():
        raise ConfigError(f"corpus to classify not found: {path} (run ingest or set classify.corpus)")
    return load_posts(path, cfg.classify.format, cfg.classify.dataset)


def classify_post(client, cfg: RunConfig, cb: Codebook, tpl, combo: Combination, post, run: int) -> dict:
    """Classify one post under one combination; returns its store record."""
    record = {"label": combo.label, "run": run, "post_id": post.id, "calls": []}
    mode = cfg.prompting.parse_mode
    try:
        prompts = render_prompts(
            post, cb, tpl, combo.policy,
            seed=cfg.seeds.exemplar,
            include_title=cfg.prompting.include_title,
            roles=cfg.prompting.roles,
            exemplar_char_budget=cfg.prompting.exemplar_char_budget,
        )
    except PromptError as e:
        return {**record, "status": "failed", "labels": None,
                "failure": {"reason": "prompt-error", "detail": str(e), "codes": []}}

    vectors, failure = [], None
    for prompt in prompts:
        if len(prompt.target) == 1 and tpl.version == "v1-per-theme":
            parser = partial(parse_single_answer, code=prompt.target[0], mode=mode)
        else:
            parser = partial(parse_single_line, cb=cb, mode=mode)
        try:
            vector, result = classify_with_retry(client, cfg.retry, prompt, parser, run=run)
        except ClassificationFailure as e:
            result, failure = e.result, e.failure
            vector = None
        record["calls"].append(
            {"target": "".join(prompt.target), "attempts": result.attempts,
             "fingerprint": result.fingerprint, "raw_attempts": list(result.raw_attempts)}
        )
        if vector is None:
            break
        vectors.append(vector)

    if failure is not None:
        return {**record, "status": "failed", "labels": None,
                "failure": {"reason": failure.reason, "detail": failure.detail, "codes": list(failure.codes)}}
    if tpl.version == "v1-per-theme":
        vector = assemble_per_theme([ParseOutcome.success(v) for v in vectors], cb).vector
    else:
        vector = vectors[0]
    return {**record, "status": "classified", "labels": vector.as_dict(), "failure": None}


@dataclass
class ClassifySummary:
    per_combination: dict[str, dict[str, int]]
    store: str

    def lines(self) -> list[str]:
        return [
            f"{key}: classified={c['classified']}, failed={c['failed']}, pending={c['pending']}"
            for key, c in self.per_combination.items()
        ]

    @property
    def totals(self) -> dict[str, int]:
        out = {"classified": 0, "failed": 0, "pending": 0}
        for c in self.per_combination.values():
            for k in out:
                out[k] += c[k]
        return out


def response_cache_path(cfg: RunConfig) -> Path:
    return cfg.output.cache or cfg.output.dir / "cache.jsonl"


def _input_hashes(cfg: RunConfig, tpl) -> dict:
    return {
        "corpus": file_sha256(classify_corpus_path(cfg)),
        "codebook": file_sha256(cfg.codebook),
        "template": tpl.sha256,
    }


def cmd_classify(
    cfg: RunConfig,
    *,
    resume: bool = False,
    offline: bool = False,
    clients: dict | None = None,
    session=None,
    sleep=time.sleep,
) -> ClassifySummary:
    """Classify every post under every (backend x shot policy) combination and run."""
    if offline:
        remote = [b.name for b in cfg.backends if b.kind == "remote-chat"]
        if remote:
            raise ConfigError(f"--offline forbids remote backends: {', '.join(remote)}")
    corpus = _load_classify_corpus(cfg)
    cb = load_codebook(cfg.codebook)
    tpl = load_template(cfg.prompting.version, cfg.prompting.template_path)
    combos = combinations(cfg)
    for combo in combos:
        select_exemplars(cb, combo.policy, cfg.seeds.exemplar)
    runs = cfg.runs
    out = cfg.output.dir
    store = ResultsStore(out / "results.jsonl")
    manifest_path = out / "manifest.json"
    config_dict = cfg.manifest_dict()
    promoted = [{"label": c.label, "from": c.promoted_from} for c in combos if c.promoted_from]
    if promoted:
        config_dict["promotion"] = promoted
    hashes = _input_hashes(cfg, tpl)
    keys = [combo.key(r) for combo in combos for r in range(runs)]
    if clients is None:
        clients = {
            b.name: CompletionClient(b, cfg.retry, response_cache_path(cfg), out / "audit.jsonl",
                                     session=session, sleep=sleep)
            for b in cfg.backends
        }

    with RunLock(out):
        if manifest_path.exists():
            if not resume:
                raise ConfigError(f"{out} already holds a run; pass --resume or choose another output.dir")
            manifest = RunManifest.load(manifest_path)
            manifest.check_frozen(config_dict, hashes)
            store.repair()
            # ledger is rebuilt from the store; a torn final line leaves its post pending
            for key, statuses in manifest.ledger.items():
                for pid in statuses:
                    manifest.set_status(key, pid, "pending")
            for rec in store.records():
                key = f"{rec['label']}@{rec['run']}"
                if key in manifest.ledger:
                    manifest.set_status(key, rec["post_id"], rec["status"])
            manifest.flush()
        else:
            if store.path.exists():
                raise ConfigError(f"{store.path} exists without a manifest; choose another output.dir")
            manifest = RunManifest.create(manifest_path, config_dict, hashes, __version__, keys, corpus.ids)

        posts = {p.id: p for p in corpus.posts}
        try:
            for combo in combos:
                client = clients[combo.backend.name]
                for run in range(runs):
                    _classify_pending(client, cfg, cb, tpl, combo, run, posts, store, manifest)
        finally:
            manifest.flush()
        manifest.finish()

    summary = ClassifySummary({k: manifest.counts(k) for k in keys}, str(store.path))
    logger.info("classify totals %s", summary.totals)
    return summary


def _classify_pending(client, cfg, cb, tpl, combo, run, posts, store, manifest):
    key = combo.key(run)
    pending = manifest.pending(key)
    if not pending:
        return
    logger.info("%s: %d pending post(s)", key, len(pending))
    workers = min(cfg.classify.workers, combo.backend.in_flight)
    executor = ThreadPoolExecutor(max_workers=workers)
    futures = [executor.submit(classify_post, client, cfg, cb, tpl, combo, posts[pid], run) for pid in pending]
    try:
        # submission order keeps stores byte-identical across resumes
        for n, (pid, future) in enumerate(zip(pending, futures), start=1):
            record = future.result()
            store.append(record)
            manifest.set_status(key, pid, record["status"])
            if n % LEDGER_FLUSH_EVERY == 0:
                manifest.flush()
    except BackendError:
        logger.error("%s: backend failure; ledger kept for --resume", key)
        executor.shutdown(wait=True, cancel_futures=True)
        raise
    executor.shutdown(wait=True)


# ---------- Evaluate ----------
def _scoped_labels(stores):
    """(label shown in reports, store, label in store) for each stored label."""
    out = []
    for store in stores:
        for label in store.labels:
            shown = label if len(stores) == 1 else f"{store.path.parent.name}/{label}"
            out.append((shown, store, label))
    return out


def cmd_evaluate(cfg: RunConfig, *, stores=None, metrics_tables=None):
    """Score stored predictions against gold, or rank metrics-only tables.

    Returns an ``EvalReport``, or a ``ModelRanking`` in metrics-only mode.
    """
    out = cfg.output.dir / "evaluation"
    ev = cfg.evaluation
    if metrics_tables:
        frame = pd.concat([load_metrics_table(p) for p in metrics_tables], ignore_index=True)
        ranking = avg_rank(frame, ev.tie_method)
        rows = ranking_records(ranking)
        _write_json(out / "ranking.json", {"tie_method": ev.tie_method, "ranking": rows})
        _write_csv(out / "ranking.csv", rows)
        return ranking

    if cfg.gold is None:
        raise ConfigError("evaluate needs a gold label file (gold:)")
    cb = load_codebook(cfg.codebook)
    corpus = _load_classify_corpus(cfg)
    gold = load_gold(cfg.gold, corpus, cb)
    stores = [ResultsStore(p) for p in (stores or [cfg.output.dir / "results.jsonl"])]
    reports = []
    cache = {}
    for shown, store, label in _scoped_labels(stores):
        if store.path not in cache:
            cache[store.path] = store.predictions(cb.alphabet)
        preds, failed = cache[store.path]
        reports.append(
            evaluate_label(
                shown, gold, preds[label], failed[label], cb,
                failure_policy=ev.failure_policy,
                resamples=ev.bootstrap_resamples,
                seed=cfg.seeds.bootstrap,
                confidence=ev.confidence,
            )
        )
    ranking = avg_rank([(r.label, r.micro) for r in reports], ev.tie_method) if len(reports) >= 2 else None
    report = EvalReport(
        reports,
        ranking,
        notes={
            "accuracy": "micro over (post, theme) decisions; Wald interval",
            "precision_recall_f1": "micro over pooled counts; macro reported alongside",
            "bootstrap": f"percentile, post-level, {ev.bootstrap_resamples} resamples, seed {cfg.seeds.bootstrap}",
            "confidence": ev.confidence,
            "failure_policy": ev.failure_policy,
            "gold_posts": len(gold),
        },
    )
    report.write(out)
    return report


# ---------- Distribute ----------
def cmd_distribute(cfg: RunConfig, *, store=None, top_k=None) -> dict:
    """Theme distribution per label over run 0, no gold needed."""
    cb = load_codebook(cfg.codebook)
    store = ResultsStore(store or cfg.output.dir / "results.jsonl")
    preds, failed = store.predictions(cb.alphabet)
    k = top_k or cfg.evaluation.top_k
    result, doc, flat = {}, {}, []
    for label in sorted(preds):
        dist = theme_distribution(preds[label][0], cb)
        result[label] = dist
        rows = distribution_records(dist, k)
        doc[label] = {"n": dist.n, "failed": len(failed[label][0]), "top": dist.top(k), "codes": rows}
        flat.extend({"label": label, **row} for row in rows)
    out = cfg.output.dir / "distribution"
    _write_json(out / "distribution.json", doc)
    _write_csv(out / "distribution.csv", flat)
    return result


# ---------- Rank ----------
def cmd_rank(paths, *, tie_method: str = "average", out_dir=None) -> ModelRanking:
    """Average-rank leaderboard over externally supplied metrics tables."""
    paths = [paths] if isinstance(paths, (str, Path)) else list(paths)
    frame = pd.concat([load_metrics_table(p) for p in paths], ignore_index=True)
    ranking = avg_rank(frame, tie_method)
    if out_dir is not None:
        rows = ranking_records(ranking)
        _write_json(Path(out_dir) / "ranking.json", {"tie_method": tie_method, "ranking": rows})
        _write_csv(Path(out_dir) / "ranking.csv", rows)
    return ranking
