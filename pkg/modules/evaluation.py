"""Measurement suite for model-prompt combinations.

Headline numbers:
- accuracy is micro over every (post, theme) decision;
- precision / recall / F1 are micro over pooled counts, macro reported alongside;
- a zero denominator yields 0 and is flagged in ``MetricSet.zero_division``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
from scipy.stats import norm

from modules.codebook import Codebook, LabelVector
from modules.errors import DataError, IdMismatchError

logger = logging.getLogger(__name__)

METRICS = ("precision", "recall", "f1", "accuracy")
AGGREGATIONS = ("per-theme", "micro", "macro")
FAILURE_POLICIES = ("exclude-and-report", "score-all-zero", "score-as-wrong")
METRIC_ALIASES = {"model": "label", "f1 score": "f1", "f1_score": "f1", "f₁ score": "f1"}


# ---------- Types ----------
@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricSet:
    precision: float
    recall: float
    f1: float
    accuracy: float
    aggregation: str = "micro"
    n_decisions: int = 0
    zero_division: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    lower: float
    upper: float
    method: str
    confidence: float = 0.95
    n: int = 0
    seed: int | None = None

    def __str__(self):
        return f"{self.point:.3f} [{self.lower:.3f}-{self.upper:.3f}]"


@dataclass(frozen=True)
class RunStats:
    runs: int
    mean: Mapping[str, float]
    sd: Mapping[str, float] | None = None


@dataclass(frozen=True)
class ModelRanking:
    table: pd.DataFrame = field(compare=False)
    tie_method: str = "average"

    @property
    def labels(self) -> list[str]:
        return list(self.table["label"])

    @property
    def avg_ranks(self) -> dict[str, float]:
        return dict(zip(self.table["label"], self.table["avg_rank"]))


@dataclass(frozen=True)
class ThemeDistribution:
    counts: Mapping[str, int]
    n: int

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(self.counts)

    def percentage(self, code: str) -> float:
        return 100.0 * self.counts[code] / self.n if self.n else 0.0

    @property
    def percentages(self) -> dict[str, float]:
        return {c: self.percentage(c) for c in self.counts}

    def top(self, k: int) -> list[str]:
        order = sorted(self.counts, key=lambda c: (-self.counts[c], c))
        return order[:k]


@dataclass(frozen=True)
class DistributionDelta:
    deltas: Mapping[str, float]
    max_abs: float
    max_code: str | None


# ---------- Confusion matrices ----------
def _labels(gold) -> Mapping[str, LabelVector]:
    return gold.labels if hasattr(gold, "labels") else gold


def _check_ids(gold, pred):
    g, p = set(gold), set(pred)
    if g != p:
        raise IdMismatchError(g - p, p - g)


def _decision_arrays(gold, pred, codes):
    """Per-post (rows) x per-code (columns) tp/fp/fn/tn indicator arrays."""
    gold, ids = _labels(gold), sorted(_labels(gold))
    _check_ids(gold, pred)
    g = np.array([[gold[i][c] for c in codes] for i in ids], dtype=np.int64).reshape(len(ids), len(codes))
    p = np.array([[pred[i][c] for c in codes] for i in ids], dtype=np.int64).reshape(len(ids), len(codes))
    return g & p, (1 - g) & p, g & (1 - p), (1 - g) & (1 - p)


def confusion_per_theme(gold, pred, code: str) -> ConfusionMatrix:
    tp, fp, fn, tn = (int(a.sum()) for a in _decision_arrays(gold, pred, (code,)))
    return ConfusionMatrix(tp, fp, fn, tn)


def confusion_matrices(gold, pred, codes) -> dict[str, ConfusionMatrix]:
    tp, fp, fn, tn = (a.sum(axis=0) for a in _decision_arrays(gold, pred, tuple(codes)))
    return {c: ConfusionMatrix(int(tp[i]), int(fp[i]), int(fn[i]), int(tn[i])) for i, c in enumerate(codes)}


# ---------- Metrics ----------
def _ratio(num, den):
    return num / den if den else 0.0


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def _from_counts(cm: ConfusionMatrix, aggregation: str, flags: list) -> MetricSet:
    if cm.tp + cm.fp == 0:
        flags.append("precision")
    if cm.tp + cm.fn == 0:
        flags.append("recall")
    p = _ratio(cm.tp, cm.tp + cm.fp)
    r = _ratio(cm.tp, cm.tp + cm.fn)
    return MetricSet(p, r, f1_score(p, r), _ratio(cm.tp + cm.tn, cm.total), aggregation, cm.total, tuple(flags))


def per_theme_metrics(matrices: Mapping[str, ConfusionMatrix]) -> dict[str, MetricSet]:
    return {code: _from_counts(cm, "per-theme", []) for code, cm in matrices.items()}


def metrics(matrices, aggregation: str = "micro") -> MetricSet:
    """Aggregate per-theme matrices (mapping or sequence)."""
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    items = dict(matrices) if isinstance(matrices, Mapping) else dict(enumerate(matrices))
    if not items:
        raise ValueError("metrics needs at least one confusion matrix")
    pooled = sum(items.values(), ConfusionMatrix())
    if aggregation == "per-theme":
        if len(items) != 1:
            raise ValueError("per-theme aggregation takes exactly one matrix")
        return _from_counts(pooled, "per-theme", [])
    if aggregation == "micro":
        return _from_counts(pooled, "micro", [])
    per = per_theme_metrics(items)
    flags = sorted({f"{code}:{f}" for code, m in per.items() for f in m.zero_division})
    return MetricSet(
        precision=float(np.mean([m.precision for m in per.values()])),
        recall=float(np.mean([m.recall for m in per.values()])),
        f1=float(np.mean([m.f1 for m in per.values()])),
        accuracy=_ratio(pooled.tp + pooled.tn, pooled.total),
        aggregation="macro",
        n_decisions=pooled.total,
        zero_division=tuple(flags),
    )


# ---------- Intervals ----------
def _z(confidence: float) -> float:
    return float(norm.ppf(1 - (1 - confidence) / 2))


def wald_ci(p: float, n: int, confidence: float = 0.95) -> IntervalEstimate:
    if n < 1:
        raise ValueError("wald_ci needs n >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"proportion {p} outside [0, 1]")
    half = _z(confidence) * np.sqrt(p * (1 - p) / n)
    return IntervalEstimate(p, max(0.0, p - half), min(1.0, p + half), "wald", confidence, n)


def _metric_rows(metric, aggregation, TP, FP, FN, TN):
    """Vectorized metric over rows of per-code count arrays (resamples x codes)."""
    if metric == "accuracy":
        return (TP + TN).sum(axis=1) / (TP + FP + FN + TN).sum(axis=1)
    if aggregation == "micro":
        TP, FP, FN = TP.sum(axis=1, keepdims=True), FP.sum(axis=1, keepdims=True), FN.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(TP + FP > 0, TP / np.maximum(TP + FP, 1), 0.0)
        r = np.where(TP + FN > 0, TP / np.maximum(TP + FN, 1), 0.0)
        f = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0.0)
    value = {"precision": p, "recall": r, "f1": f}[metric]
    return value.mean(axis=1)


def bootstrap_ci(
    gold,
    pred,
    metric: str = "f1",
    resamples: int = 2000,
    seed: int = 0,
    confidence: float = 0.95,
    aggregation: str = "micro",
    codes=None,
    chunk: int = 250,
) -> IntervalEstimate:
    """Percentile interval from post-level resampling with replacement."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if resamples < 100:
        raise ValueError("bootstrap needs at least 100 resamples")
    labels = _labels(gold)
    if codes is None:
        codes = next(iter(labels.values())).codes if labels else ()
    arrays = _decision_arrays(gold, pred, tuple(codes))
    n = arrays[0].shape[0]
    if n == 0:
        raise DataError("bootstrap over zero posts")
    point = float(_metric_rows(metric, aggregation, *(a.sum(axis=0, keepdims=True) for a in arrays))[0])
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    stats = []
    done = 0
    while done < resamples:
        size = min(chunk, resamples - done)
        # per-row post counts from drawing n posts with replacement
        idx = rng.integers(0, n, size=(size, n)) + (np.arange(size) * n)[:, None]
        weights = np.bincount(idx.ravel(), minlength=size * n).reshape(size, n)
        stats.append(_metric_rows(metric, aggregation, *(weights @ a for a in arrays)))
        done += size
    stats = np.concatenate(stats)
    alpha = 1 - confidence
    lower, upper = np.percentile(stats, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return IntervalEstimate(point, float(min(lower, point)), float(max(upper, point)), "bootstrap",
                            confidence, resamples, seed)


# ---------- Repeat runs ----------
def run_stats(runs) -> RunStats:
    runs = list(runs)
    if not runs:
        raise ValueError("run_stats needs at least one run")
    modes = {m.aggregation for m in runs}
    if len(modes) > 1:
        raise DataError(f"runs mix aggregation modes: {sorted(modes)}")
    values = {m: np.array([getattr(r, m) for r in runs], dtype=float) for m in METRICS}
    mean = {m: float(v.mean()) for m, v in values.items()}
    sd = {m: float(v.std(ddof=1)) for m, v in values.items()} if len(runs) > 1 else None
    return RunStats(len(runs), mean, sd)


# ---------- Ranking ----------
def _rows_frame(rows) -> pd.DataFrame:
    if isinstance(rows, pd.DataFrame):
        return rows.loc[:, ["label", *METRICS]].copy()
    return pd.DataFrame([{"label": label, **m.as_dict()} for label, m in rows], columns=["label", *METRICS])


def avg_rank(rows, tie_method: str = "average", decimals: int = 12) -> ModelRanking:
    """Mean of the four per-metric descending ranks; lower is better."""
    df = _rows_frame(rows)
    if len(df) < 2:
        raise DataError("ranking needs at least two rows")
    df["label"] = df["label"].astype(str)
    for m in METRICS:
        df[f"rank_{m}"] = df[m].astype(float).round(decimals).rank(method=tie_method, ascending=False)
    df["avg_rank"] = df[[f"rank_{m}" for m in METRICS]].mean(axis=1)
    df = df.sort_values(["avg_rank", "label"], kind="mergesort").reset_index(drop=True)
    return ModelRanking(df, tie_method)


def load_metrics_table(path) -> pd.DataFrame:
    """Metrics-only table: a label column plus precision, recall, f1, accuracy."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"metrics table not found: {path}")
    df = pd.read_csv(path, sep=None, engine="python")
    df.columns = [METRIC_ALIASES.get(c.strip().lower(), c.strip().lower()) for c in df.columns]
    missing = [c for c in ("label", *METRICS) if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    return df


# ---------- Distributions ----------
def theme_distribution(preds: Mapping[str, LabelVector], cb) -> ThemeDistribution:
    alphabet = cb.alphabet if isinstance(cb, Codebook) else tuple(cb)
    if not preds:
        raise DataError("theme distribution over zero classified posts")
    counts = {c: 0 for c in alphabet}
    for v in preds.values():
        for c in alphabet:
            counts[c] += v[c]
    return ThemeDistribution(counts, len(preds))


def distribution_delta(model: ThemeDistribution, gold: ThemeDistribution) -> DistributionDelta:
    if model.codes != gold.codes:
        raise DataError(f"distributions cover different codes: {model.codes} vs {gold.codes}")
    deltas = {c: model.percentage(c) - gold.percentage(c) for c in model.codes}
    worst = max(deltas, key=lambda c: (abs(deltas[c]), -model.codes.index(c)), default=None)
    return DistributionDelta(deltas, abs(deltas[worst]) if worst else 0.0, worst)


# ---------- Failure policy ----------
def apply_failure_policy(gold, preds, failed_ids, policy: str = "exclude-and-report"):
    """Return (gold, preds) label mappings with failed posts handled per policy."""
    if policy not in FAILURE_POLICIES:
        raise ValueError(f"unknown failure policy {policy!r}")
    gold = dict(_labels(gold))
    preds = {k: v for k, v in preds.items() if k not in failed_ids}
    failed = [i for i in failed_ids if i in gold]
    if policy == "exclude-and-report":
        for i in failed:
            del gold[i]
    elif policy == "score-all-zero":
        for i in failed:
            preds[i] = LabelVector.zeros(gold[i].codes)
    else:
        for i in failed:
            preds[i] = gold[i].complement()
    return gold, preds


# ---------- Reports ----------
@dataclass
class LabelReport:
    label: str
    n_posts: int
    n_failed: int
    failure_policy: str
    micro: MetricSet
    macro: MetricSet
    per_theme: dict[str, MetricSet]
    matrices: dict[str, ConfusionMatrix]
    intervals: dict[str, IntervalEstimate]
    run_stats: RunStats
    distribution: ThemeDistribution
    gold_distribution: ThemeDistribution
    delta: DistributionDelta

    @property
    def failure_banner(self) -> str | None:
        if not self.n_failed:
            return None
        return f"{self.n_failed} post(s) failed classification; handled as {self.failure_policy}"


def evaluate_label(
    label: str,
    gold,
    preds_by_run,
    failed_by_run,
    cb: Codebook,
    *,
    failure_policy: str = "exclude-and-report",
    resamples: int = 2000,
    seed: int = 0,
    confidence: float = 0.95,
) -> LabelReport:
    """Evaluate one model-prompt label; run 0 carries the headline numbers.

    Predictions for posts outside the gold set are ignored; gold posts with
    neither a prediction nor a failure record are an id mismatch.
    """
    gold_labels = _labels(gold)
    runs = sorted(preds_by_run)
    if not runs:
        raise DataError(f"{label}: no runs to evaluate")
    per_run = []
    for run in runs:
        failed = {i for i in failed_by_run.get(run, ()) if i in gold_labels}
        preds = {i: v for i, v in preds_by_run[run].items() if i in gold_labels}
        missing = set(gold_labels) - set(preds) - failed
        if missing:
            raise IdMismatchError(missing, ())
        g, p = apply_failure_policy(gold_labels, preds, failed, failure_policy)
        per_run.append((g, p, failed))

    g, p, failed = per_run[0]
    if not g:
        raise DataError(f"{label}: every gold post failed classification")
    codes = cb.alphabet
    matrices = confusion_matrices(g, p, codes)
    micro = metrics(matrices, "micro")
    intervals = {"accuracy": wald_ci(micro.accuracy, micro.n_decisions, confidence)}
    for m in ("precision", "recall", "f1"):
        intervals[m] = bootstrap_ci(g, p, m, resamples, seed, confidence, "micro", codes)
    if failed and failure_policy == "exclude-and-report":
        logger.warning("%s: %d failed post(s) excluded from scoring", label, len(failed))
    stats = run_stats(metrics(confusion_matrices(rg, rp, codes), "micro") for rg, rp, _ in per_run)
    dist = theme_distribution(p, cb)
    gold_dist = theme_distribution(g, cb)
    return LabelReport(
        label=label,
        n_posts=len(g),
        n_failed=len(failed),
        failure_policy=failure_policy,
        micro=micro,
        macro=metrics(matrices, "macro"),
        per_theme=per_theme_metrics(matrices),
        matrices=matrices,
        intervals=intervals,
        run_stats=stats,
        distribution=dist,
        gold_distribution=gold_dist,
        delta=distribution_delta(dist, gold_dist),
    )


def _r(x, places=6):
    return None if x is None else round(float(x), places)


def distribution_records(dist: ThemeDistribution, top_k: int = 0, gold: ThemeDistribution | None = None):
    top = set(dist.top(top_k)) if top_k else set()
    rows = []
    for c in dist.codes:
        row = {"code": c, "count": int(dist.counts[c]), "n": dist.n, "percent": f"{dist.percentage(c):.1f}"}
        if top_k:
            row["top"] = c in top
        if gold is not None:
            row["gold_count"] = int(gold.counts[c])
            row["gold_percent"] = f"{gold.percentage(c):.1f}"
            row["delta_points"] = f"{dist.percentage(c) - gold.percentage(c):+.1f}"
        rows.append(row)
    return rows


def ranking_records(ranking: ModelRanking) -> list[dict]:
    cols = ["label", *METRICS, *(f"rank_{m}" for m in METRICS), "avg_rank"]
    return [{k: (_r(v) if k != "label" else v) for k, v in row.items()} for row in ranking.table[cols].to_dict("records")]


@dataclass
class EvalReport:
    labels: list[LabelReport]
    ranking: ModelRanking | None = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"notes": self.notes, "labels": []}
        for rep in self.labels:
            out["labels"].append(
                {
                    "label": rep.label,
                    "n_posts": rep.n_posts,
                    "n_failed": rep.n_failed,
                    "failure_policy": rep.failure_policy,
                    "failure_banner": rep.failure_banner,
                    "micro": {**{k: _r(v) for k, v in rep.micro.as_dict().items()},
                              "n_decisions": rep.micro.n_decisions,
                              "zero_division": list(rep.micro.zero_division)},
                    "macro": {**{k: _r(v) for k, v in rep.macro.as_dict().items()},
                              "zero_division": list(rep.macro.zero_division)},
                    "intervals": {
                        k: {"point": _r(iv.point), "lower": _r(iv.lower), "upper": _r(iv.upper),
                            "method": iv.method, "confidence": iv.confidence, "n": iv.n, "seed": iv.seed}
                        for k, iv in rep.intervals.items()
                    },
                    "runs": {
                        "R": rep.run_stats.runs,
                        "mean": {k: _r(v) for k, v in rep.run_stats.mean.items()},
                        "sd": None if rep.run_stats.sd is None else {k: _r(v) for k, v in rep.run_stats.sd.items()},
                    },
                    "per_theme": {
                        c: {**asdict(rep.matrices[c]), **{k: _r(v) for k, v in m.as_dict().items()}}
                        for c, m in rep.per_theme.items()
                    },
                    "distribution": distribution_records(rep.distribution, gold=rep.gold_distribution),
                    "max_abs_delta": {"code": rep.delta.max_code, "points": _r(rep.delta.max_abs, 3)},
                }
            )
        if self.ranking is not None:
            out["ranking"] = ranking_records(self.ranking)
        return out

    def to_frame(self) -> pd.DataFrame:
        """Flat one-row-per-label table for spreadsheets."""
        rows = []
        ranks = self.ranking.avg_ranks if self.ranking is not None else {}
        for rep in self.labels:
            row = {"label": rep.label, "n_posts": rep.n_posts, "n_failed": rep.n_failed}
            for m in METRICS:
                iv = rep.intervals[m]
                row[m] = _r(getattr(rep.micro, m))
                row[f"{m}_lower"] = _r(iv.lower)
                row[f"{m}_upper"] = _r(iv.upper)
                row[f"{m}_macro"] = _r(getattr(rep.macro, m))
                row[f"{m}_sd"] = None if rep.run_stats.sd is None else _r(rep.run_stats.sd[m])
            row["runs"] = rep.run_stats.runs
            row["avg_rank"] = _r(ranks.get(rep.label))
            rows.append(row)
        return pd.DataFrame(rows)

    def write(self, out_dir, stem="report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{stem}.json"
        csv_path = out_dir / f"{stem}.csv"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        self.to_frame().to_csv(csv_path, index=False, lineterminator="\n")
        return json_path, csv_path
