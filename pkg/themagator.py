"""Themagator command line.

    python themagator.py ingest     --config config.yaml
    python themagator.py classify   --config config.yaml [--resume] [--offline]
    python themagator.py evaluate   --config config.yaml [--store a.jsonl ...] [--metrics-table t.csv ...]
    python themagator.py distribute --config config.yaml [--top-k 4]
    python themagator.py rank       data/table1_metrics.csv

Exit codes: 0 ok, 1 usage/config, 2 data, 3 backend failure after retries.
"""

from __future__ import annotations

import argparse
import logging
import sys

from dotenv import load_dotenv

from modules import __version__
from modules.config import load_config
from modules.errors import ThemagatorError
from modules.evaluation import EvalReport
from modules.pipeline import cmd_classify, cmd_distribute, cmd_evaluate, cmd_ingest, cmd_rank


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 like config errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"❌ {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="themagator", description="LLM-assisted thematic analysis of posts")
    parser.add_argument("--version", action="version", version=f"themagator {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (YAML)")
    common.add_argument("--seed", action="append", default=[], metavar="NAME=VALUE",
                        help="override a seed (sampling, exemplar, bootstrap)")
    common.add_argument("--offline", action="store_true", help="forbid remote backends")
    common.add_argument("--resume", action="store_true", help="continue an interrupted classify run")
    common.add_argument("--verbose", "-v", action="store_true")

    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("ingest", parents=[common], help="load, filter, clean, split and sample posts")
    sub.add_parser("classify", parents=[common], help="classify posts with every model-prompt combination")
    ev = sub.add_parser("evaluate", parents=[common], help="score stored predictions against gold labels")
    ev.add_argument("--store", action="append", default=[], help="results store(s) to compare")
    ev.add_argument("--metrics-table", action="append", default=[], help="metrics-only input; ranks only")
    dist = sub.add_parser("distribute", parents=[common], help="theme distribution over classified posts")
    dist.add_argument("--store", help="results store (default: output dir)")
    dist.add_argument("--top-k", type=int, default=None)
    rank = sub.add_parser("rank", parents=[common], help="average-rank leaderboard from metrics tables")
    rank.add_argument("tables", nargs="+", help="CSV with label, precision, recall, f1, accuracy")
    rank.add_argument("--ties", default=None, choices=["average", "min", "max", "first", "dense"])
    rank.add_argument("--out", default=None, help="directory for ranking.json / ranking.csv")
    return parser


def _print_ranking(ranking):
    print(f"{'label':<28} {'P':>6} {'R':>6} {'F1':>6} {'Acc':>6} {'Avg Rank':>9}")
    for row in ranking.table.itertuples():
        print(f"{row.label:<28} {row.precision:>6.3f} {row.recall:>6.3f} {row.f1:>6.3f} "
              f"{row.accuracy:>6.3f} {row.avg_rank:>9.3f}")


def _print_report(report: EvalReport):
    for rep in report.labels:
        iv = rep.intervals
        print(f"✅ {rep.label}: accuracy {iv['accuracy']}, precision {iv['precision']}, "
              f"recall {iv['recall']}, F1 {iv['f1']} (n={rep.n_posts})")
        if rep.failure_banner:
            print(f"⚠️  {rep.failure_banner}")
    if report.ranking is not None:
        _print_ranking(report.ranking)


def run(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.verb == "ingest":
        print("🔄 Ingesting posts...")
        summary = cmd_ingest(cfg)
        print(f"✅ {summary.line()}")
        print(f"   corpus written to {summary.files['corpus']}")
    elif args.verb == "classify":
        print(f"🔄 Classifying with {len(cfg.backends)} backend(s), {cfg.runs} run(s)...")
        summary = cmd_classify(cfg, resume=args.resume, offline=args.offline)
        for line in summary.lines():
            print(f"✅ {line}")
        if summary.totals["failed"]:
            print(f"⚠️  {summary.totals['failed']} classification failure(s) recorded")
    elif args.verb == "evaluate":
        print("🔄 Evaluating...")
        result = cmd_evaluate(cfg, stores=args.store or None, metrics_tables=args.metrics_table or None)
        if isinstance(result, EvalReport):
            _print_report(result)
        else:
            _print_ranking(result)
        print(f"✅ report written to {cfg.output.dir / 'evaluation'}")
    elif args.verb == "distribute":
        dists = cmd_distribute(cfg, store=args.store, top_k=args.top_k)
        k = args.top_k or cfg.evaluation.top_k
        for label, dist in dists.items():
            top = ", ".join(f"{c} ({dist.percentage(c):.1f}%, {dist.counts[c]})" for c in dist.top(k))
            print(f"✅ {label} (n={dist.n}): {top}")
    elif args.verb == "rank":
        ranking = cmd_rank(args.tables, tie_method=args.ties or cfg.evaluation.tie_method, out_dir=args.out)
        _print_ranking(ranking)
    return 0


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except ThemagatorError as e:
        print(f"❌ {e}")
        return e.exit_code
    except KeyboardInterrupt:
        print("🛑 Interrupted; rerun classify with --resume to continue")
        return 1


if __name__ == "__main__":
    sys.exit(main())
