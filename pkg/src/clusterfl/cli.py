"""Command-line runner.

    clusterfl run --config exp.yaml [--out DIR] [--seed N] [--threads N] [--resume]
    clusterfl partition|embed|cluster --config exp.yaml [--out DIR]
    clusterfl metrics --config exp.yaml [--out DIR] [--metrics robustness,...]
    clusterfl report DIR

Exit codes: 0 success, 1 runtime failure, 2 bad config or missing input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import ExperimentConfig, dump_config, load_config
from .errors import ConfigurationError, InputError
from .pipeline import ALL_METRICS, SUMMARY_KEYS, MissingArtifactError


class UsageError(Exception):
    pass


def _config(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = Path(args.out or cfg.output_dir)
    return cfg, out


def _check_snapshot(cfg: ExperimentConfig, out: Path) -> None:
    snap = pipeline.artifact(out, "config")
    if snap.exists() and snap.read_text(encoding="utf-8") != dump_config(cfg):
        raise UsageError(f"{snap} was written by a different config; use a fresh --out")


def _prepare(cfg: ExperimentConfig, out: Path) -> None:
    _check_snapshot(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.save_config(cfg, pipeline.artifact(out, "config"))


def cmd_run(args) -> int:
    cfg, out = _config(args)
    _check_snapshot(cfg, out)
    summary = pipeline.run_pipeline(cfg, out, args.threads, args.resume)
    print(f"wrote {out}")
    _print_table([(str(out), summary)])
    return 0


def cmd_partition(args) -> int:
    cfg, out = _config(args)
    _prepare(cfg, out)
    pipeline.stage_partition(cfg, out)
    print(f"wrote {pipeline.artifact(out, 'partition')}")
    return 0


def cmd_embed(args) -> int:
    cfg, out = _config(args)
    _prepare(cfg, out)
    pipeline.stage_embed(cfg, out, args.threads)
    print(f"wrote {pipeline.artifact(out, 'embeddings')}")
    return 0


def cmd_cluster(args) -> int:
    cfg, out = _config(args)
    _prepare(cfg, out)
    pipeline.stage_cluster(cfg, out)
    print(f"wrote {pipeline.artifact(out, 'clusters')}")
    return 0


def cmd_metrics(args) -> int:
    cfg, out = _config(args)
    _prepare(cfg, out)
    which = None
    if args.metrics:
        which = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
        unknown = [m for m in which if m not in ALL_METRICS]
        if unknown:
            raise UsageError(f"unknown metric(s) {unknown}; choose from {ALL_METRICS}")
    rows = pipeline.stage_metrics(cfg, out, which, append=True)
    for metric, cluster, value in rows:
        print(f"{metric}\t{cluster}\t{value}")
    if pipeline.artifact(out, "log").exists():
        pipeline.stage_summary(cfg, out)
    return 0


def _find_summaries(root: Path) -> list[Path]:
    return sorted(root.rglob(pipeline.ARTIFACTS["summary"]))


def _print_table(rows: list[tuple[str, dict]]) -> None:
    header = ("run",) + SUMMARY_KEYS
    cells = [[name] + ["" if s.get(k) is None else repr(s[k]) if isinstance(s[k], float) else str(s[k])
                       for k in SUMMARY_KEYS] for name, s in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
    for r in cells:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())


def cmd_report(args) -> int:
    root = Path(args.output_dir)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    paths = _find_summaries(root)
    if not paths:
        raise MissingArtifactError(f"no {pipeline.ARTIFACTS['summary']} under {root}")
    rows = []
    for p in paths:
        name = str(p.parent.relative_to(root)) if p.parent != root else root.name
        rows.append((name, json.loads(p.read_text(encoding="utf-8"))))
    _print_table(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterfl", description="Clustered federated learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=True):
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--out", "--stage-inputs", dest="out", default=None,
                       help="run directory (default: output_dir from the config)")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        if threads:
            p.add_argument("--threads", type=int, default=1, help="worker threads for client updates")

    p = sub.add_parser("run", help="run every stage")
    common(p)
    p.add_argument("--resume", action="store_true", help="reuse stage outputs already in --out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("partition", help="ingest the dataset and write the client manifest")
    common(p, threads=False)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("embed", help="warm-up training and client embeddings")
    common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("cluster", help="K-Means over training-client embeddings")
    common(p, threads=False)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("metrics", help="uniformity, robustness and correlation on persisted artifacts")
    common(p, threads=False)
    p.add_argument("--metrics", default=None, help=f"comma list from {','.join(ALL_METRICS)}")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("report", help="print a table of summary.json files under a directory")
    p.add_argument("output_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        # one BLAS thread per worker keeps reductions schedule independent
        with threadpool_limits(limits=1):
            return args.func(args)
    except (ConfigurationError, MissingArtifactError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
