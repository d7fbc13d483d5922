"""Command-line entry point: ``hcpr <command> --config run.yaml --set key=value``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from hcpr.errors import ConfigError, StageError


def _config(args):
    from hcpr.pipeline import config_from_dict, parse_config, apply_overrides

    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "output_dir", None):
        overrides.append(f"output_dir={args.output_dir}")
    if args.config:
        return parse_config(args.config, overrides)
    return config_from_dict(apply_overrides({}, overrides))


def _print(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_make_data(args):
    from hcpr.data import write_manifest
    from hcpr.pipeline import load_data

    cfg = _config(args)
    source, target = load_data(cfg.data, cfg.seed)
    out = Path(args.out or cfg.output_dir / "data")
    paths = [write_manifest(source, out, "source"), write_manifest(target, out, "target")]
    _print({"source": str(paths[0]), "target": str(paths[1]), "n_source": len(source), "n_target": len(target)})


def cmd_train_source(args):
    from hcpr.model import save_checkpoint
    from hcpr.pipeline import load_data
    from hcpr.training import evaluate, train_source_model

    cfg = _config(args)
    source, target = load_data(cfg.data, cfg.seed)
    model = train_source_model(source, cfg.model, cfg.source, cfg.seed)
    path = save_checkpoint(args.out or cfg.output_dir / "source.pt", model,
                           extra={"stage": "source", "seed": cfg.seed})
    report = {"checkpoint": str(path), "source_train_accuracy": evaluate(model, source).accuracy}
    if target.has_labels:
        report["target_accuracy"] = evaluate(model, target).accuracy
    _print(report)


def cmd_adapt(args):
    from hcpr.pipeline import run_pipeline

    cfg = _config(args)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    report = run_pipeline(cfg, log=log)
    summary = report.to_dict()
    for key in ("history", "config", "consolidations"):
        summary.pop(key)
    summary["output_dir"] = str(cfg.output_dir)
    _print(summary)


def cmd_consolidate(args):
    from hcpr.model import load_checkpoint
    from hcpr.pipeline import load_data, pseudo_label_quality, select_pseudo_labels, write_pseudo_csv
    from hcpr.consolidation import write_report

    cfg = _config(args)
    _, target = load_data(cfg.data, cfg.seed)
    model, _ = load_checkpoint(args.checkpoint)
    pseudo, result = select_pseudo_labels(model, target, cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if result is not None:
        write_report(result, out / "consolidation.json", len(target))
    write_pseudo_csv(pseudo, out / "pseudo_labels.csv")
    quantity, quality = pseudo_label_quality(pseudo, target)
    _print({"selected": len(pseudo), "total": len(target), "quantity_pct": quantity, "quality_pct": quality})


def cmd_evaluate(args):
    from hcpr.model import load_checkpoint
    from hcpr.pipeline import load_data
    from hcpr.training import evaluate

    cfg = _config(args)
    source, target = load_data(cfg.data, cfg.seed)
    model, _ = load_checkpoint(args.checkpoint)
    res = evaluate(model, source if args.domain == "source" else target)
    _print({"accuracy": res.accuracy, "mean_per_class": res.mean_per_class,
            "per_class": {str(k): v for k, v in res.per_class.items()}})


def cmd_analyze(args):
    from hcpr.analysis import analyze_pseudo_labels, standard_selections
    from hcpr.consolidation import read_report
    from hcpr.model import load_checkpoint
    from hcpr.pipeline import RunReport, config_from_dict, load_data

    run = Path(args.run)
    report = RunReport.read(run / "report.json")
    cfg = config_from_dict(report.config)
    _, target = load_data(cfg.data, cfg.seed)
    source_ckpt = cfg.source_checkpoint or run / "source.pt"
    source_model, _ = load_checkpoint(source_ckpt)
    pa_model, _ = load_checkpoint(run / "pre_adapt.pt")
    if (run / "consolidation.json").exists():
        pseudo, _ = read_report(run / "consolidation.json")
    else:
        from hcpr.pipeline import select_pseudo_labels

        pseudo, _ = select_pseudo_labels(pa_model, target, cfg)
    baselines = standard_selections(source_model, pa_model, target, cfg.selection, cfg.ssl.confidence_tau)
    rows = analyze_pseudo_labels(pseudo, target, baselines, run, report.history)
    _print(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcpr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML pipeline config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. --set pre_adapt.epochs=3 (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = deterministic)")
        return p

    p = common(sub.add_parser("make-data", help="write the configured source/target pair as manifests"))
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_make_data)

    p = common(sub.add_parser("train-source", help="supervised training on the source domain"))
    p.add_argument("--out", type=Path, help="checkpoint path (default <output_dir>/source.pt)")
    p.set_defaults(func=cmd_train_source)

    p = common(sub.add_parser("adapt", help="full run: pre-adapt, consolidate, semi-supervised training"))
    p.add_argument("--output-dir", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = common(sub.add_parser("consolidate", help="pseudo-label selection from a checkpoint"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--output-dir", type=Path)
    p.set_defaults(func=cmd_consolidate)

    p = common(sub.add_parser("evaluate", help="top-1 accuracy of a checkpoint"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--domain", choices=["source", "target"], default="target")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("analyze", help="pseudo-label quantity/quality table for a finished run"))
    p.add_argument("--run", type=Path, required=True, help="output directory of an 'adapt' run")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: stage 'config' failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: stage '{args.command}' failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
