"""Command-line experiment harness.

Subcommands: train, attack, detect, armsrace, curves, cone.
Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.
ADVBENCH_WORKERS is the fallback for --workers.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, ExperimentConfig

USAGE_EXIT = 1
CONFIG_EXIT = 2
RUNTIME_EXIT = 3

ATTACK_CHOICES = ("cw", "cw-noisy", "lma", "adaptive")
DETECTOR_CHOICES = ("stat-test", "classifier")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="advbench",
        description="Attack/detection benchmark over logit statistics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to a key=value config file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--workers", type=int, help="worker pool size")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("train", help="train the classifier and write its checkpoint")
    common(p)

    p = sub.add_parser("attack", help="attack the test split and persist a manifest")
    common(p)
    p.add_argument("--attack", required=True, choices=ATTACK_CHOICES, help="attack kind")
    p.add_argument("--detector", help="detector checkpoint (required for adaptive)")

    p = sub.add_parser("detect", help="evaluate a detector against a persisted attack")
    common(p)
    p.add_argument("detector_kind", choices=DETECTOR_CHOICES)
    p.add_argument("--manifest", required=True, help="attack manifest CSV")
    p.add_argument("--eps", help="comma-separated noise epsilons (default: config sweep)")
    p.add_argument("--fpr", help="comma-separated FPR targets (default: config targets)")

    p = sub.add_parser("armsrace", help="mimicry detector, adaptive attack, iterative retraining")
    common(p)

    p = sub.add_parser("curves", help="probability-vs-noise CSVs for chosen samples")
    common(p)
    p.add_argument("--samples", required=True, help="comma-separated sample ids")
    p.add_argument("--manifest", help="probe adversarial examples from this manifest")

    p = sub.add_parser("cone", help="probability map around one adversarial example")
    common(p)
    p.add_argument("--sample", required=True, type=int, help="sample id")
    p.add_argument("--manifest", required=True, help="attack manifest CSV")

    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    if args.workers is not None:
        cfg.workers = args.workers
    else:
        env = os.environ.get("ADVBENCH_WORKERS")
        if env:
            try:
                cfg.workers = int(env)
            except ValueError:
                raise ConfigError(f"ADVBENCH_WORKERS={env!r} is not an integer") from None
    return cfg


def _parse_float_list(text: str | None):
    if not text:
        return None
    try:
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise _UsageError(f"cannot parse float list {text!r}") from None


def run(args) -> int:
    from . import pipeline

    cfg = _load_config(args)
    out_dir = cfg.out_dir

    if args.command == "train":
        model, report = pipeline.train_pipeline(cfg, out_dir, force=args.force)
        acc = report.final_test_accuracy
        print(f"trained model -> {os.path.join(out_dir, pipeline.MODEL_FILE)}")
        if acc is not None:
            print(f"test accuracy: {acc:.4f}")
        return 0

    if args.command == "attack":
        if args.attack == "adaptive" and not args.detector:
            raise _UsageError("attack kind 'adaptive' requires --detector")
        outcome = pipeline.attack_pipeline(
            cfg, args.attack, out_dir, force=args.force,
            detector_path=args.detector, workers=cfg.workers,
        )
        print(
            f"attack {args.attack}: success rate {outcome.success_rate:.4f} "
            f"over {len(outcome.evaded)} samples"
        )
        return 0

    if args.command == "detect":
        table = pipeline.detect_pipeline(
            cfg,
            args.detector_kind,
            args.manifest,
            out_dir,
            eps_list=_parse_float_list(args.eps),
            fpr_list=_parse_float_list(args.fpr),
        )
        for row in table.rows:
            print(
                f"{row.detector} vs {row.attack} eps={row.epsilon:g} "
                f"fpr_target={row.fpr_target:g}: TPR={row.tpr:.4f} FPR={row.fpr:.4f}"
            )
        return 0

    if args.command == "armsrace":
        table, trace = pipeline.armsrace_pipeline(cfg, out_dir, force=args.force)
        for row in table.rows:
            print(
                f"{row.detector} vs {row.attack} fpr_target={row.fpr_target:g}: "
                f"TPR={row.tpr:.4f} FPR={row.fpr:.4f}"
            )
        print(f"iterations traced: {len(trace)}")
        return 0

    if args.command == "curves":
        try:
            sample_ids = [int(p) for p in args.samples.split(",") if p.strip()]
        except ValueError:
            raise _UsageError(f"cannot parse sample ids {args.samples!r}") from None
        paths = pipeline.curves_pipeline(cfg, sample_ids, out_dir, manifest_path=args.manifest)
        for path in paths:
            print(path)
        return 0

    if args.command == "cone":
        path = pipeline.cone_pipeline(cfg, args.sample, args.manifest, out_dir)
        print(path)
        return 0

    raise _UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return run(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_EXIT
    except Exception as exc:  # runtime failures map to a stable exit code
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
