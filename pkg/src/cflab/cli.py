"""Command-line front end: gen-data, train, sample, eval.

Exit codes: 0 ok, 2 usage, 3 pipeline order, 4 numerical failure. The
CFLAB_SEED environment variable overrides the configured seed.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .errors import (
    ConfigError,
    MetricError,
    PipelineOrderError,
    SamplingError,
    ShapeError,
    TrainingError,
    UsageError,
)
from . import pipeline

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PIPELINE = 3
EXIT_NUMERICAL = 4

_PHASE_NAMES = {
    "pretext": "pretext",
    "warmup-removal": "warmup_removal",
    "warmup-insertion": "warmup_insertion",
    "cycleflow": "cycleflow",
}


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cflab",
        description="Flow-matching object removal/insertion lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--set", dest="sets", action="append", metavar="KEY=VALUE",
                       help="override any config key (repeatable)")

    p = sub.add_parser("gen-data", help="generate the scene corpora")
    common(p)
    p.add_argument("--scale", type=float, help="scale all split sizes")

    p = sub.add_parser("train", help="run one training phase")
    common(p)
    p.add_argument("--phase", required=True, choices=sorted(_PHASE_NAMES))
    p.add_argument("--steps", type=int, help="override phase step count")
    p.add_argument("--gamma", type=float, help="cycle-consistency weight")

    p = sub.add_parser("sample", help="run removal or insertion on one image")
    common(p)
    p.add_argument("--task", required=True, choices=("remove", "insert"))
    p.add_argument("--image", required=True, help="input scene (PPM)")
    p.add_argument("--mask", required=True, help="edit mask (PGM)")
    p.add_argument("--object", dest="object_path", help="reference object (PPM), insert only")
    p.add_argument("--nfe", type=int, help="inference steps")
    p.add_argument("--out", required=True, help="output result path (PPM)")

    p = sub.add_parser("eval", help="run an evaluation suite")
    common(p)
    p.add_argument(
        "--suite", required=True,
        choices=("cfd", "reference", "ablation-gamma", "ablation-nfe"),
    )
    p.add_argument("--results", help="results manifest (cfd/reference suites)")
    p.add_argument("--out", dest="out_dir", help="report directory override")
    p.add_argument("--steps", type=int, help="cycleflow steps for ablation-gamma")
    p.add_argument("--limit", type=int, help="cap on evaluated scenes")
    return parser


def _config_from_args(args):
    overrides = _parse_overrides(getattr(args, "sets", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "scale", None) is not None:
        overrides["scale"] = args.scale
    if getattr(args, "gamma", None) is not None:
        overrides["gamma"] = args.gamma
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "gen-data":
            result = pipeline.run_gen_data(cfg)
        elif args.command == "train":
            result = pipeline.run_train(
                cfg, _PHASE_NAMES[args.phase], steps=args.steps
            )
        elif args.command == "sample":
            result = pipeline.run_sample(
                cfg,
                args.task,
                args.image,
                args.mask,
                args.out,
                object_path=args.object_path,
                nfe=args.nfe,
            )
        elif args.command == "eval":
            if args.suite == "cfd":
                if not args.results:
                    raise ConfigError("eval --suite cfd requires --results")
                result = pipeline.run_eval_cfd(cfg, args.results, args.out_dir)
            elif args.suite == "reference":
                if not args.results:
                    raise ConfigError("eval --suite reference requires --results")
                result = pipeline.run_eval_reference(cfg, args.results, args.out_dir)
            elif args.suite == "ablation-nfe":
                result = pipeline.run_eval_ablation_nfe(cfg, args.out_dir, limit=args.limit)
            else:
                result = pipeline.run_eval_ablation_gamma(
                    cfg, args.out_dir, steps=args.steps, limit=args.limit
                )
        else:  # pragma: no cover - argparse guards this
            return EXIT_USAGE
    except (ConfigError, UsageError, ShapeError, MetricError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineOrderError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (TrainingError, SamplingError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
