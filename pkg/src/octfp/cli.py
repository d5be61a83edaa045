"""Command-line front end for the synthesis pipeline.

Commands: ``make-phantoms``, ``train <stage>``, ``synthesize``, ``evaluate``,
``export-views``. Exit codes: 0 success, 2 validation error, 3 missing
prerequisite, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .pipeline import (MissingPrerequisiteError, PipelineConfig, evaluate,
                       export_views, make_phantoms, synthesize, train_stage,
                       write_report)
from .tensorio import ContainerError, DatasetManifest, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_MISSING_PREREQUISITE = 3
EXIT_IO = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, required=True, help="run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the global seed")
    p.add_argument("--out", type=Path, default=None, help="override the output root")
    p.add_argument("--workers", type=int, default=1, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octfp",
        description="Synthesize and evaluate OCT-style 3D fingerprint volumes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-phantoms", help="generate the phantom training corpus")
    _add_common(p)

    p = sub.add_parser("train", help="train one pipeline stage")
    p.add_argument("stage", choices=("style", "expansion", "refiner"))
    _add_common(p)
    p.add_argument("--manifest", type=Path, default=None,
                   help="phantom manifest (default: <out_root>/phantoms/manifest.json)")

    p = sub.add_parser("synthesize", help="run the full chain for new identities")
    _add_common(p)
    p.add_argument("--identities", type=int, default=2)
    p.add_argument("--impressions", type=int, default=None,
                   help="impressions per identity (default from config)")

    p = sub.add_parser("evaluate", help="FVD/FID report of fake vs real volumes")
    _add_common(p)
    p.add_argument("--real", type=Path, required=True, help="real-set manifest")
    p.add_argument("--fake", type=Path, required=True, help="fake-set manifest")
    p.add_argument("--recognition", action="store_true",
                   help="also train the tiny embedder and report EER/TAR")
    p.add_argument("--report", type=Path, default=None, help="where to write JSON")

    p = sub.add_parser("export-views", help="write inspection PNGs for a volume")
    p.add_argument("volume", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.3)
    return parser


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    return cfg.with_overrides(seed=args.seed, out=args.out)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-phantoms":
            cfg = _load_config(args)
            manifest = make_phantoms(cfg, workers=args.workers)
            ids = len(manifest.identities())
            print(f"wrote {len(manifest.entries)} phantom volumes "
                  f"({ids} identities) under {Path(cfg.out_root) / 'phantoms'}")
        elif args.command == "train":
            cfg = _load_config(args)
            manifest_path = args.manifest or (
                Path(cfg.out_root) / "phantoms" / "manifest.json")
            if not manifest_path.exists():
                raise MissingPrerequisiteError(
                    f"no phantom manifest at {manifest_path}; run make-phantoms first")
            manifest = DatasetManifest.load(manifest_path)
            ckpt = train_stage(args.stage, cfg, manifest)
            print(f"trained {args.stage}: checkpoint at {ckpt}")
        elif args.command == "synthesize":
            cfg = _load_config(args)
            manifest = synthesize(cfg, args.identities, args.impressions,
                                  workers=args.workers)
            print(f"synthesis manifest at {manifest}")
        elif args.command == "evaluate":
            cfg = _load_config(args)
            report = evaluate(cfg, args.real, args.fake,
                              recognition=args.recognition)
            text = json.dumps(report, indent=1, sort_keys=True)
            if args.report:
                write_report(report, args.report)
            print(text)
        elif args.command == "export-views":
            written = export_views(args.volume, args.out,
                                   surface_threshold=args.threshold)
            print(f"wrote {len(written)} images under {args.out}")
        return EXIT_OK
    except MissingPrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_PREREQUISITE
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:  # console-script entry point
    sys.exit(run())


if __name__ == "__main__":
    main()
