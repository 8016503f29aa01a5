"""drvc command line: prepare, train, convert, evaluate.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
runtime failures (bad inputs, divergence, I/O).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ABLATABLE_TERMS, AppConfig, load_config, save_config
from .errors import ConfigError, DRVCError, TrainingDivergenceError

log = logging.getLogger("drvc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML/JSON config file")
    common.add_argument("--seed", type=int, help="override the training seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="drvc", description="Disentangled cycle-consistent any-to-any voice conversion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="build the manifest and feature cache")
    p.add_argument("data_root", nargs="?", help="corpus root with one sub-directory per speaker")
    p.add_argument("--out", help="manifest path (default: manifest_path under work_dir)")

    p = sub.add_parser("train", parents=[common], help="train from the prepared manifest")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/latest.pt if present")
    p.add_argument("--ablate", action="append", default=[], choices=ABLATABLE_TERMS,
                   help="drop a loss term (repeatable)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)

    p = sub.add_parser("convert", parents=[common], help="convert one utterance to a target voice")
    p.add_argument("source_wav", help="utterance providing the content")
    p.add_argument("target_wav", help="utterance of the target voice")
    p.add_argument("--out", required=True, help="output .mel path under work_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--audio", action="store_true",
                   help="also write a Griffin-Lim waveform (inspection quality) next to --out")

    p = sub.add_parser("evaluate", parents=[common], help="MCD of a checkpoint on the eval split")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--out", default="report.json", help="report path under work_dir")
    return parser


def _config(args) -> AppConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.training.seed = args.seed
    return cfg


def _run(args) -> int:
    cfg = _config(args)
    work_dir = cfg.resolved_work_dir()
    if args.command == "prepare":
        root = args.data_root or cfg.data_root
        if root is None:
            raise ConfigError("prepare needs a data_root argument or config key")
        out, manifest = pipeline.prepare(cfg, root, args.out)
        print(f"manifest: {out} ({len(manifest.split_records('train'))} train, "
              f"{len(manifest.split_records('eval'))} eval, {len(manifest.speakers)} speakers)")
    elif args.command == "train":
        cfg.training.ablate = sorted(set(cfg.training.ablate) | set(args.ablate))
        if args.epochs is not None:
            cfg.training.epochs = args.epochs
        if args.steps_per_epoch is not None:
            cfg.training.steps_per_epoch = args.steps_per_epoch
        cfg.validate()
        work_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, work_dir / "run_config.yaml")
        latest = pipeline.train(cfg, resume=args.resume)
        print(f"checkpoint: {latest}")
    elif args.command == "convert":
        out = pipeline.within(work_dir, args.out)
        ckpt = args.checkpoint or pipeline.default_checkpoint(cfg)
        mel = pipeline.convert_files(ckpt, args.source_wav, args.target_wav, out, audio=args.audio)
        print(f"converted: {out} shape={tuple(mel.frames.shape)}")
    elif args.command == "evaluate":
        out = pipeline.within(work_dir, args.out)
        ckpt = args.checkpoint or pipeline.default_checkpoint(cfg)
        report = pipeline.evaluate(cfg, ckpt, out, args.manifest)
        summary = {"mean_mcd": report["mean_mcd"], "std": report["std"], "pairs": len(report["pairs"])}
        print(json.dumps(summary))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"drvc: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergenceError as exc:
        print(f"drvc: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DRVCError, OSError, ValueError, RuntimeError) as exc:
        print(f"drvc: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
