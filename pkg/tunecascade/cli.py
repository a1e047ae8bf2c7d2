#!/usr/bin/env python3
"""
Command-line interface.

    tunecascade train --stage 1 --manifest m.tsv --out runs/
    tunecascade generate --stage1 s1.ckpt --stage2 s2.ckpt --prompt "..." --out clip.wav
    tunecascade codec encode --stage1 s1.ckpt in.wav out.latent
    tunecascade profile generated/
    tunecascade inspect s1.ckpt

Errors print one ``error[<kind>]: <message>`` line on stderr; exit codes are
0 success, 1 usage, 2 data/format, 3 numeric failure.
"""

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import List, NoReturn, Optional

from . import __version__
from .checkpoint import Kind, open_checkpoint
from .config import PRESETS, RunConfig, config_from_container, dump_config, latent_hop, load_config
from .corpus import load_manifest
from .dmae import build_dmae
from .errors import LatentMismatchError, TuneCascadeError, UsageError
from .service import MusicService
from .structure import format_table, profile_directory, to_csv
from .tcld import build_tcld
from .train import Stage1Batches, Stage2Batches, Trainer, load_stage1

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """Reports usage problems through :class:`UsageError` instead of exiting with 2."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def _configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="[%(name)s][%(levelname)s] %(message)s", force=True)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    resume = open_checkpoint(args.resume, Kind(args.stage)) if args.resume else None
    if resume is not None:
        overrides = (("--config", args.config), ("--seed", args.seed))
        ignored = [flag for flag, value in overrides if value is not None]
        if ignored:
            logger.warning(
                "%s ignored on resume; using the configuration stored in %s",
                "/".join(ignored),
                args.resume,
            )
        cfg = config_from_container(resume.meta.get("config"))
    if args.steps is not None:
        cfg.train.steps = args.steps
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.stage == 1:
        records = load_manifest(args.manifest, cfg.stage1.crop_length).records
        model = build_dmae(cfg, cfg.seed)
        batches = Stage1Batches(records, cfg)
    else:
        if not args.stage1:
            raise UsageError("stage-2 training needs --stage1 <checkpoint>")
        dmae = load_stage1(args.stage1)
        if dmae.latent_channels != cfg.stage1.latent_channels or dmae.latent_hop != latent_hop(cfg):
            raise LatentMismatchError(
                f"stage-1 checkpoint gives {dmae.latent_channels}-channel latents every "
                f"{dmae.latent_hop} samples; this config expects {cfg.stage1.latent_channels} "
                f"every {latent_hop(cfg)}"
            )
        records = load_manifest(args.manifest, cfg.stage2.crop_length).records
        model = build_tcld(cfg, cfg.seed)
        batches = Stage2Batches(records, cfg, dmae)

    trainer = Trainer(model, Kind(args.stage), cfg, batches, out_dir=out_dir, progress=args.progress)
    if resume is not None:
        trainer.restore(resume)
        print(f"📦 Resumed stage {args.stage} at step {trainer.step}")

    log_path = out_dir / f"{trainer.stem}-loss.tsv"
    with open(log_path, "a", encoding="utf-8") as log:
        losses = trainer.run(cfg.train.steps, log)
    if losses:
        print(f"✅ Trained stage {args.stage} to step {trainer.step}, final loss {losses[-1]:.6g}")
    print(f"📦 Checkpoint: {out_dir / (trainer.stem + '.ckpt')}  loss log: {log_path}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    service = MusicService(
        args.stage1,
        args.stage2,
        steps_gen=args.steps_gen,
        steps_dec=args.steps_dec,
        cfg_scale=args.cfg_scale,
        volume=args.volume,
        pcm16=args.pcm16,
        progress=args.progress,
    )
    result = service.generate_from_text(
        args.prompt, cache_dir=args.cache_dir, path=args.out, seed=args.seed or 0
    )
    if result["cached"]:
        print(f"📦 Reused {result['original_audio']}")
        return 0
    channels, length = result["latent_shape"]
    print(f"latent shape: [{channels}, {length}]")
    print(f"steps: {result['steps_gen']} generation / {result['steps_dec']} decoding")
    print(f"elapsed: {result['elapsed']:.2f}s")
    print(f"✅ Saved at {result['original_audio']}")
    return 0


def cmd_codec(args: argparse.Namespace) -> int:
    service = MusicService(args.stage1, steps_dec=args.steps_dec, pcm16=args.pcm16, progress=args.progress)
    if args.action == "encode":
        result = service.encode_file(args.input, args.output)
        print(f"latent shape: {result['latent_shape']} ({result['original_length']} samples)")
    else:
        result = service.decode_file(args.input, args.output, seed=args.seed or 0)
        print(f"decoded {result['samples']} samples in {result['elapsed']:.2f}s")
    print(f"✅ Saved at {result['output']}")
    return 0


def cmd_profile(args: argparse.Namespace) -> int:
    profile = profile_directory(args.directory)
    print(format_table(profile))
    csv_path = Path(args.csv) if args.csv else Path(args.directory) / "profile.csv"
    csv_path.write_text(to_csv(profile), encoding="utf-8")
    print(f"✅ CSV written to {csv_path}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    file = open_checkpoint(args.checkpoint)
    params = {n: s for n, (s, _) in file.table.items() if n.startswith("param/")}
    print(f"kind: {file.kind.name.lower()}")
    print(f"version: {file.version}")
    print(f"step: {file.meta.get('step', '-')}")
    print(f"tensors: {len(file.table)}")
    if params:
        count = sum(math.prod(s) for s in params.values())
        print(f"parameters: {count}")
    for name, (shape, _) in file.table.items():
        print(f"{name}\t{list(shape)}")
    return 0


def _add_common_options(parser: argparse.ArgumentParser, nested: bool) -> None:
    """Options accepted both before and after the command name."""

    def default(value: object) -> object:
        return argparse.SUPPRESS if nested else value

    parser.add_argument("--config", default=default(None), help="YAML config overriding the preset")
    parser.add_argument("--preset", choices=PRESETS, default=default("full"))
    parser.add_argument("--seed", type=int, default=default(None), help="override the run seed")
    parser.add_argument("--progress", action="store_true", default=default(False), help="show progress bars")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))
    parser.add_argument("-q", "--quiet", action="store_true", default=default(False))


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="tunecascade", description="Two-stage text-to-music latent diffusion.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    _add_common_options(parser, nested=False)
    common = ArgumentParser(add_help=False)
    _add_common_options(common, nested=True)
    commands = parser.add_subparsers(dest="command", metavar="command")

    train = commands.add_parser("train", parents=[common], help="train stage 1 or stage 2")
    train.add_argument("--stage", type=int, choices=(1, 2), required=True)
    train.add_argument("--manifest", required=True)
    train.add_argument("--out", default="runs")
    train.add_argument("--steps", type=int)
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument("--stage1", help="stage-1 checkpoint (stage 2 only)")
    train.set_defaults(handler=cmd_train)

    generate = commands.add_parser("generate", parents=[common], help="prompt -> WAV")
    generate.add_argument("--prompt", required=True)
    generate.add_argument("--stage1", required=True)
    generate.add_argument("--stage2", required=True)
    generate.add_argument("--steps-gen", type=int)
    generate.add_argument("--steps-dec", type=int)
    generate.add_argument("--cfg-scale", type=float)
    generate.add_argument("--volume", type=float, default=1.0)
    generate.add_argument("--pcm16", action="store_true")
    generate.add_argument("--out", help="output WAV (default: hash-named file in --cache-dir)")
    generate.add_argument("--cache-dir", default=".")
    generate.set_defaults(handler=cmd_generate)

    codec = commands.add_parser("codec", parents=[common], help="stage-1 encode/decode")
    codec.add_argument("action", choices=("encode", "decode"))
    codec.add_argument("input")
    codec.add_argument("output")
    codec.add_argument("--stage1", required=True)
    codec.add_argument("--steps-dec", type=int)
    codec.add_argument("--pcm16", action="store_true")
    codec.set_defaults(handler=cmd_codec)

    profile = commands.add_parser("profile", parents=[common], help="segment amplitude/variation table")
    profile.add_argument("directory")
    profile.add_argument("--csv", help="CSV output path (default: <directory>/profile.csv)")
    profile.set_defaults(handler=cmd_profile)

    inspect = commands.add_parser("inspect", parents=[common], help="describe a checkpoint or latent file")
    inspect.add_argument("checkpoint")
    inspect.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.verbose, args.quiet)
        if args.dump_config:
            print(dump_config(_resolve_config(args)), end="")
            return 0
        if args.command is None:
            raise UsageError("a command is required (train, generate, codec, profile, inspect)")
        return args.handler(args)
    except KeyboardInterrupt:
        print("\n⏹️  Interrupted by user.", file=sys.stderr)
        return 1
    except TuneCascadeError as e:
        message = " ".join(str(e).split("\n")).strip() or type(e).__name__
        print(f"error[{e.kind}]: {message}", file=sys.stderr)
        logger.debug("failure detail", exc_info=True)
        return e.exit_code
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
