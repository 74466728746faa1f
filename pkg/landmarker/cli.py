"""
Command-line interface
Sub-commands gen, train, eval, predict, gradcheck and config. Exit codes:
0 success, 1 usage error, 2 validation error, 3 runtime failure; every failure
prints one `error: code=<n> kind=<Exception> msg=<text>` line on stderr.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import config
from landmarker import CONFIG_FORMAT_VERSION, __version__
from landmarker.diffgraph import gradcheck_suite
from landmarker.errors import CheckpointError, LandmarkerError, ValidationError
from landmarker.evalsuite import evaluate, heatmap_volumes, predict_volume
from landmarker.models import MODES, RunConfig, describe_config_keys, load_run_config
from landmarker.phantom import generate_dataset, load_dataset, sample_from_volume
from landmarker.trainer import load_checkpoint, models_from_checkpoint, train
from landmarker.volume import read_volume, write_volume

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-5


class UsageError(Exception):
    """Malformed command line"""
    exit_code = 1


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting on bad arguments"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _diagnostic(code: int, exc: BaseException) -> str:
    message = " ".join(str(exc).split())
    return f"error: code={code} kind={type(exc).__name__} msg={message}"


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"seed must be a non-negative integer, got {value}")
    return value


def _split_counts(text: Optional[str], n: int) -> List[int]:
    if text is None:
        val = int(round(0.16 * n))
        test = int(round(0.20 * n))
        return [n - val - test, val, test]
    try:
        counts = [int(part) for part in text.split(",")]
    except ValueError as e:
        raise ValidationError(f"--split must be three comma-separated integers, got {text!r}") from e
    return counts


def _load_config(args) -> RunConfig:
    return load_run_config(args.config, args.overrides)


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    seed = cfg.phantom.seed if args.seed is None else args.seed
    manifest = generate_dataset(
        cfg.phantom, cfg.cascade.scales, args.n, _split_counts(args.split, args.n), seed,
        args.out, force=args.force, threads=args.threads,
    )
    logger.info(f"Generated {len(manifest.samples)} phantoms in {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_run_config(args.config, overrides)
    mode = args.mode or cfg.train.mode
    out_dir = args.out or str(Path(config.CHECKPOINT_DIR) / mode)
    result = train(cfg, load_dataset(args.data), out_dir, mode=mode, resume=args.resume)
    logger.info(f"Best checkpoint {result.best_path} (validation error {result.best_val:.4f} mm)")
    return 0


def _checkpoint_map(items: List[str], modes: Optional[str], root: str) -> Dict[str, Optional[str]]:
    """Mode -> checkpoint path from MODE=PATH items, bare paths and --modes defaults"""
    mapping: Dict[str, Optional[str]] = {}
    for item in items:
        mode, sep, path = item.partition("=")
        if sep and mode in MODES:
            mapping[mode] = path
            continue
        ckpt = load_checkpoint(item)
        mapping[ckpt.mode] = item
    for mode in (modes.split(",") if modes else []):
        mode = mode.strip()
        if mode not in MODES:
            raise ValidationError(f"unknown mode {mode!r} in --modes; expected one of {MODES}")
        if mode not in mapping:
            path = Path(root) / mode / "best.lmck"
            mapping[mode] = str(path) if path.is_file() else None
    if not mapping:
        raise CheckpointError("no checkpoints given (use --ckpt or --modes)")
    return mapping


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    checkpoints = _checkpoint_map(args.ckpt, args.modes, args.ckpt_root)
    report = evaluate(
        cfg, load_dataset(args.data), checkpoints, args.out,
        mc_passes=args.mc, base_seed=args.seed, single_pass=args.single_pass,
        threads=args.threads, split=args.split,
    )
    for mode, entry in report.summary["modes"].items():
        logger.info(f"{mode}: median {entry['median']:.3f} mm, mean {entry['mean']:.3f} +- {entry['std']:.3f} mm")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    models = models_from_checkpoint(ckpt)
    if args.volume:
        sample = sample_from_volume(read_volume(args.volume), cfg.cascade.scales, sample_id=Path(args.volume).name)
    elif args.sample and args.data:
        sample = load_dataset(args.data).load_sample(args.sample)
    else:
        raise UsageError("predict needs --volume or --sample with --data")
    result = predict_volume(models, cfg, ckpt.mode, sample, mc=args.mc, base_seed=args.seed, threads=args.threads)
    if args.heatmap_out:
        out = Path(args.heatmap_out)
        volumes = heatmap_volumes(models, cfg, ckpt.mode, sample, upsample=args.heatmap_upsample)
        for k, volume in enumerate(volumes):
            path = out if len(volumes) == 1 else out.with_name(f"{out.stem}_lm{k}{out.suffix}")
            write_volume(volume, path)
            logger.info(f"Wrote heatmap {path}")
    print(json.dumps(result, indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    worst = gradcheck_suite(seeds=args.seeds, eps=args.eps)
    for name, err in worst.items():
        print(f"{name:28s} {err:.3e}")
    failed = [name for name, err in worst.items() if not err < args.tol]
    if failed:
        raise LandmarkerError(f"gradient check failed for {', '.join(failed)} (tolerance {args.tol:g})")
    logger.info(f"All {len(worst)} operator checks below {args.tol:g}")
    return 0


def cmd_config(args) -> int:
    print(json.dumps(_load_config(args).model_dump(mode="json"), indent=2))
    return 0


def _add_config_options(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=config.DEFAULT_CONFIG_PATH, help="Run configuration JSON")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override a configuration key, e.g. train.epochs=3 (repeatable)",
    )


def build_parser() -> CliParser:
    epilog = "configuration keys:\n" + "\n".join(describe_config_keys())
    parser = CliParser(
        prog="landmarker",
        description="Multi-scale 3D landmark localization with coarse-to-fine Loc-Net cascades",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--version", action="version",
        version=f"landmarker {__version__} (config format {CONFIG_FORMAT_VERSION})",
    )
    parser.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--threads", type=int, default=config.DEFAULT_THREADS, help="Worker threads")
    sub = parser.add_subparsers(dest="command", parser_class=CliParser)
    sub.required = True

    gen = sub.add_parser("gen", help="Generate a phantom dataset")
    _add_config_options(gen)
    gen.add_argument("--out", default=config.DATA_DIR)
    gen.add_argument("--n", type=int, default=10)
    gen.add_argument("--split", default=None, help="train,val,test counts (default about 64/16/20 percent)")
    gen.add_argument("--seed", type=_seed, default=None, help="Master seed (default phantom.seed)")
    gen.add_argument("--force", action="store_true", help="Overwrite an existing dataset")
    gen.set_defaults(handler=cmd_gen)

    tr = sub.add_parser("train", help="Train one mode")
    _add_config_options(tr)
    tr.add_argument("--data", default=config.DATA_DIR)
    tr.add_argument("--mode", choices=MODES, default=None)
    tr.add_argument("--out", default=None, help="Checkpoint directory (default checkpoints/<mode>)")
    tr.add_argument("--resume", default=None, help="Checkpoint to continue from")
    tr.add_argument("--seed", type=_seed, default=None)
    tr.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate checkpoints on the test split")
    _add_config_options(ev)
    ev.add_argument("--data", default=config.DATA_DIR)
    ev.add_argument("--ckpt", action="append", default=[], help="MODE=PATH or a checkpoint path (repeatable)")
    ev.add_argument("--modes", default=None, help="Comma-separated modes looked up under --ckpt-root")
    ev.add_argument("--ckpt-root", default=config.CHECKPOINT_DIR)
    ev.add_argument("--mc", type=int, default=config.DEFAULT_MC_PASSES)
    ev.add_argument("--out", default=config.REPORT_DIR)
    ev.add_argument("--seed", type=_seed, default=config.DEFAULT_SEED)
    ev.add_argument("--split", choices=["train", "val", "test"], default="test")
    ev.add_argument("--single-pass", action="store_true", help="Report noise-free single-pass errors")
    ev.set_defaults(handler=cmd_eval)

    pr = sub.add_parser("predict", help="Localize landmarks in one volume")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--volume", default=None, help="Base-spacing .vol file")
    pr.add_argument("--sample", default=None, help="Sample id inside --data")
    pr.add_argument("--data", default=None)
    pr.add_argument("--mc", type=int, default=config.DEFAULT_MC_PASSES)
    pr.add_argument("--seed", type=_seed, default=config.DEFAULT_SEED)
    pr.add_argument("--heatmap-out", default=None, help="Write finest-scale heatmap(s) as .vol")
    pr.add_argument("--heatmap-upsample", type=int, default=1, help="Integer factor for trilinear upsampling of written heatmaps")
    pr.set_defaults(handler=cmd_predict)

    gc = sub.add_parser("gradcheck", help="Run the finite-difference operator checks")
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--eps", type=float, default=1e-4)
    gc.add_argument("--tol", type=float, default=GRADCHECK_TOLERANCE)
    gc.set_defaults(handler=cmd_gradcheck)

    cf = sub.add_parser("config", help="Print the resolved configuration")
    _add_config_options(cf)
    cf.set_defaults(handler=cmd_config)
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    Run the command line

    Args:
        argv: Arguments without the program name (defaults to sys.argv[1:])

    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as e:
        print(_diagnostic(1, e), file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)

    if args.log_level:
        logging.getLogger().setLevel(args.log_level)
    if args.threads < 1:
        print(_diagnostic(1, UsageError(f"--threads must be >= 1, got {args.threads}")), file=sys.stderr)
        return 1

    try:
        return args.handler(args)
    except UsageError as e:
        print(_diagnostic(1, e), file=sys.stderr)
        return 1
    except LandmarkerError as e:
        logger.error(f"{args.command} failed: {e}")
        print(_diagnostic(e.exit_code, e), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(_diagnostic(3, e), file=sys.stderr)
        return 3
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        print(_diagnostic(3, e), file=sys.stderr)
        return 3
