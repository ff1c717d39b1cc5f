#!/usr/bin/env python3
"""
Command-line interface for the LAPRAN compressive-sensing toolkit
Budget calculation, encoding, training, evaluation, ablation and reconstruction
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

import pandas as pd

from src.data.corpus import build_corpus
from src.data.dataset_sources import load_image
from src.data.measurement_io import write_measurements
from src.data.pyramid_data import BASE_SIDE, side_for_stages
from src.metrics import evaluate, summarize_ablation, write_quality_reports
from src.reconstructor import load_bundle, reconstruct_file
from src.sensing import beta_upper_bound, build_matrices, encode, rip_lower_bound
from src.trainer import Checkpoint, ablate_fusion, load_checkpoint, train_pyramid
from src.utils.config import ExperimentConfig, config_from_manifest, load_config
from src.utils.errors import ConfigError, DataError, LapranError, NumericError
from src.utils.load_env import load_env_file
from src.utils.run_assets_manager import RunAssetsManager

logger = logging.getLogger(__name__)

DEFAULT_CRS = [5.0, 10.0, 20.0, 30.0]

USAGE = """
LAPRAN CS Toolkit - Command Line Interface
==========================================

Usage: python main.py <command> [options]

Commands:
  budget                          - Print stage measurement dims, CRs and RIP advisory
  encode                          - Encode an image into an MRCS measurement file
  reconstruct                     - Reconstruct a measurement file with a trained run
  train                           - Train pyramid stages (all, or --stages i j ...)
  eval                            - PSNR / SSIM / MSE report of a run at several CRs
  ablate                          - Measurement-fusion ablation (per-stage test MSE)
  runs                            - List run directories and storage usage

Examples:
  python main.py budget --m 128 --beta 2 --k 4 --N 4096
  python main.py train --config configs/desk_mnist_cr5.toml --stages 1
  python main.py train --config configs/desk_mnist_cr5.toml --stages 2
  python main.py encode --config configs/desk_mnist_cr5.toml --image face.png --out face.mrcs --stages 2
  python main.py reconstruct --measurements face.mrcs --bundle runs/<run-id>
  python main.py eval --config configs/desk_mnist_cr5.toml --cr 5 10 20 30
  python main.py ablate --config configs/desk_cifar10_ablation.toml --seeds 3

Global options (any command):
  --config FILE                   - TOML experiment config
  --seed N                        - Override every seed in the config
  --run-dir DIR                   - Run root (default: $LAPRAN_RUN_DIR or ./runs)
  --quiet                         - Only log warnings

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure
"""

TROUBLESHOOTING = {
    ConfigError: [
        "Check the config file sections and keys against configs/*.toml",
        "beta must satisfy 1 < beta <= 4 and give strictly increasing stage dims",
        "N must equal (8 * 2^(k-1))^2 for training and encoding",
    ],
    DataError: [
        "Check that the referenced files and run directories exist",
        "Train the earlier stages first (train --stages 1 before --stages 2)",
        "Ensure you have internet connectivity for dataset downloads ($LAPRAN_DATA_DIR caches them)",
    ],
    NumericError: [
        "Lower train.learning_rate or loss.lambda_adv",
        "Resume from the last good checkpoint with train --resume",
    ],
}


def print_usage():
    """Print usage information"""
    print(USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int, help="Override every seed in the config")
    common.add_argument("--run-dir", help="Run root directory (default: $LAPRAN_RUN_DIR or ./runs)")
    common.add_argument("--quiet", action="store_true", help="Only log warnings")

    parser = argparse.ArgumentParser(description="LAPRAN compressive-sensing toolkit", add_help=True)
    sub = parser.add_subparsers(dest="command")

    budget = sub.add_parser("budget", parents=[common], help="Stage measurement budget")
    rate = budget.add_mutually_exclusive_group()
    rate.add_argument("--m", type=int, help="Stage-1 measurement count")
    rate.add_argument("--cr", type=float, help="Target final-stage compression ratio")
    budget.add_argument("--beta", help="Measurement increment ratio (1.5 or 3/2)")
    budget.add_argument("--k", type=int, help="Number of stages")
    budget.add_argument("--N", type=int, dest="n", help="Signal dimension (pixels per channel)")
    budget.add_argument("--sparsity", type=int, help="Sparsity of the full-resolution image for the RIP advisory")

    enc = sub.add_parser("encode", parents=[common], help="Encode an image to an MRCS file")
    enc.add_argument("--image", required=True, help="Input image")
    enc.add_argument("--out", required=True, help="Output .mrcs file")
    keep = enc.add_mutually_exclusive_group()
    keep.add_argument("--stages", type=int, help="Keep the measurements of stages 1..i only")
    keep.add_argument("--length", type=int, help="Keep the first L measurements per channel")

    rec = sub.add_parser("reconstruct", parents=[common], help="Reconstruct an MRCS file")
    rec.add_argument("--measurements", required=True, help="Input .mrcs file")
    rec.add_argument("--bundle", help="Run directory with trained stages (default: latest run of --config)")
    rec.add_argument("--out", help="Output directory for level PNGs")

    train = sub.add_parser("train", parents=[common], help="Train pyramid stages")
    train.add_argument("--stages", type=int, nargs="+", help="Stages to train (default: all)")
    train.add_argument("--resume", action="store_true", help="Continue unfinished stages of the latest run")
    train.add_argument("--epochs", type=int, help="Override train.max_epochs")

    ev = sub.add_parser("eval", parents=[common], help="Quality report at several CRs")
    ev.add_argument("--bundle", help="Run directory (default: latest run of --config)")
    ev.add_argument("--cr", dest="eval_crs", type=float, nargs="+", default=DEFAULT_CRS, help="Compression ratios")

    ab = sub.add_parser("ablate", parents=[common], help="Measurement-fusion ablation")
    ab.add_argument("--seeds", type=int, default=1, help="Number of seeds (train.seed, train.seed + 1, ...)")
    ab.add_argument("--stages", type=int, help="Pyramid depth to train (default: all stages)")
    ab.add_argument("--epochs", type=int, help="Override train.max_epochs")

    runs = sub.add_parser("runs", parents=[common], help="List run directories")
    runs.add_argument("--cleanup", type=int, metavar="DAYS", help="Remove runs older than DAYS days")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Dict]:
    overrides: Dict[str, Dict] = {"sensing": {}, "train": {}}
    for flag, key in (("m", "m"), ("cr", "cr"), ("beta", "beta"), ("k", "k"), ("n", "N")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides["sensing"][key] = value
    if getattr(args, "epochs", None) is not None:
        overrides["train"]["max_epochs"] = args.epochs
    return {section: values for section, values in overrides.items() if values}


def _load(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config, _overrides(args), args.seed)


def _check_pipeline_size(config: ExperimentConfig) -> int:
    side = side_for_stages(config.sensing.stages)
    if config.sensing.signal_dim != side * side:
        raise ConfigError(f"A {config.sensing.stages}-stage pyramid works on {side}x{side} images: "
                          f"N must be {side * side}, got {config.sensing.signal_dim}")
    return side


def _manager(args: argparse.Namespace) -> RunAssetsManager:
    return RunAssetsManager(args.run_dir)


def _run_manifest(config: ExperimentConfig) -> dict:
    return {"config_hash": config.config_hash, "config": config.to_dict(), "sensing": config.sensing.to_dict()}


def _latest_run(manager: RunAssetsManager, config: ExperimentConfig) -> str:
    run_dir = manager.find_latest_run(config.config_hash)
    if run_dir is None:
        raise DataError(f"No run for config {config.config_hash} under {manager.runs_dir}; train first")
    return run_dir


def cmd_budget(args: argparse.Namespace) -> int:
    config = _load(args).sensing
    dims = config.stage_dims
    frame = pd.DataFrame({
        "stage": range(1, config.stages + 1),
        "side": [BASE_SIDE * 2 ** i for i in range(config.stages)],
        "measurements": dims,
        "CR": [f"{float(cr):g}" for cr in config.compression_ratios()],
    })
    if args.sparsity:
        pixels = [side * side for side in frame["side"]]
        bounds = []
        for n in pixels:
            sparsity = max(1, round(args.sparsity * n / config.signal_dim))
            bounds.append(rip_lower_bound(sparsity, n) if sparsity < n else None)
        frame["rip_bound"] = bounds
        frame["rip_ok"] = [b is not None and d >= b for d, b in zip(dims, bounds)]

    print(f"Measurement budget: m={config.base_dim}, beta={config.beta}, k={config.stages}, N={config.signal_dim}")
    print(frame.to_string(index=False))
    if config.beta == beta_upper_bound():
        print("\nNote: beta = 4 is the upper bound for a constant sparsity ratio")
    return 0


def cmd_encode(args: argparse.Namespace) -> int:
    config = _load(args).sensing
    side = config.side
    image = load_image(args.image, config.channels, resize=side)
    matrices = build_matrices(config)
    measurements = encode(image, matrices)

    length = None
    if args.stages is not None:
        if not 1 <= args.stages <= config.stages:
            raise ConfigError(f"--stages must lie in 1..{config.stages}")
        length = config.stage_dims[args.stages - 1]
    elif args.length is not None:
        length = args.length

    written = write_measurements(args.out, measurements, config, length)
    kept = length or config.stage_dims[-1]
    print(f"✓ Encoded {args.image} ({side}x{side}, {config.channels} channel(s))")
    print(f"Measurements per channel: {kept} of {config.stage_dims[-1]}")
    print(f"Wrote {written} bytes to {args.out}")
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    bundle_dir = args.bundle or _latest_run(_manager(args), _load(args))
    bundle = load_bundle(bundle_dir)
    name = os.path.splitext(os.path.basename(args.measurements))[0]
    out_dir = args.out or os.path.join(bundle_dir, "reconstructions", name)

    result = reconstruct_file(args.measurements, bundle, out_dir)
    side = result["sides"][-1]
    print(f"✓ Reconstructed {args.measurements} in {result['milliseconds']:.1f} ms")
    print(f"Pyramid depth: {result['depth']} of {bundle.sensing.stages} stages ({side}x{side})")
    if result["depth"] < bundle.sensing.stages:
        print(f"Warning: reduced measurements enable stages 1..{result['depth']} only")
    for path in result["images"]:
        print(f"  {path}")
    return 0


def _existing_checkpoints(manager: RunAssetsManager, run_dir: str) -> Dict[int, Checkpoint]:
    return {stage: load_checkpoint(manager.stage_dir(run_dir, stage)) for stage in manager.trained_stages(run_dir)}


def cmd_train(args: argparse.Namespace) -> int:
    config = _load(args)
    if args.stages:
        config = config.with_stages(args.stages)
    side = _check_pipeline_size(config)
    manager = _manager(args)

    stages = sorted(config.train.stages) or list(range(1, config.sensing.stages + 1))
    if args.resume or stages[0] > 1:
        run_dir = _latest_run(manager, config)
        print(f"Continuing run {run_dir}")
    else:
        run_dir = manager.create_run(config.config_hash, _run_manifest(config))
        print(f"New run {run_dir}")

    corpus = build_corpus(config.data, config.sensing.channels, side)
    corpus.save_manifests(os.path.join(run_dir, "data"), config.config_hash)
    existing = _existing_checkpoints(manager, run_dir)

    print(f"Training stages {stages} on {corpus.train.shape[0]} patches "
          f"({corpus.val.shape[0]} validation)...")
    result = train_pyramid(corpus.train, corpus.val, build_matrices(config.sensing), config.train, config.model,
                           existing, run_dir, config.config_hash, resume=args.resume)
    manager.record_stages(run_dir, stages)

    print("✓ Training completed")
    for stage in stages:
        checkpoint = result.checkpoints[stage]
        report = result.transfer_reports.get(stage)
        transfer = f", transferred {report.copied_fraction:.0%} of tensors" if report else ""
        print(f"  Stage {stage}: best epoch {checkpoint.best_epoch} of {checkpoint.epoch}, "
              f"val_mse={checkpoint.best_val_mse:.5f}{transfer}")
    print(f"Checkpoints saved to: {run_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    manager = _manager(args)
    if args.bundle:
        run_dir = args.bundle
        config = _load(args) if args.config else config_from_manifest(manager.read_manifest(run_dir))
    else:
        config = _load(args)
        run_dir = manager.find_latest_run(config.config_hash)
        if run_dir is None:
            run_dir = manager.create_run(config.config_hash, _run_manifest(config))
            print(f"No trained run for config {config.config_hash}; evaluating fresh weights in {run_dir}")

    side = _check_pipeline_size(config)
    bundle = load_bundle(run_dir, fill_missing=True, seed=config.train.seed)
    corpus = build_corpus(config.data, config.sensing.channels, side)
    reports = evaluate(bundle, corpus.test, args.eval_crs, config.data.dataset)
    paths = write_quality_reports(reports, os.path.join(run_dir, "eval"), bundle.config_hash)

    frame = pd.DataFrame([{"cr": r.cr, "depth": r.depth, **r.final} for r in reports])
    print(f"✓ Evaluated {corpus.test.shape[0]} test patches of {config.data.dataset}")
    print(frame.to_string(index=False))
    print(f"Reports saved to: {paths['csv']} and {paths['json']}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load(args)
    if args.stages:
        config = config.with_stages(range(1, args.stages + 1))
    side = _check_pipeline_size(config)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")

    manager = _manager(args)
    run_dir = manager.create_run(config.config_hash, _run_manifest(config))
    corpus = build_corpus(config.data, config.sensing.channels, side)
    corpus.save_manifests(os.path.join(run_dir, "data"), config.config_hash)

    seeds = [config.train.seed + i for i in range(args.seeds)]
    print(f"Running fusion ablation with seeds {seeds}...")
    frame = ablate_fusion(corpus.train, corpus.val, corpus.test, build_matrices(config.sensing),
                          config.train, config.model, seeds, run_dir, config.config_hash)

    summary = summarize_ablation(frame).pivot(index="stage", columns="variant", values="test_mse")
    print("✓ Ablation completed (mean test MSE per stage)")
    print(summary.to_string())
    print(f"Results saved to: {os.path.join(run_dir, 'ablation')}")
    return 0


def cmd_runs(args: argparse.Namespace) -> int:
    manager = _manager(args)
    if args.cleanup is not None:
        print(f"Cleaning up runs older than {args.cleanup} days...")
        print(f"Removed {manager.cleanup_old_runs(args.cleanup)} runs")

    runs = manager.list_runs()
    if not runs:
        print(f"No runs found in {manager.runs_dir}")
        return 0
    print(f"\nFound {len(runs)} runs:")
    for run in runs:
        print(f"  {run['run_id']} stages={run['stages_trained']} "
              f"({run['size_bytes'] / (1024 * 1024):.2f} MB) - {run['modified']}")
    usage = manager.get_storage_usage()
    print(f"\nStorage Usage: {usage['total_size_mb']} MB ({usage['total_size_gb']} GB)")
    return 0


COMMANDS = {
    "budget": cmd_budget,
    "encode": cmd_encode,
    "reconstruct": cmd_reconstruct,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "runs": cmd_runs,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI function; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        print_usage()
        return 0

    load_env_file()
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return COMMANDS[args.command](args)
    except LapranError as e:
        print(f"✗ Error: {e}")
        hints = next((h for cls, h in TROUBLESHOOTING.items() if isinstance(e, cls)), [])
        if hints:
            print("\nTroubleshooting:")
            for i, hint in enumerate(hints, start=1):
                print(f"{i}. {hint}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
