"""
Command-line entry point: ``aoisnn synth|train|eval``.
"""

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from .config import EvalConfig, SynthConfig, TrainConfig, config_hash, load_config
from .data.manifest import DatasetManifest, SpikeDataset
from .data.synthetic import synth_event_dataset, synth_frame_dataset
from .ensemble import load_ensemble, uncertainty_curve
from .exceptions import AoisnnError, CompatibilityError, ConfigError
from .inference import anytime_curve, collect_outputs, sweep_from_outputs, threshold_grid
from .network import SpikingNetwork, network_forward
from .objective import build_stf_trace, export_stf_trace, stf_layer_summary, stf_trace_frame
from .records import RunSummary
from .reports import version_string, write_anytime_curve, write_frame, write_run_summary, write_sweep, write_uncertainty
from .storage import checkpoint_load
from .trainer import ModelTrainer, train_ensemble

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
SUMMARY_NAME = "run_summary.yaml"
COMPARISON_THRESHOLDS = (0.9, 1.0, float("inf"))


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError("out", f"output directory {out} is not empty; use --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def cmd_synth(args: argparse.Namespace) -> int:
    config = load_config(SynthConfig, args.config, {"seed": args.seed})
    out = Path(args.out)
    if config.kind == "event":
        manifest = synth_event_dataset(
            out, classes=config.classes, samples_per_class=config.samples_per_class, height=config.height,
            width=config.width, T=config.T, window_us=config.window_us, rate=config.rate,
            noise_rate=config.noise_rate, seed=config.seed, test_fraction=config.test_fraction,
            workers=config.workers, force=args.force,
        )
    else:
        manifest = synth_frame_dataset(
            out, classes=config.classes, samples_per_class=config.samples_per_class, height=config.height,
            width=config.width, T=config.T, channels=config.channels, seed=config.seed,
            test_fraction=config.test_fraction, workers=config.workers, force=args.force,
        )
    print(f"Wrote {len(manifest.samples)} {config.kind} samples to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config = load_config(TrainConfig, args.config, {"seed": args.seed})
    out = Path(args.out)
    _prepare_out(out, args.force)
    if args.members > 1:
        paths = train_ensemble(config, args.members, out, workers=args.workers)
        outputs, final = [str(p) for p in paths], None
    else:
        result = ModelTrainer(config, out, progress=not args.quiet).run()
        outputs, final = [str(result.checkpoint)], result.final_accuracy
        print(f"Final-timestep test accuracy: {final:.4f}")
    summary = RunSummary(command="train", config_hash=config_hash(config), version=version_string(),
                         seed=config.seed, wall_clock=time.perf_counter() - started, outputs=outputs,
                         final_accuracy=final)
    write_run_summary(summary, out / SUMMARY_NAME)
    return 0


def _check_compatible(network: SpikingNetwork, manifest: DatasetManifest, source: str) -> None:
    spec = network.spec
    if tuple(spec.input_shape) != tuple(manifest.input_shape):
        raise CompatibilityError(f"{source}: network input {tuple(spec.input_shape)} but dataset input "
                                 f"{tuple(manifest.input_shape)}")
    if spec.num_classes != manifest.classes:
        raise CompatibilityError(f"{source}: network has {spec.num_classes} classes, dataset {manifest.classes}")
    if network.mode != manifest.mode:
        raise CompatibilityError(f"{source}: network runs in {network.mode} mode, dataset is {manifest.mode}")


def _alpha_tilde(network: SpikingNetwork) -> List[float]:
    return [network.spec.layers[i].lif.alpha_tilde for i in network.spec.spiking_indices()]


def _stf_trace(network: SpikingNetwork, dataset: SpikeDataset, T: int, batch_size: int) -> pd.DataFrame:
    """Per-entry factor table over the whole split, sample ids numbered in dataset order."""
    frames = []
    offset = 0
    alpha_tilde = _alpha_tilde(network)
    for inputs, labels in dataset.batches(batch_size):
        record = network_forward(network, inputs, T, log_stf=True, keep_spikes=False)
        trace = build_stf_trace(record, labels, alpha_tilde)
        frames.append(stf_trace_frame(trace, sample_ids=np.arange(offset, offset + len(labels))))
        offset += len(labels)
    return pd.concat(frames, ignore_index=True)


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    overrides = {
        "checkpoint": args.checkpoint,
        "checkpoints": args.checkpoints,
        "dataset": args.dataset,
        "mode": args.mode,
        "thresholds": args.thresholds,
        "T": args.T,
        "seed": args.seed,
        "confidence": args.confidence,
    }
    config = load_config(EvalConfig, args.config, overrides)
    if config.checkpoint is None:
        raise ConfigError("checkpoint", "a checkpoint is required")
    if config.dataset is None:
        raise ConfigError("dataset", "a dataset manifest is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    checkpoint = checkpoint_load(config.checkpoint)
    manifest = DatasetManifest.load(config.dataset)
    network = checkpoint.network()
    _check_compatible(network, manifest, config.checkpoint)
    T = config.T or int(checkpoint.meta.get("T", manifest.T))
    dataset = SpikeDataset.from_manifest(manifest, config.split, T=T)

    outputs: List[str] = []
    final = None
    if config.mode == "fixed":
        curve = anytime_curve(network, dataset, T, config.batch_size)
        outputs.append(str(write_anytime_curve(curve, out / "anytime_curve.csv")))
        trace = _stf_trace(network, dataset, T, config.batch_size)
        outputs.append(str(export_stf_trace(trace, out / "stf_trace.csv")))
        outputs.append(str(write_frame(stf_layer_summary(trace, _alpha_tilde(network)),
                                       out / "stf_summary.csv", "STF layer summary")))
        final = float(curve[-1])
        print(f"Accuracy at T={T}: {final:.4f}")
    elif config.mode == "cutoff":
        thresholds = threshold_grid(config.thresholds)
        logits, synops, labels = collect_outputs(network, dataset, T, config.batch_size)
        report = sweep_from_outputs(logits, synops, labels, thresholds, config.confidence)
        comparison = sweep_from_outputs(logits, synops, labels, COMPARISON_THRESHOLDS, config.confidence)
        outputs.append(str(write_sweep(report, out / "threshold_sweep.csv")))
        outputs.append(str(write_frame(comparison.to_frame(), out / "synops_comparison.csv", "synops comparison")))
        final = comparison.rows[-1].accuracy
    else:
        paths = [config.checkpoint] + list(config.checkpoints)
        if len(paths) < 2:
            raise ConfigError("checkpoints", "uncertainty mode needs at least one additional checkpoint")
        ensemble = load_ensemble(paths)
        for path, member in zip(paths, ensemble.members):
            _check_compatible(member, manifest, path)
        curve = uncertainty_curve(ensemble, dataset, T, squared=config.squared_variance,
                                  batch_size=config.batch_size)
        outputs.append(str(write_uncertainty(curve, out / "uncertainty_curve.csv")))
        final = curve.final_accuracy
        print(f"Average sigma2: {curve.avg_sigma2:.5f}, ensemble accuracy at T: {final:.4f}")

    summary = RunSummary(command=f"eval {config.mode}", config_hash=config_hash(config), version=version_string(),
                         seed=config.seed, wall_clock=time.perf_counter() - started, outputs=outputs,
                         final_accuracy=final)
    write_run_summary(summary, out / SUMMARY_NAME)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aoisnn", description="Anytime-inference spiking networks")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="Override the config seed")
        p.add_argument("--out", type=str, required=out_required, default="results", help="Output directory")
        p.add_argument("--force", action="store_true", help="Overwrite a non-empty output directory")

    synth = sub.add_parser("synth", help="Write a synthetic dataset")
    common(synth)
    synth.set_defaults(func=cmd_synth)

    train = sub.add_parser("train", help="Train a network (or an ensemble)")
    common(train)
    train.add_argument("--members", type=int, default=1, help="Ensemble members with seeds seed..seed+M-1")
    train.add_argument("--workers", type=int, default=1, help="Worker processes for ensemble training")
    train.add_argument("--quiet", action="store_true", help="Hide progress bars")
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("eval", help="Evaluate a checkpoint")
    common(evaluate, out_required=False)
    evaluate.add_argument("--checkpoint", type=str, default=None)
    evaluate.add_argument("--checkpoints", type=str, nargs="+", default=None,
                          help="Additional ensemble members for uncertainty mode")
    evaluate.add_argument("--dataset", type=str, default=None, help="Dataset manifest or directory")
    evaluate.add_argument("--mode", choices=["fixed", "cutoff", "uncertainty"], default=None)
    evaluate.add_argument("--thresholds", type=str, default=None, help="lo:hi:n, inf, or a comma list")
    evaluate.add_argument("--confidence", choices=["instantaneous", "cumulative"], default=None)
    evaluate.add_argument("--T", type=int, default=None, help="Timesteps (defaults to the checkpoint's)")
    evaluate.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        return args.func(args)
    except AoisnnError as e:
        logger.error(str(e))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
