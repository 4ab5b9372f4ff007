#!/usr/bin/env python
"""
Desk-scale experiments: TET versus TET + STR, softmax cutoff and ensemble uncertainty
on the synthetic oriented-bars dataset. Pass/fail rows for the accuracy, factor-variance and
uncertainty checks go to criteria.csv; the exit code is 1 when any of them fails.
"""

import sys
from pathlib import Path

# Add backend to path
sys.path.insert(0, str(Path(__file__).parent.parent / "backend"))

import argparse
import logging

import numpy as np
import pandas as pd

from aoisnn.config import TrainConfig
from aoisnn.data.manifest import DatasetManifest, SpikeDataset
from aoisnn.data.synthetic import synth_event_dataset
from aoisnn.ensemble import load_ensemble, uncertainty_curve
from aoisnn.inference import collect_outputs, sweep_from_outputs, threshold_grid
from aoisnn.storage import checkpoint_load
from aoisnn.trainer import ModelTrainer, train_ensemble


def train_variant(dataset: Path, out: Path, alpha: float, seed: int, args):
    config = TrainConfig(dataset=str(dataset), T=args.T, epochs=args.epochs, alpha=alpha, seed=seed)
    return ModelTrainer(config, out, progress=False).run()


def ensure_dataset(path: Path, seed: int, args) -> SpikeDataset:
    if not (path / 'manifest.yaml').exists():
        print(f"Generating synthetic dataset in {path}")
        synth_event_dataset(path, classes=3, samples_per_class=100, height=16, width=16, T=args.T, seed=seed,
                            workers=args.workers)
    return SpikeDataset.from_manifest(DatasetManifest.load(path), 'test', T=args.T)


def criterion(name: str, detail: str, passed: bool) -> dict:
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return {'criterion': name, 'detail': detail, 'passed': bool(passed)}


def main():
    parser = argparse.ArgumentParser(description='Run the desk-scale anytime-inference experiments')
    parser.add_argument('--out', type=str, default='results/desk',
                       help='Output directory (default: results/desk)')
    parser.add_argument('--seeds', type=int, default=3,
                       help='Seeds per variant (default: 3)')
    parser.add_argument('--epochs', type=int, default=30,
                       help='Training epochs (default: 30)')
    parser.add_argument('--T', type=int, default=10,
                       help='Timesteps (default: 10)')
    parser.add_argument('--alpha', type=float, default=0.5,
                       help='STR weight for the regularised variant (default: 0.5)')
    parser.add_argument('--members', type=int, default=3,
                       help='Ensemble members for the uncertainty curve (default: 3)')
    parser.add_argument('--reruns', type=int, default=3,
                       help='Dataset reruns for the uncertainty trend (default: 3)')
    parser.add_argument('--workers', type=int, default=1,
                       help='Worker processes (default: 1)')

    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")

    out = Path(args.out)
    dataset = out / 'data'
    test = ensure_dataset(dataset, 0, args)

    # Accuracy at T and deepest-layer factor variance for both variants
    rows = []
    checkpoints = {}
    for variant, alpha in (('tet', 0.0), ('tet+str', args.alpha)):
        for seed in range(args.seeds):
            print(f"\n{'='*60}")
            print(f"{variant}, seed {seed}")
            print(f"{'='*60}")
            result = train_variant(dataset, out / variant / f"seed_{seed}", alpha, seed, args)
            checkpoints[(variant, seed)] = result.checkpoint
            network = checkpoint_load(result.checkpoint).network()
            logits, synops, labels = collect_outputs(network, test, args.T)
            accuracy = (logits.argmax(axis=-1) == labels[None, :]).mean(axis=1)
            last = result.metrics.rows[-1]
            rows.append({'variant': variant, 'seed': seed, 'acc_T': accuracy[-1],
                         'acc_half_T': accuracy[args.T // 2 - 1],
                         'stf_var_deepest': last.stf_var[-1] if last.stf_var else np.nan})
    accuracy = pd.DataFrame(rows)
    accuracy.to_csv(out / 'accuracy.csv', index=False)
    print("\nAccuracy (mean over seeds):")
    print(accuracy.groupby('variant')[['acc_T', 'acc_half_T', 'stf_var_deepest']].agg(['mean', 'std']))

    # Cutoff sweep on the regularised model
    network = checkpoint_load(checkpoints[('tet+str', 0)]).network()
    logits, synops, labels = collect_outputs(network, test, args.T)
    thresholds = threshold_grid('0.8:1.0:20')
    report = sweep_from_outputs(logits, synops, labels, thresholds)
    report.to_frame().to_csv(out / 'threshold_sweep.csv', index=False)
    full = sweep_from_outputs(logits, synops, labels, [float('inf')]).rows[0]
    eligible = [r for r in report.rows if r.avg_timestep <= 0.7 * args.T and full.accuracy - r.accuracy <= 0.02]
    if eligible:
        best = min(eligible, key=lambda r: r.avg_timestep)
        print(f"\nCutoff {best.threshold:.3f}: accuracy {best.accuracy:.4f} at avg T {best.avg_timestep:.2f} "
              f"({best.avg_synops / full.avg_synops:.1%} of full synops)")
    else:
        print(f"\nNo threshold reaches avg T <= {0.7 * args.T:.1f} within 2 points of {full.accuracy:.4f}")

    # Ensemble uncertainty per variant on the main dataset, then the regularised variant on fresh reruns
    curves = {}
    for variant, alpha in (('tet', 0.0), ('tet+str', args.alpha)):
        config = TrainConfig(dataset=str(dataset), T=args.T, epochs=args.epochs, alpha=alpha, seed=100)
        paths = train_ensemble(config, args.members, out / 'ensemble' / variant, workers=args.workers)
        curve = uncertainty_curve(load_ensemble(paths), test, args.T)
        curve.to_frame().to_csv(out / f'uncertainty_{variant}.csv', index=False)
        curves[variant] = curve
        print(f"{variant}: avg sigma2 {curve.avg_sigma2:.5f}, ensemble accuracy {curve.final_accuracy:.4f}")
    ratio = curves['tet+str'].avg_sigma2 / max(curves['tet'].avg_sigma2, np.finfo(float).tiny)
    print(f"Uncertainty ratio (tet+str / tet): {ratio:.3f}")

    decreasing = [bool(curves['tet+str'].sigma2[0] >= curves['tet+str'].sigma2[-1])]
    for rerun in range(1, args.reruns):
        rerun_data = out / 'reruns' / f'data_{rerun}'
        rerun_test = ensure_dataset(rerun_data, rerun, args)
        config = TrainConfig(dataset=str(rerun_data), T=args.T, epochs=args.epochs, alpha=args.alpha, seed=100)
        paths = train_ensemble(config, args.members, out / 'reruns' / f'ensemble_{rerun}', workers=args.workers)
        curve = uncertainty_curve(load_ensemble(paths), rerun_test, args.T)
        curve.to_frame().to_csv(out / 'reruns' / f'uncertainty_{rerun}.csv', index=False)
        decreasing.append(bool(curve.sigma2[0] >= curve.sigma2[-1]))

    # Pass/fail summary
    tet = accuracy[accuracy.variant == 'tet'].set_index('seed')
    regularised = accuracy[accuracy.variant == 'tet+str'].set_index('seed')
    print(f"\n{'='*60}")
    results = [
        criterion('6a', 'STR deepest-layer xi variance <= TET in at least 2 of the seeds',
                  (regularised.stf_var_deepest <= tet.stf_var_deepest).sum() >= min(2, args.seeds)),
        criterion('6b', 'STR accuracy at T >= TET - 2 points on every seed',
                  bool((regularised.acc_T >= tet.acc_T - 0.02).all())),
        criterion('6c', 'TET and STR both reach 90% at T on every seed',
                  bool((accuracy.acc_T >= 0.9).all())),
        criterion('8c', f'sigma2(1) >= sigma2(T) in at least 2 of {len(decreasing)} reruns',
                  sum(decreasing) >= min(2, len(decreasing))),
    ]
    pd.DataFrame(results).to_csv(out / 'criteria.csv', index=False)
    return 0 if all(r['passed'] for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
