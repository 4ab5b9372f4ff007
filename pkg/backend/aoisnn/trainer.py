"""
Training pipeline for spiking networks: SGD with momentum, cosine learning-rate decay,
optional spatial-temporal regularisation, and ensembles of independently seeded members.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import yaml
from sklearn.metrics import accuracy_score
from tqdm import tqdm

from .config import TrainConfig, config_hash
from .data.manifest import TEST, TRAIN, DatasetManifest, SpikeDataset
from .data.preprocessing import random_shift_batch
from .exceptions import CompatibilityError, ConfigError, NumericError
from .network import EVENT, SpikingNetwork, init_parameters, network_forward
from .objective import LossBreakdown, build_stf_trace, combined_loss
from .records import EpochMetrics, RunMetrics
from .reports import write_run_metrics
from .storage import checkpoint_save
from .tensor import Tape, Tensor, backward, zero_grad

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.aois"
METRICS_NAME = "metrics.csv"
DIAGNOSTICS_NAME = "diagnostics.yaml"


def cosine_lr(lr0: float, epoch: int, epochs: int) -> float:
    """``lr0 * (1 + cos(pi * epoch / epochs)) / 2``; lr0 at epoch 0 and zero at ``epochs``."""
    if epochs < 1 or not 0 <= epoch <= epochs:
        raise ConfigError("epochs", f"epoch {epoch} outside [0, {epochs}]")
    if epoch == epochs:
        return 0.0
    return lr0 * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0


class SGDMomentum:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: List[Tensor], momentum: float = 0.9, weight_decay: float = 5e-4,
                 grad_clip: float = 0.0):
        """
        Args:
            params: Parameters updated in place
            momentum: Velocity decay
            weight_decay: L2 coefficient added to every gradient
            grad_clip: Upper bound on the global L2 norm of the loss gradients; 0 disables clipping
        """
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.velocity = [np.zeros_like(p.data) for p in params]

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None))

    def step(self, lr: float) -> float:
        """Apply one update and return the gradient norm before clipping."""
        norm = self.grad_norm()
        scale = self.grad_clip / norm if self.grad_clip > 0 and norm > self.grad_clip else 1.0
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = scale * p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v
        return norm


@dataclass
class Evaluation:
    accuracy: np.ndarray  # per timestep
    stf_means: np.ndarray  # (L, T) dataset-mean factor per layer and timestep
    firing_rates: np.ndarray  # per layer


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: RunMetrics
    final_accuracy: float


class ModelTrainer:
    """Handles model training and evaluation."""

    def __init__(self, config: TrainConfig, out_dir: Union[str, Path], progress: bool = True):
        """
        Initialize trainer.

        Args:
            config: Validated training config
            out_dir: Directory for checkpoint, metrics and diagnostics
            progress: Show tqdm bars
        """
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.progress = progress
        init_seq, shuffle_seq, noise_seq = np.random.SeedSequence(config.seed).spawn(3)
        self._init_rng = np.random.default_rng(init_seq)
        self._shuffle_rng = np.random.default_rng(shuffle_seq)
        self._noise_rng = np.random.default_rng(noise_seq)
        self.network: Optional[SpikingNetwork] = None
        self.metrics = RunMetrics()
        self.last_breakdown: Optional[LossBreakdown] = None

    def prepare_data(self) -> Tuple[SpikeDataset, SpikeDataset]:
        """Load the train and test splits named by the config's manifest."""
        manifest = DatasetManifest.load(self.config.dataset)
        if manifest.mode != self.config.mode:
            raise ConfigError("mode", f"config mode {self.config.mode!r} but dataset is {manifest.mode!r}")
        train = SpikeDataset.from_manifest(manifest, TRAIN, T=self.config.T, binarize=self.config.binarize)
        test = SpikeDataset.from_manifest(manifest, TEST, T=self.config.T, binarize=self.config.binarize)
        logger.info(f"Training samples: {len(train)}, test samples: {len(test)}")
        self.create_network(manifest.input_shape, manifest.classes)
        return train, test

    def create_network(self, input_shape, classes: int) -> SpikingNetwork:
        spec = self.config.network_spec(input_shape, classes)
        if tuple(spec.input_shape) != tuple(input_shape):
            raise CompatibilityError(f"network input {spec.input_shape} does not match dataset input {tuple(input_shape)}")
        if spec.num_classes != classes:
            raise CompatibilityError(f"network head has {spec.num_classes} units, dataset has {classes} classes")
        params = init_parameters(spec, self._init_rng)
        self.network = SpikingNetwork(spec, params=params, mode=self.config.mode)
        return self.network

    def train_step(self, inputs: np.ndarray, labels: np.ndarray) -> Tuple[LossBreakdown, np.ndarray, bool]:
        """
        Forward, loss and backward on one mini-batch (gradients are left in ``param.grad``).

        Returns:
            (loss breakdown, final-timestep predictions, whether every regulariser set was empty)
        """
        cfg = self.config
        use_str = cfg.alpha > 0
        with Tape() as tape:
            record = network_forward(self.network, inputs, cfg.T, log_stf=use_str, training=True,
                                     dropout=cfg.dropout, rng=self._noise_rng, keep_spikes=False)
            trace = None
            if use_str:
                alpha_tilde = [self.network.spec.layers[i].lif.alpha_tilde for i in self.network.spec.spiking_indices()]
                trace = build_stf_trace(record, labels, alpha_tilde, cfg.stf_epsilon, cfg.correctness_mode,
                                        floor=cfg.stf_floor)
            breakdown = combined_loss(record.outputs, labels, trace, cfg.alpha, loss=cfg.loss,
                                      stop_grad_max=cfg.stop_grad_max)
        self.last_breakdown = breakdown
        if not np.isfinite(breakdown.total.item()):
            raise NumericError(f"non-finite loss {breakdown.total.item()}")
        params = self.network.parameters()
        zero_grad(params)
        backward(tape, breakdown.total)
        empty = use_str and all(np.count_nonzero(trace.regularised_xi(i).data) < 2 for i in range(trace.num_layers))
        return breakdown, record.outputs[-1].data.argmax(axis=-1), empty

    def evaluate(self, dataset: SpikeDataset, batch_size: int = 64) -> Evaluation:
        """Accuracy per timestep, mean spatial-temporal factor per layer and timestep, firing rates."""
        T = self.config.T
        correct = np.zeros(T)
        stf_sums = None
        spikes = None
        for inputs, labels in dataset.batches(batch_size):
            record = network_forward(self.network, inputs, T, log_stf=True, keep_spikes=False)
            correct += (record.logits().argmax(axis=-1) == labels[None, :]).sum(axis=1)
            trace = build_stf_trace(record, labels, [1.0] * len(record.states[0]), self.config.stf_epsilon)
            sums = trace.xi_array().sum(axis=2)
            stf_sums = sums if stf_sums is None else stf_sums + sums
            counts = record.spike_counts.sum(axis=(0, 2))
            spikes = counts if spikes is None else spikes + counts
        n = len(dataset)
        rates = spikes / (np.asarray(self.network.neuron_counts, dtype=np.float64) * n * T)
        return Evaluation(accuracy=correct / n, stf_means=stf_sums / n, firing_rates=rates)

    def _dump_diagnostics(self, epoch: int, batch: int, breakdown: Optional[LossBreakdown], error: Exception) -> Path:
        def as_float(t):
            return float(t.item()) if t is not None else None

        report = {
            "epoch": epoch + 1,
            "batch": batch,
            "error": str(error),
            "loss": None if breakdown is None else {
                "task_loss": as_float(breakdown.task_loss),
                "str_penalty": as_float(breakdown.str_penalty),
                "alpha": breakdown.alpha,
                "total": as_float(breakdown.total),
            },
            "parameters": {
                name: {
                    "min": float(np.nanmin(p.data)) if np.isfinite(p.data).any() else None,
                    "max": float(np.nanmax(p.data)) if np.isfinite(p.data).any() else None,
                    "finite": bool(np.isfinite(p.data).all()),
                }
                for name, p in self.network.params.items()
            },
        }
        path = self.out_dir / DIAGNOSTICS_NAME
        with open(path, "w") as f:
            yaml.safe_dump(report, f, sort_keys=False)
        logger.error(f"Numeric failure in epoch {epoch + 1}, batch {batch}; diagnostics written to {path}")
        return path

    def train(self, train: SpikeDataset, test: Optional[SpikeDataset] = None) -> RunMetrics:
        """
        Train for the configured number of epochs.

        Args:
            train: Training split
            test: Evaluated after every ``eval_every`` epochs and after the last one

        Returns:
            RunMetrics with one row per epoch
        """
        cfg = self.config
        if self.network is None:
            self.create_network(train.input_shape, int(train.labels.max()) + 1)
        optimizer = SGDMomentum(self.network.parameters(), cfg.momentum, cfg.weight_decay, cfg.grad_clip)
        batches_per_epoch = math.ceil(len(train) / cfg.batch_size)
        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
            sums = np.zeros(3)
            predictions, targets = [], []
            empty_batches = 0
            bar = tqdm(train.batches(cfg.batch_size, self._shuffle_rng), total=batches_per_epoch,
                       desc=f"epoch {epoch + 1}/{cfg.epochs}", disable=not self.progress, leave=False)
            for batch, (inputs, labels) in enumerate(bar):
                if cfg.mode == EVENT and cfg.shift_frac > 0:
                    inputs = random_shift_batch(inputs, self._noise_rng, cfg.shift_frac)
                self.last_breakdown = None
                try:
                    breakdown, predicted, empty = self.train_step(inputs, labels)
                except NumericError as e:
                    self._dump_diagnostics(epoch, batch, self.last_breakdown, e)
                    raise
                grad_norm = optimizer.step(lr)
                values = breakdown.as_dict()
                sums += len(labels) * np.array([values["task_loss"], values["str_penalty"], values["total"]])
                predictions.append(predicted)
                targets.append(labels)
                empty_batches += int(empty)
                bar.set_postfix(loss=f"{values['total']:.4f}")
                logger.debug(f"epoch {epoch + 1} batch {batch}: {values}, grad norm {grad_norm:.4g}")
            if cfg.alpha > 0 and empty_batches == batches_per_epoch:
                logger.warning(f"Epoch {epoch + 1}: no mini-batch had two correct, stable non-zero STF values; STR inactive")

            means = sums / len(train)
            row = EpochMetrics(
                epoch=epoch + 1,
                lr=lr,
                task_loss=means[0],
                str_penalty=means[1],
                total_loss=means[2],
                train_accuracy=accuracy_score(np.concatenate(targets), np.concatenate(predictions)),
                empty_str_batches=empty_batches,
            )
            last = epoch + 1 == cfg.epochs
            if test is not None and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
                evaluation = self.evaluate(test)
                row.test_accuracy = evaluation.accuracy.tolist()
                row.stf_mean = evaluation.stf_means.mean(axis=1).tolist()
                row.stf_var = evaluation.stf_means.var(axis=1).tolist()
                row.firing_rates = evaluation.firing_rates.tolist()
            row.wall_clock = time.perf_counter() - started
            self.metrics.append(row)
            final = f", test acc@T {row.test_accuracy[-1]:.4f}" if row.test_accuracy else ""
            logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: lr {lr:.5f}, loss {row.total_loss:.4f} "
                        f"(task {row.task_loss:.4f}, str {row.str_penalty:.4f}), "
                        f"train acc {row.train_accuracy:.4f}{final}")
        return self.metrics

    def save_checkpoint(self, epoch: Optional[int] = None) -> Path:
        meta: Dict[str, object] = {
            "config_hash": config_hash(self.config),
            "epoch": epoch if epoch is not None else len(self.metrics),
            "seed": self.config.seed,
            "mode": self.config.mode,
            "T": self.config.T,
        }
        return checkpoint_save(self.network.spec, self.network.params, meta, self.out_dir / CHECKPOINT_NAME)

    def run(self) -> TrainResult:
        """Load data, train, write checkpoint and metrics."""
        train, test = self.prepare_data()
        metrics = self.train(train, test)
        checkpoint = self.save_checkpoint()
        write_run_metrics(metrics, self.out_dir / METRICS_NAME)
        final = metrics.rows[-1].test_accuracy[-1] if metrics.rows[-1].test_accuracy else float("nan")
        return TrainResult(checkpoint=checkpoint, metrics=metrics, final_accuracy=final)


def _train_member(args) -> Path:
    config, out_dir = args
    return ModelTrainer(config, out_dir, progress=False).run().checkpoint


def train_ensemble(config: TrainConfig, members: int, out_dir: Union[str, Path], workers: int = 1) -> List[Path]:
    """
    Train ``members`` networks that differ only in seed (``config.seed + i``).

    Members never share state; with ``workers > 1`` they train in separate processes.

    Returns:
        Checkpoint paths in member order
    """
    if members < 1:
        raise ConfigError("members", f"an ensemble needs at least one member, got {members}")
    out_dir = Path(out_dir)
    jobs = [(config.model_copy(update={"seed": config.seed + i}), out_dir / f"member_{i + 1}") for i in range(members)]
    if workers <= 1:
        paths = [_train_member(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            paths = list(executor.map(_train_member, jobs))
    logger.info(f"Trained {members} ensemble members under {out_dir}")
    return paths
