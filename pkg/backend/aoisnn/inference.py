"""
Anytime inference: softmax-threshold cutoff, accuracy per timestep,
threshold sweeps and synaptic-operation accounting.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .exceptions import ConfigError, ContractError, RangeError
from .network import EVENT, ForwardRecord, NetworkSpec, SpikingNetwork, network_forward
from .tensor import avg_pool2d, conv2d

logger = logging.getLogger(__name__)

INSTANTANEOUS = "instantaneous"
CUMULATIVE = "cumulative"
FAN_OUT_CHUNK = 1024


class CutoffPolicy(BaseModel):
    """Exit at the first timestep whose top softmax score reaches ``threshold``; ``inf`` never exits early."""

    threshold: float = Field(ge=0.0)
    max_T: int = Field(ge=1)
    confidence: str = INSTANTANEOUS


@dataclass
class CutoffResult:
    exit_t: int  # 1-based
    prediction: int
    max_score: float
    synops: int


class SweepRow(BaseModel):
    threshold: float
    accuracy: float = Field(ge=0.0, le=1.0)
    avg_timestep: float
    avg_synops: float


@dataclass
class SweepReport:
    rows: List[SweepRow]
    max_T: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows],
                            columns=["threshold", "accuracy", "avg_timestep", "avg_synops"])


# -- synaptic operations -----------------------------------------------------------

def _structural_fan_out(spec: NetworkSpec, start: int, population: Tuple[int, ...]) -> np.ndarray:
    """Outgoing connections of every neuron in ``population`` feeding layer ``start``.

    One-hot activations are pushed through the passive layers and the next
    weighted layer with all-ones weights; every non-zero output is one
    connection.
    """
    layers = spec.layers
    count = int(np.prod(population))
    fan_out = np.zeros(count, dtype=np.int64)
    for begin in range(0, count, FAN_OUT_CHUNK):
        end = min(begin + FAN_OUT_CHUNK, count)
        x = np.zeros((end - begin, count))
        x[np.arange(end - begin), np.arange(begin, end)] = 1.0
        x = x.reshape((end - begin,) + population)
        for layer in layers[start:]:
            if layer.kind == "avg_pool":
                x = avg_pool2d(x, layer.size).data
            elif layer.kind == "flatten":
                x = x.reshape(x.shape[0], -1)
            elif layer.kind in ("encoder_conv", "conv"):
                ones = np.ones((layer.filters, x.shape[1], layer.kernel, layer.kernel))
                x = conv2d(x, ones, stride=layer.stride, padding=layer.padding).data
                break
            else:
                x = np.repeat((x.reshape(x.shape[0], -1) != 0).any(axis=1, keepdims=True), layer.units, axis=1)
                break
        fan_out[begin:end] = np.count_nonzero(x.reshape(x.shape[0], -1), axis=1)
    return fan_out.reshape(population)


@lru_cache(maxsize=32)
def _fan_out_tables(spec_json: str, mode: str) -> Tuple[Optional[np.ndarray], Tuple[np.ndarray, ...]]:
    spec = NetworkSpec.model_validate_json(spec_json)
    shapes = spec.layer_shapes()
    spiking = spec.spiking_indices()
    input_fan_out = _structural_fan_out(spec, 0, tuple(spec.input_shape)) if mode == EVENT else None
    tables = tuple(_structural_fan_out(spec, index + 1, shapes[index]) for index in spiking)
    logger.debug(f"Computed fan-out tables for {len(tables)} spiking layers")
    return input_fan_out, tables


def fan_out_tables(network: SpikingNetwork) -> Tuple[Optional[np.ndarray], Tuple[np.ndarray, ...]]:
    """
    Per-neuron outgoing connection counts.

    Returns:
        (input table or None in frame mode, one table per spiking layer); the
        last spiking layer's connections are those into the output head
    """
    return _fan_out_tables(network.spec.canonical_json(), network.mode)


def synops_per_step(record: ForwardRecord, network: SpikingNetwork) -> np.ndarray:
    """Synaptic operations of every sample at every timestep, shape (T, batch)."""
    if not record.spikes:
        raise ContractError("synaptic operations need a forward record with spike maps")
    input_table, tables = fan_out_tables(network)
    rows = []
    for t, layer_spikes in enumerate(record.spikes):
        batch = layer_spikes[0].shape[0]
        ops = np.zeros(batch)
        for spikes, table in zip(layer_spikes, tables):
            ops += spikes.reshape(batch, -1) @ table.reshape(-1).astype(np.float64)
        if input_table is not None and record.inputs:
            ops += record.inputs[t].reshape(batch, -1) @ input_table.reshape(-1).astype(np.float64)
        rows.append(ops)
    return np.rint(np.asarray(rows)).astype(np.int64)


def synaptic_ops(record: ForwardRecord, network: SpikingNetwork, t_stop: Optional[int] = None,
                 per_sample: bool = False) -> Union[int, np.ndarray]:
    """
    Spikes times outgoing connections, summed over layers and timesteps ``1..t_stop``.

    Input events count as spikes of the input population in event mode; the
    analog input of frame mode is not a synaptic operation.
    """
    t_stop = record.T if t_stop is None else t_stop
    if not 1 <= t_stop <= record.T:
        raise RangeError(f"t_stop {t_stop} outside [1, {record.T}]")
    per_step = synops_per_step(record, network)[:t_stop]
    totals = per_step.sum(axis=0)
    return totals if per_sample else int(totals.sum())


# -- cutoff --------------------------------------------------------------------------

def _softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def decision_logits(logits: np.ndarray, confidence: str = INSTANTANEOUS) -> np.ndarray:
    """
    Logits the cutoff decides on, from (T, batch, classes) network outputs.

    ``instantaneous`` uses the output of each timestep as is; ``cumulative``
    uses the running mean of the outputs up to each timestep.
    """
    if confidence == INSTANTANEOUS:
        return logits
    if confidence == CUMULATIVE:
        return np.cumsum(logits, axis=0) / np.arange(1, logits.shape[0] + 1)[:, None, None]
    raise ConfigError("confidence", f"expected {INSTANTANEOUS!r} or {CUMULATIVE!r}, got {confidence!r}")


def exit_timesteps(max_scores: np.ndarray, threshold: float) -> np.ndarray:
    """First 1-based timestep whose score reaches ``threshold``, else T; ``max_scores`` is (T, batch)."""
    if threshold < 0:
        raise ConfigError("threshold", f"must be non-negative, got {threshold}")
    T = max_scores.shape[0]
    reached = max_scores >= threshold
    return np.where(reached.any(axis=0), reached.argmax(axis=0) + 1, T)


def cutoff_run(network: SpikingNetwork, sample: np.ndarray,
               policy: CutoffPolicy) -> Union[CutoffResult, List[CutoffResult]]:
    """
    Run the network step by step and stop each sample at its first confident timestep.

    Args:
        network: Trained network
        sample: One sample, or a batch of samples
        policy: Threshold, horizon and confidence mode

    Returns:
        A CutoffResult for a single sample, a list of them for a batch
    """
    if policy.confidence not in (INSTANTANEOUS, CUMULATIVE):
        raise ConfigError("confidence", f"expected {INSTANTANEOUS!r} or {CUMULATIVE!r}, got {policy.confidence!r}")
    single = np.ndim(sample) == (4 if network.mode == EVENT else 3)
    input_table, tables = fan_out_tables(network)
    running = None
    synops = None
    results: List[Optional[CutoffResult]] = []
    for step in network.stream(sample, policy.max_T):
        logits = step.logits.data
        batch = logits.shape[0]
        if running is None:
            running = np.zeros_like(logits)
            synops = np.zeros(batch)
            results = [None] * batch
        running += logits
        for state, table in zip(step.states, tables):
            synops += state.spikes.data.reshape(batch, -1) @ table.reshape(-1).astype(np.float64)
        if input_table is not None:
            synops += step.input_bins.reshape(batch, -1) @ input_table.reshape(-1).astype(np.float64)
        current = logits if policy.confidence == INSTANTANEOUS else running / (step.t + 1)
        top = _softmax_np(current).max(axis=1)
        last = step.t + 1 == policy.max_T
        for i in range(batch):
            if results[i] is None and (top[i] >= policy.threshold or last):
                results[i] = CutoffResult(
                    exit_t=step.t + 1,
                    prediction=int(current[i].argmax()),
                    max_score=float(top[i]),
                    synops=int(np.rint(synops[i])),
                )
        if all(r is not None for r in results):
            break
    return results[0] if single else results


# -- dataset-level evaluation ----------------------------------------------------------------

def collect_outputs(network: SpikingNetwork, dataset, T: int, batch_size: int = 64,
                    with_synops: bool = True) -> Tuple[np.ndarray, Optional[np.ndarray], np.ndarray]:
    """
    Fixed-horizon inference over a dataset.

    Returns:
        (logits (T, N, classes), cumulative synops (T, N) or None, labels (N,))
    """
    if len(dataset.labels) == 0:
        raise ContractError("evaluation over an empty dataset")
    logits, synops = [], []
    for inputs, _ in dataset.batches(batch_size):
        record = network_forward(network, inputs, T, keep_spikes=with_synops)
        logits.append(record.logits())
        if with_synops:
            synops.append(np.cumsum(synops_per_step(record, network), axis=0))
    cumulative = np.concatenate(synops, axis=1) if with_synops else None
    return np.concatenate(logits, axis=1), cumulative, np.asarray(dataset.labels)


def anytime_curve(network: SpikingNetwork, dataset, T: int, batch_size: int = 64) -> np.ndarray:
    """Accuracy of the instantaneous prediction at every timestep 1..T."""
    logits, _, labels = collect_outputs(network, dataset, T, batch_size, with_synops=False)
    return (logits.argmax(axis=-1) == labels[None, :]).mean(axis=1)


def anytime_frame(curve: Sequence[float]) -> pd.DataFrame:
    return pd.DataFrame({"timestep": np.arange(1, len(curve) + 1), "accuracy": np.asarray(curve, dtype=float)})


def sweep_from_outputs(logits: np.ndarray, cumulative_synops: np.ndarray, labels: np.ndarray,
                       thresholds: Sequence[float], confidence: str = INSTANTANEOUS) -> SweepReport:
    """Evaluate many thresholds on one set of recorded outputs."""
    if len(thresholds) == 0:
        raise ConfigError("thresholds", "at least one threshold is required")
    T = logits.shape[0]
    decided = decision_logits(logits, confidence)
    top = _softmax_np(decided).max(axis=-1)
    predictions = decided.argmax(axis=-1)
    columns = np.arange(logits.shape[1])
    rows = []
    for threshold in thresholds:
        exits = exit_timesteps(top, threshold)
        chosen = predictions[exits - 1, columns]
        rows.append(SweepRow(
            threshold=float(threshold),
            accuracy=float((chosen == labels).mean()),
            avg_timestep=float(exits.mean()),
            avg_synops=float(cumulative_synops[exits - 1, columns].mean()),
        ))
    return SweepReport(rows=rows, max_T=T)


def threshold_sweep(network: SpikingNetwork, dataset, thresholds: Sequence[float], T: int,
                    confidence: str = INSTANTANEOUS, batch_size: int = 64) -> SweepReport:
    """Mean exit-time accuracy, timestep and synaptic operations for each cutoff threshold."""
    logits, cumulative, labels = collect_outputs(network, dataset, T, batch_size)
    report = sweep_from_outputs(logits, cumulative, labels, thresholds, confidence)
    logger.info(f"Threshold sweep over {len(thresholds)} thresholds on {len(labels)} samples finished")
    return report


def synops_comparison(network: SpikingNetwork, dataset, T: int,
                      thresholds: Sequence[float] = (0.9, 1.0, math.inf),
                      confidence: str = INSTANTANEOUS, batch_size: int = 64) -> pd.DataFrame:
    """Accuracy against synaptic operations at a few cutoff thresholds, ``inf`` meaning no cutoff."""
    return threshold_sweep(network, dataset, thresholds, T, confidence, batch_size).to_frame()


def threshold_grid(spec: str) -> List[float]:
    """
    Parse ``lo:hi:n`` (n equally spaced values), ``inf``, or a comma list of either.
    """
    values: List[float] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if part.lower() in ("inf", "infinity"):
            values.append(math.inf)
        elif ":" in part:
            try:
                lo, hi, n = part.split(":")
                values.extend(float(v) for v in np.linspace(float(lo), float(hi), int(n)))
            except ValueError:
                raise ConfigError("thresholds", f"cannot parse grid {part!r}, expected lo:hi:n") from None
        else:
            try:
                values.append(float(part))
            except ValueError:
                raise ConfigError("thresholds", f"cannot parse threshold {part!r}") from None
    if not values:
        raise ConfigError("thresholds", "at least one threshold is required")
    if any(v < 0 for v in values):
        raise ConfigError("thresholds", "thresholds must be non-negative")
    return values
