"""
Training objectives: mean-output and per-timestep (TET) cross entropy, the
spatial-temporal factor of each spiking layer and the regulariser built on it.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .exceptions import ConfigError, ContractError
from .network import ForwardRecord
from .neuron import LIFState
from . import tensor as tn
from .tensor import Tensor

logger = logging.getLogger(__name__)

STF_EPSILON = 1e-8
STF_FLOOR = 1e-3
PER_TIMESTEP = "per_timestep"
PER_SAMPLE = "per_sample"


def _check_outputs(outputs: Sequence[Tensor]) -> None:
    if len(outputs) == 0:
        raise ContractError("loss over an empty output sequence")


def loss_mean(outputs: Sequence[Tensor], labels) -> Tensor:
    """Cross entropy of the time-averaged output."""
    _check_outputs(outputs)
    averaged = tn.mean(tn.stack(outputs), axis=0)
    return tn.cross_entropy(averaged, labels)


def loss_tet(outputs: Sequence[Tensor], labels) -> Tensor:
    """Time average of the per-timestep cross entropies."""
    _check_outputs(outputs)
    total = tn.cross_entropy(outputs[0], labels)
    for output in outputs[1:]:
        total = tn.add(total, tn.cross_entropy(output, labels))
    return tn.mul(total, 1.0 / len(outputs))


def stf_compute(state: LIFState, epsilon: float = STF_EPSILON) -> Tensor:
    """
    Spatial-temporal factor ``||spikes|| / ||residual||`` of one layer at one timestep.

    A 1-D state gives a scalar; a batched state (batch, ...) gives one value
    per sample. The constant ``v_thr * tau`` is left out; it is absorbed by
    the regulariser weight.
    """
    axis = None if state.spikes.ndim == 1 else tuple(range(1, state.spikes.ndim))
    spatial = tn.l2_norm(state.spikes, 0.0, axis=axis)
    temporal = tn.l2_norm(state.residual, epsilon, axis=axis)
    return tn.div(spatial, temporal)


def stf_mask(xi: Tensor, prediction_correct) -> Tensor:
    """Zero the entries whose prediction was wrong; kept entries pass gradients unchanged."""
    keep = np.asarray(prediction_correct, dtype=np.float64)
    return tn.mul(xi, keep)


def correctness_mask(outputs: Sequence[Tensor], labels, mode: str = PER_TIMESTEP) -> np.ndarray:
    """
    Boolean (T, batch) mask of correct predictions.

    ``per_timestep`` judges the prediction at each t on its own;
    ``per_sample`` judges the time-averaged prediction and repeats it over t.
    """
    logits = np.stack([np.atleast_2d(o.data) for o in outputs])
    labels = np.atleast_1d(np.asarray(labels))
    if mode == PER_TIMESTEP:
        return logits.argmax(axis=-1) == labels[None, :]
    if mode == PER_SAMPLE:
        correct = logits.mean(axis=0).argmax(axis=-1) == labels
        return np.broadcast_to(correct, logits.shape[:2]).copy()
    raise ConfigError("correctness_mode", f"expected {PER_TIMESTEP!r} or {PER_SAMPLE!r}, got {mode!r}")


@dataclass
class STFTrace:
    """Per-layer factor values over (timestep, sample) for one mini-batch."""

    xi: List[Tensor]  # per spiking layer, shape (T, batch)
    masked_xi: List[Tensor]
    correct: np.ndarray  # (T, batch)
    alpha_tilde: List[float]
    stable: Optional[List[np.ndarray]] = None  # per layer (T, batch); False where the residual norm is degenerate

    @property
    def num_layers(self) -> int:
        return len(self.xi)

    def xi_array(self) -> np.ndarray:
        """Factor values as an array of shape (L, T, batch)."""
        return np.stack([x.data for x in self.xi])

    def layer_means_over_time(self, layer: int) -> np.ndarray:
        """Batch-mean factor of ``layer`` (0-based) at every timestep."""
        return self.xi[layer].data.mean(axis=1)

    def regularised_xi(self, layer: int) -> Tensor:
        """Masked factor of ``layer`` with degenerate entries also zeroed; the set the regulariser sees."""
        if self.stable is None:
            return self.masked_xi[layer]
        return stf_mask(self.masked_xi[layer], self.stable[layer])


def residual_norm(state: LIFState) -> np.ndarray:
    """L2 norm of the residual potential, one value per sample (a scalar for a 1-D state)."""
    data = state.residual.data
    axis = None if data.ndim == 1 else tuple(range(1, data.ndim))
    return np.sqrt(np.sum(data * data, axis=axis))


def build_stf_trace(record: ForwardRecord, labels, alpha_tilde: Sequence[float],
                    epsilon: float = STF_EPSILON, correctness_mode: str = PER_TIMESTEP,
                    floor: float = STF_FLOOR) -> STFTrace:
    """
    Compute the factor of every spiking layer at every timestep of a logged forward pass.

    Entries whose residual norm is at most ``floor`` are kept in ``xi`` and
    ``masked_xi`` but flagged unstable: their factor is bounded only by
    ``epsilon`` and they are left out of the regulariser.
    """
    if record.states is None:
        raise ContractError("build_stf_trace needs a forward pass run with log_stf=True")
    if floor < 0:
        raise ConfigError("stf_floor", f"must be non-negative, got {floor}")
    correct = correctness_mask(record.outputs, labels, correctness_mode)
    num_layers = len(record.states[0])
    xi, masked, stable = [], [], []
    for layer in range(num_layers):
        per_t = [stf_compute(states[layer], epsilon) for states in record.states]
        layer_xi = tn.stack([tn.reshape(v, (-1,)) for v in per_t])
        xi.append(layer_xi)
        masked.append(stf_mask(layer_xi, correct))
        norms = np.stack([np.reshape(residual_norm(states[layer]), (-1,)) for states in record.states])
        stable.append(norms > floor)
    unstable = sum(int((~s & correct).sum()) for s in stable)
    if unstable:
        logger.debug(f"{unstable} correct factor entries with residual norm <= {floor} left out of the regulariser")
    return STFTrace(xi=xi, masked_xi=masked, correct=correct, alpha_tilde=list(alpha_tilde), stable=stable)


def str_penalty(xi_set: Tensor, stop_grad_max: bool = True) -> Tensor:
    """
    Squared gap between the smallest and largest non-zero factor values.

    Args:
        xi_set: Masked factor values of one layer over a mini-batch and all timesteps
        stop_grad_max: Treat the maximum as a fixed target

    Returns:
        Scalar penalty; zero when fewer than two non-zero entries exist
    """
    flat = tn.reshape(xi_set, (-1,))
    nonzero = np.flatnonzero(flat.data)
    if nonzero.size < 2:
        return Tensor(0.0)
    support = tn.take(flat, nonzero)
    low = tn.min(support)
    high = tn.stop_gradient(tn.max(support)) if stop_grad_max else tn.max(support)
    gap = tn.sub(low, high)
    return tn.mul(gap, gap)


@dataclass
class LossBreakdown:
    task_loss: Tensor
    str_penalty: Tensor
    alpha: float
    total: Tensor

    def as_dict(self) -> dict:
        return {
            "task_loss": self.task_loss.item(),
            "str_penalty": self.str_penalty.item(),
            "alpha": self.alpha,
            "total": self.total.item(),
        }


def combined_loss(outputs: Sequence[Tensor], labels, stf: Optional[STFTrace], alpha: float,
                  loss: str = "tet", stop_grad_max: bool = True) -> LossBreakdown:
    """
    Task loss plus ``alpha`` times the regulariser summed over spiking layers.

    With ``alpha == 0`` the regulariser is not evaluated and the total is the
    task loss itself.
    """
    if alpha < 0:
        raise ConfigError("alpha", f"must be non-negative, got {alpha}")
    if loss == "tet":
        task = loss_tet(outputs, labels)
    elif loss == "mean":
        task = loss_mean(outputs, labels)
    else:
        raise ConfigError("loss", f"expected 'mean' or 'tet', got {loss!r}")
    if alpha == 0:
        return LossBreakdown(task_loss=task, str_penalty=Tensor(0.0), alpha=0.0, total=task)
    if stf is None:
        raise ContractError("combined_loss: alpha > 0 requires an STF trace")
    penalty = Tensor(0.0)
    for layer in range(stf.num_layers):
        penalty = tn.add(penalty, str_penalty(stf.regularised_xi(layer), stop_grad_max=stop_grad_max))
    total = tn.add(task, tn.mul(penalty, alpha))
    return LossBreakdown(task_loss=task, str_penalty=penalty, alpha=alpha, total=total)


def stf_trace_frame(trace: STFTrace, sample_ids: Optional[Sequence] = None) -> pd.DataFrame:
    """Long-format table with columns layer, timestep, sample_id, xi, masked, correct (1-based layer/timestep)."""
    xi = trace.xi_array()
    masked = np.stack([m.data for m in trace.masked_xi])
    num_layers, T, batch = xi.shape
    if sample_ids is None:
        sample_ids = list(range(batch))
    layer, timestep, sample = np.meshgrid(np.arange(num_layers), np.arange(T), np.arange(batch), indexing="ij")
    return pd.DataFrame({
        "layer": layer.ravel() + 1,
        "timestep": timestep.ravel() + 1,
        "sample_id": np.asarray(sample_ids)[sample.ravel()],
        "xi": xi.ravel(),
        "masked": masked.ravel(),
        "correct": np.broadcast_to(trace.correct, xi.shape).ravel(),
    })


def export_stf_trace(trace: Union[STFTrace, pd.DataFrame], path: Union[str, Path]) -> Path:
    frame = trace if isinstance(trace, pd.DataFrame) else stf_trace_frame(trace)
    path = Path(path)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote STF trace ({len(frame)} rows) to {path}")
    return path


def stf_layer_summary(frame: pd.DataFrame, alpha_tilde: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """
    Per-layer factor statistics from a trace table.

    ``mean_xi``/``var_xi`` are the mean and variance over timesteps of the
    sample-averaged factor; ``mean_correct``/``mean_wrong`` average over
    correctly and wrongly predicted (timestep, sample) entries, ``gap`` is
    their difference.
    """
    rows = []
    for layer, group in frame.groupby("layer", sort=True):
        per_t = group.groupby("timestep")["xi"].mean().to_numpy()
        correct = group.loc[group["correct"].astype(bool), "xi"]
        wrong = group.loc[~group["correct"].astype(bool), "xi"]
        mean_correct = float(correct.mean()) if len(correct) else np.nan
        mean_wrong = float(wrong.mean()) if len(wrong) else np.nan
        row = {
            "layer": int(layer),
            "mean_xi": float(per_t.mean()),
            "var_xi": float(per_t.var()),
            "mean_correct": mean_correct,
            "mean_wrong": mean_wrong,
            "gap": mean_correct - mean_wrong,
        }
        if alpha_tilde is not None:
            row["alpha_tilde"] = float(alpha_tilde[int(layer) - 1])
        rows.append(row)
    return pd.DataFrame(rows)
