"""
Deep-ensemble prediction and per-timestep uncertainty.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .exceptions import CompatibilityError, ContractError, DimensionError
from .inference import collect_outputs
from .network import SpikingNetwork
from .storage import checkpoint_load
from .tensor import Tensor, as_tensor, l2_norm, mean, stack, sub

logger = logging.getLogger(__name__)


def _member_tensors(outputs_per_member: Sequence) -> List[Tensor]:
    if len(outputs_per_member) == 0:
        raise ContractError("ensemble over zero members")
    tensors = [as_tensor(o) for o in outputs_per_member]
    shape = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        if t.shape != shape:
            raise DimensionError(f"member {i} output {t.shape} differs from member 0 output {shape}")
    return tensors


def ensemble_mean(outputs_per_member: Sequence) -> Tensor:
    """Elementwise mean of the member outputs at one timestep."""
    return mean(stack(_member_tensors(outputs_per_member)), axis=0)


def ensemble_variance(outputs_per_member: Sequence, mu, squared: bool = False) -> Tensor:
    """
    Mean over members of the L2 distance between each output and ``mu``.

    Outputs of shape (classes,) give a scalar; batched outputs (batch, classes)
    give one value per sample. ``squared`` averages squared distances instead.
    """
    tensors = _member_tensors(outputs_per_member)
    mu = as_tensor(mu)
    if mu.shape != tensors[0].shape:
        raise DimensionError(f"ensemble mean {mu.shape} does not match member outputs {tensors[0].shape}")
    deviations = [l2_norm(sub(t, mu), axis=-1) for t in tensors]
    if squared:
        deviations = [d * d for d in deviations]
    return mean(stack(deviations), axis=0)


class Ensemble:
    """Independently initialised members sharing one network spec."""

    def __init__(self, members: Sequence[SpikingNetwork]):
        if len(members) == 0:
            raise ContractError("an ensemble needs at least one member")
        reference = members[0].spec.canonical_json()
        for i, member in enumerate(members[1:], start=1):
            if member.spec.canonical_json() != reference:
                raise CompatibilityError(f"ensemble member {i} has a different network spec than member 0")
            if member.mode != members[0].mode:
                raise CompatibilityError(f"ensemble member {i} runs in {member.mode} mode, member 0 in {members[0].mode}")
        self.members = list(members)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def spec(self):
        return self.members[0].spec


@dataclass
class UncertaintyCurve:
    sigma2: np.ndarray  # (T,)
    final_accuracy: float
    squared: bool = False
    mu: Optional[np.ndarray] = None  # (T, N, classes) when kept

    @property
    def avg_sigma2(self) -> float:
        return float(np.mean(self.sigma2))

    def to_frame(self) -> pd.DataFrame:
        """Rows ``timestep, sigma2`` followed by one summary row ``avg_sigma2, final_accuracy``."""
        frame = pd.DataFrame({
            "timestep": [str(t) for t in range(1, len(self.sigma2) + 1)] + ["avg_sigma2"],
            "sigma2": list(map(float, self.sigma2)) + [self.avg_sigma2],
        })
        frame["final_accuracy"] = [np.nan] * len(self.sigma2) + [self.final_accuracy]
        return frame


def uncertainty_curve(ensemble: Ensemble, dataset, T: int, squared: bool = False,
                      keep_mu: bool = False, batch_size: int = 64) -> UncertaintyCurve:
    """
    Dataset-mean ensemble spread at every timestep 1..T.

    Args:
        ensemble: Trained members
        dataset: Object with ``inputs`` and ``labels``
        T: Number of timesteps
        squared: Average squared distances
        keep_mu: Retain the per-sample ensemble-mean outputs
        batch_size: Evaluation batch size

    Returns:
        UncertaintyCurve with the accuracy of the ensemble mean at T
    """
    member_logits = []
    labels = None
    for i, member in enumerate(ensemble.members):
        logits, _, labels = collect_outputs(member, dataset, T, batch_size, with_synops=False)
        member_logits.append(logits)
        logger.debug(f"Evaluated ensemble member {i + 1}/{len(ensemble)}")
    sigma2 = np.zeros(T)
    mus = []
    for t in range(T):
        outputs = [logits[t] for logits in member_logits]
        mu = ensemble_mean(outputs)
        sigma2[t] = float(np.mean(ensemble_variance(outputs, mu, squared=squared).data))
        mus.append(mu.data)
    mu_all = np.stack(mus)
    final_accuracy = float((mu_all[-1].argmax(axis=-1) == labels).mean())
    logger.info(f"Uncertainty over {len(ensemble)} members: avg sigma2 {np.mean(sigma2):.4f}, "
                f"final accuracy {final_accuracy:.4f}")
    return UncertaintyCurve(sigma2=sigma2, final_accuracy=final_accuracy, squared=squared,
                            mu=mu_all if keep_mu else None)


def load_ensemble(paths: Sequence[Union[str, Path]], mode: Optional[str] = None) -> Ensemble:
    """Ensemble from checkpoint files; the same path may be listed more than once."""
    members = []
    for path in paths:
        checkpoint = checkpoint_load(path)
        members.append(checkpoint.network(mode=mode))
    return Ensemble(members)
