"""
Leaky integrate-and-fire neurons.

One step of a layer:

    v        = tau * residual + z
    spikes   = v >= v_thr
    residual = (1 - spikes) * v

Fired neurons restart from zero; the part of ``v`` above threshold is
discarded and never re-enters the recursion.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from pydantic import BaseModel, Field

from .exceptions import DimensionError
from .tensor import ArrayLike, Tensor, add, as_tensor, clamp_linear, mul, spike, sub


class LIFParams(BaseModel):
    """Per-layer neuron constants."""

    tau: float = Field(default=0.5, gt=0.0, le=1.0)
    v_thr: float = Field(default=1.0, gt=0.0)
    surrogate_width: float = Field(default=1.0, gt=0.0)

    model_config = {"frozen": True}

    @property
    def alpha_tilde(self) -> float:
        """Constant folded out of the spatial-temporal factor."""
        return self.v_thr * self.tau


@dataclass
class LIFState:
    """Membrane potential, residual and spikes of one layer at one timestep."""

    v: Tensor
    residual: Tensor
    spikes: Tensor

    @classmethod
    def zeros(cls, shape: Tuple[int, ...]) -> "LIFState":
        return cls(
            v=Tensor(np.zeros(shape)),
            residual=Tensor(np.zeros(shape)),
            spikes=Tensor(np.zeros(shape)),
        )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.v.shape


def spike_fire(v: ArrayLike, v_thr: float, surrogate_width: float, smooth: bool = False) -> Tensor:
    """
    Fire where ``v >= v_thr``.

    Args:
        v: Membrane potential
        v_thr: Threshold
        surrogate_width: Width of the boxcar surrogate around the threshold
        smooth: Replace the step by its clamped-linear primitive, whose exact
            derivative is the surrogate (used for gradient checks)
    """
    if smooth:
        return clamp_linear(v, v_thr, surrogate_width)
    return spike(v, v_thr, surrogate_width)


def lif_step(state: LIFState, z: ArrayLike, params: LIFParams, smooth: bool = False) -> LIFState:
    """Advance one layer by one timestep given input current ``z``."""
    z = as_tensor(z)
    if state.residual.shape != z.shape:
        raise DimensionError(f"lif_step: residual {state.residual.shape} and input {z.shape} differ")
    v = add(mul(state.residual, params.tau), z)
    spikes = spike_fire(v, params.v_thr, params.surrogate_width, smooth=smooth)
    residual = mul(sub(1.0, spikes), v)
    return LIFState(v=v, residual=residual, spikes=spikes)
