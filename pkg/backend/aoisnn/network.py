"""
Network specification and time-unrolled forward pass of a spiking network.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Annotated, Dict, Iterator, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .exceptions import ConfigError, DimensionError, RangeError
from .neuron import LIFParams, LIFState, lif_step
from .tensor import Tensor, add, avg_pool2d, conv2d, conv_output_extent, matmul, mul, parameter, reshape

logger = logging.getLogger(__name__)

EVENT = "event"
FRAME = "frame"
Mode = Literal["event", "frame"]

# He-style uniform bound sqrt(INIT_SCALE / fan_in)
INIT_SCALE = 6.0


class EncoderConvLayer(BaseModel):
    """Downscaling convolution that receives the raw input."""
    kind: Literal["encoder_conv"] = "encoder_conv"
    filters: int = Field(gt=0)
    kernel: int = Field(gt=0)
    stride: int = Field(default=1, gt=0)
    padding: int = Field(default=0, ge=0)
    lif: LIFParams = Field(default_factory=LIFParams)


class ConvLayer(BaseModel):
    kind: Literal["conv"] = "conv"
    filters: int = Field(gt=0)
    kernel: int = Field(gt=0)
    stride: int = Field(default=1, gt=0)
    padding: int = Field(default=0, ge=0)
    lif: LIFParams = Field(default_factory=LIFParams)


class DenseLayer(BaseModel):
    kind: Literal["dense"] = "dense"
    units: int = Field(gt=0)
    lif: LIFParams = Field(default_factory=LIFParams)


class AvgPoolLayer(BaseModel):
    kind: Literal["avg_pool"] = "avg_pool"
    size: int = Field(default=2, gt=0)


class FlattenLayer(BaseModel):
    kind: Literal["flatten"] = "flatten"


class OutputHead(BaseModel):
    """Non-spiking affine read-out; its current is the network output."""
    kind: Literal["head"] = "head"
    units: int = Field(gt=0)


Layer = Annotated[
    Union[EncoderConvLayer, ConvLayer, DenseLayer, AvgPoolLayer, FlattenLayer, OutputHead],
    Field(discriminator="kind"),
]

SPIKING_KINDS = ("encoder_conv", "conv", "dense")
WEIGHTED_KINDS = SPIKING_KINDS + ("head",)


class NetworkSpec(BaseModel):
    """Declarative layer list of a spiking network."""

    input_shape: Tuple[int, int, int]
    layers: List[Layer]

    @model_validator(mode="after")
    def _check_layers(self) -> "NetworkSpec":
        heads = [i for i, layer in enumerate(self.layers) if layer.kind == "head"]
        if heads != [len(self.layers) - 1]:
            raise ValueError("exactly one output head is required and it must be the last layer")
        encoders = [i for i, layer in enumerate(self.layers) if layer.kind == "encoder_conv"]
        if encoders and encoders != [0]:
            raise ValueError("encoder_conv may only appear as the first layer")
        if not self.spiking_indices():
            raise ValueError("at least one spiking layer is required")
        self.layer_shapes()
        return self

    @property
    def num_classes(self) -> int:
        return self.layers[-1].units

    def spiking_indices(self) -> List[int]:
        """Positions in ``layers`` of the spiking layers, in order (l = 1..L)."""
        return [i for i, layer in enumerate(self.layers) if layer.kind in SPIKING_KINDS]

    def layer_shapes(self) -> List[Tuple[int, ...]]:
        """Output shape (without batch axis) of every layer."""
        shapes = []
        shape: Tuple[int, ...] = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if layer.kind in ("encoder_conv", "conv"):
                if len(shape) != 3:
                    raise DimensionError(f"layer {i} ({layer.kind}): expects (c, h, w) input, got {shape}")
                _, h, w = shape
                if h + 2 * layer.padding < layer.kernel or w + 2 * layer.padding < layer.kernel:
                    raise DimensionError(f"layer {i} ({layer.kind}): kernel {layer.kernel} larger than padded input {shape}")
                shape = (
                    layer.filters,
                    conv_output_extent(h, layer.kernel, layer.stride, layer.padding),
                    conv_output_extent(w, layer.kernel, layer.stride, layer.padding),
                )
            elif layer.kind == "avg_pool":
                if len(shape) != 3 or shape[1] < layer.size or shape[2] < layer.size:
                    raise DimensionError(f"layer {i} (avg_pool): window {layer.size} does not fit input {shape}")
                shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            else:
                if len(shape) != 1:
                    raise DimensionError(f"layer {i} ({layer.kind}): expects flat input, got {shape}; add a flatten layer")
                shape = (layer.units,)
            shapes.append(shape)
        return shapes

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Parameter names and shapes in declaration order."""
        shapes: Dict[str, Tuple[int, ...]] = {}
        previous: Tuple[int, ...] = tuple(self.input_shape)
        for i, (layer, out_shape) in enumerate(zip(self.layers, self.layer_shapes())):
            if layer.kind in ("encoder_conv", "conv"):
                shapes[f"layers.{i}.weight"] = (layer.filters, previous[0], layer.kernel, layer.kernel)
                shapes[f"layers.{i}.bias"] = (layer.filters,)
            elif layer.kind in ("dense", "head"):
                shapes[f"layers.{i}.weight"] = (previous[0], layer.units)
                shapes[f"layers.{i}.bias"] = (layer.units,)
            previous = out_shape
        return shapes

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def toy_network_spec(input_shape: Tuple[int, int, int] = (2, 16, 16), classes: int = 3,
                     lif: Optional[LIFParams] = None) -> NetworkSpec:
    """Reference desk-scale network: encoder conv, conv, pooling, dense, head."""
    lif = lif or LIFParams()
    return NetworkSpec(
        input_shape=input_shape,
        layers=[
            EncoderConvLayer(filters=16, kernel=4, stride=2, padding=1, lif=lif),
            ConvLayer(filters=32, kernel=3, stride=1, padding=1, lif=lif),
            AvgPoolLayer(size=2),
            FlattenLayer(),
            DenseLayer(units=128, lif=lif),
            OutputHead(units=classes),
        ],
    )


def init_parameters(spec: NetworkSpec, rng: np.random.Generator) -> Dict[str, Tensor]:
    """Fan-in scaled uniform weights and zero biases."""
    params = {}
    for name, shape in spec.parameter_shapes().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(INIT_SCALE / fan_in)
            params[name] = parameter(rng.uniform(-bound, bound, size=shape), name=name)
        else:
            params[name] = parameter(np.zeros(shape), name=name)
    return params


@dataclass
class ForwardRecord:
    """Everything a forward pass produced, one entry per timestep."""

    outputs: List[Tensor]
    spike_counts: np.ndarray  # (T, L, batch)
    spikes: List[List[np.ndarray]] = field(default_factory=list)  # [t][l] -> (batch, *shape)
    inputs: List[np.ndarray] = field(default_factory=list)  # event bins per t, event mode only
    states: Optional[List[List[LIFState]]] = None  # [t][l], kept when STF is logged
    mode: str = EVENT

    @property
    def T(self) -> int:
        return len(self.outputs)

    def logits(self) -> np.ndarray:
        """Outputs as an array of shape (T, batch, classes)."""
        return np.stack([o.data for o in self.outputs])

    def firing_rates(self, neuron_counts: List[int]) -> np.ndarray:
        """Mean spikes per neuron per timestep for every spiking layer."""
        counts = np.asarray(neuron_counts, dtype=np.float64)
        return self.spike_counts.mean(axis=(0, 2)) / counts


@dataclass
class StepOutput:
    t: int
    logits: Tensor
    states: List[LIFState]
    input_bins: Optional[np.ndarray]


class SpikingNetwork:
    """Parameters of a ``NetworkSpec`` plus the unrolled LIF dynamics."""

    def __init__(self, spec: NetworkSpec, params: Optional[Dict[str, Tensor]] = None,
                 mode: str = EVENT, seed: int = 0):
        """
        Args:
            spec: Layer list
            params: Existing parameters; freshly initialised from ``seed`` if None
            mode: ``event`` (binned events per timestep) or ``frame`` (constant current)
            seed: Initialisation seed
        """
        if mode not in (EVENT, FRAME):
            raise ConfigError("mode", f"expected 'event' or 'frame', got {mode!r}")
        self.spec = spec
        self.mode = mode
        self._shapes = spec.layer_shapes()
        self.params = params if params is not None else init_parameters(spec, np.random.default_rng(seed))
        expected = spec.parameter_shapes()
        for name, shape in expected.items():
            if name not in self.params:
                raise DimensionError(f"missing parameter {name}")
            if tuple(self.params[name].shape) != tuple(shape):
                raise DimensionError(f"parameter {name} has shape {self.params[name].shape}, spec expects {shape}")

    def parameters(self) -> List[Tensor]:
        return [self.params[name] for name in self.spec.parameter_shapes()]

    @property
    def spiking_shapes(self) -> List[Tuple[int, ...]]:
        return [self._shapes[i] for i in self.spec.spiking_indices()]

    @property
    def neuron_counts(self) -> List[int]:
        return [int(np.prod(shape)) for shape in self.spiking_shapes]

    def reset_state(self, batch_size: int) -> List[LIFState]:
        return reset_state(self.spec, batch_size)

    def _affine(self, index: int, x: Tensor) -> Tensor:
        layer = self.spec.layers[index]
        weight = self.params[f"layers.{index}.weight"]
        bias = self.params[f"layers.{index}.bias"]
        if layer.kind in ("encoder_conv", "conv"):
            out = conv2d(x, weight, stride=layer.stride, padding=layer.padding)
            return add(out, reshape(bias, (layer.filters, 1, 1)))
        return add(matmul(x, weight), bias)

    def _apply_passive(self, index: int, x: Tensor) -> Tensor:
        layer = self.spec.layers[index]
        if layer.kind == "avg_pool":
            return avg_pool2d(x, layer.size)
        return reshape(x, (x.shape[0], -1))

    def _batched(self, inputs: np.ndarray) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=np.float64)
        single = 4 if self.mode == EVENT else 3
        if inputs.ndim == single:
            inputs = inputs[None]
        if inputs.ndim != single + 1 or tuple(inputs.shape[-3:]) != tuple(self.spec.input_shape):
            raise DimensionError(
                f"layer 0: input {inputs.shape} does not match spec input {self.spec.input_shape} in {self.mode} mode"
            )
        return inputs

    def encode_input(self, inputs: np.ndarray, t: int) -> Tensor:
        """
        Input current of the first spiking layer at timestep ``t`` (0-based).

        Event mode reads bin ``t`` of a (batch, T, c, h, w) array; frame mode
        reads the (batch, c, h, w) frame and returns the same current for every t.
        """
        inputs = self._batched(inputs)
        if self.mode == EVENT:
            if not 0 <= t < inputs.shape[1]:
                raise RangeError(f"encode_input: no event bin {t} in input with {inputs.shape[1]} bins")
            x = Tensor._wrap(inputs[:, t])
        else:
            x = Tensor._wrap(inputs)
        first = self.spec.spiking_indices()[0]
        for index in range(first):
            x = self._apply_passive(index, x)
        return self._affine(first, x)

    def stream(self, inputs: np.ndarray, T: int, training: bool = False, dropout: float = 0.0,
               rng: Optional[np.random.Generator] = None, smooth: bool = False) -> Iterator[StepOutput]:
        """Yield the network output one timestep at a time, starting from a zeroed state."""
        if T < 1:
            raise RangeError(f"T must be at least 1, got {T}")
        inputs = self._batched(inputs)
        if self.mode == EVENT and inputs.shape[1] < T:
            raise RangeError(f"input holds {inputs.shape[1]} bins, {T} timesteps requested")
        batch = inputs.shape[0]
        states = self.reset_state(batch)
        spiking = self.spec.spiking_indices()
        first = spiking[0]
        masks = {}
        if training and dropout > 0.0:
            rng = rng if rng is not None else np.random.default_rng()
            for index in spiking:
                if self.spec.layers[index].kind == "dense":
                    keep = rng.random((batch,) + self._shapes[index]) >= dropout
                    masks[index] = keep / (1.0 - dropout)
        frame_current = self.encode_input(inputs, 0) if self.mode == FRAME else None

        for t in range(T):
            z = frame_current if frame_current is not None else self.encode_input(inputs, t)
            new_states = []
            x = None
            for index, layer in enumerate(self.spec.layers):
                if index < first:
                    continue
                if layer.kind in SPIKING_KINDS:
                    if index != first:
                        z = self._affine(index, x)
                    lif = layer.lif
                    state = lif_step(states[len(new_states)], z, lif, smooth=smooth)
                    new_states.append(state)
                    x = state.spikes
                    if index in masks:
                        x = mul(x, masks[index])
                elif layer.kind == "head":
                    logits = self._affine(index, x)
                else:
                    x = self._apply_passive(index, x)
            states = new_states
            yield StepOutput(
                t=t,
                logits=logits,
                states=new_states,
                input_bins=inputs[:, t] if self.mode == EVENT else None,
            )

    def forward(self, inputs: np.ndarray, T: int, log_stf: bool = False, **kwargs) -> ForwardRecord:
        return network_forward(self, inputs, T, log_stf=log_stf, **kwargs)


def reset_state(spec: NetworkSpec, batch_size: int = 1) -> List[LIFState]:
    """Fresh zeroed LIF states for every spiking layer."""
    shapes = spec.layer_shapes()
    return [LIFState.zeros((batch_size,) + shapes[i]) for i in spec.spiking_indices()]


def network_forward(network: SpikingNetwork, inputs: np.ndarray, T: int, log_stf: bool = False,
                    training: bool = False, dropout: float = 0.0, rng: Optional[np.random.Generator] = None,
                    smooth: bool = False, keep_spikes: bool = True) -> ForwardRecord:
    """
    Unroll the network over ``T`` timesteps.

    Args:
        network: Network with parameters
        inputs: Event bins (batch, T, c, h, w) or frames (batch, c, h, w); the
            batch axis may be omitted for a single sample
        T: Number of timesteps
        log_stf: Keep the per-layer LIF states needed for the spatial-temporal factor
        training: Enables dropout
        dropout: Drop rate after dense spiking layers
        rng: Generator for dropout masks
        smooth: Use the clamped-linear firing function instead of the step
        keep_spikes: Keep per-neuron spike maps (needed for synaptic operation counts)

    Returns:
        ForwardRecord with T outputs
    """
    outputs: List[Tensor] = []
    counts = []
    spikes: List[List[np.ndarray]] = []
    bins: List[np.ndarray] = []
    states: Optional[List[List[LIFState]]] = [] if log_stf else None
    for step in network.stream(inputs, T, training=training, dropout=dropout, rng=rng, smooth=smooth):
        outputs.append(step.logits)
        batch = step.logits.shape[0]
        counts.append([s.spikes.data.reshape(batch, -1).sum(axis=1) for s in step.states])
        if keep_spikes:
            spikes.append([s.spikes.data.astype(np.float32) for s in step.states])
            if step.input_bins is not None:
                bins.append(step.input_bins)
        if states is not None:
            states.append(step.states)
    return ForwardRecord(
        outputs=outputs,
        spike_counts=np.asarray(counts) if smooth else np.rint(np.asarray(counts)).astype(np.int64),
        spikes=spikes,
        inputs=bins,
        states=states,
        mode=network.mode,
    )
