"""
Small networks and datasets shared by the tests.
"""

from pathlib import Path

import numpy as np
import yaml

from ..data.manifest import SpikeDataset
from ..network import (AvgPoolLayer, ConvLayer, DenseLayer, EncoderConvLayer, FlattenLayer, NetworkSpec,
                       OutputHead, SpikingNetwork)
from ..neuron import LIFParams


def tiny_spec(input_shape=(1, 6, 6), classes: int = 3, lif: LIFParams = None) -> NetworkSpec:
    """Encoder conv, pooling and a dense layer; about two hundred parameters."""
    lif = lif or LIFParams(tau=0.5, v_thr=0.5, surrogate_width=1.0)
    return NetworkSpec(
        input_shape=input_shape,
        layers=[
            EncoderConvLayer(filters=4, kernel=3, stride=1, padding=0, lif=lif),
            AvgPoolLayer(size=2),
            FlattenLayer(),
            DenseLayer(units=8, lif=lif),
            OutputHead(units=classes),
        ],
    )


def random_conv_spec(rng: np.random.Generator) -> NetworkSpec:
    """Randomly sized conv/conv/pool/dense network for structural checks."""
    c = int(rng.integers(1, 3))
    size = int(rng.integers(5, 9))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    kernel = int(rng.integers(1, 3))
    return NetworkSpec(
        input_shape=(c, size, size),
        layers=[
            EncoderConvLayer(filters=int(rng.integers(1, 4)), kernel=3, stride=stride, padding=padding),
            ConvLayer(filters=int(rng.integers(1, 4)), kernel=kernel, stride=1, padding=kernel - 1),
            AvgPoolLayer(size=2),
            FlattenLayer(),
            DenseLayer(units=int(rng.integers(2, 6))),
            OutputHead(units=int(rng.integers(2, 4))),
        ],
    )


def random_events(rng: np.random.Generator, spec: NetworkSpec, batch: int, T: int, density: float = 0.3) -> np.ndarray:
    shape = (batch, T) + tuple(spec.input_shape)
    return (rng.random(shape) < density).astype(np.float64) * rng.integers(1, 3, size=shape)


def toy_dataset(rng: np.random.Generator, spec: NetworkSpec, n: int, T: int, mode: str = "event") -> SpikeDataset:
    if mode == "event":
        inputs = random_events(rng, spec, n, T)
    else:
        inputs = rng.random((n,) + tuple(spec.input_shape))
    labels = rng.integers(0, spec.num_classes, size=n)
    return SpikeDataset(inputs, labels, mode)


def scaled_network(spec: NetworkSpec, seed: int, scale: float = 3.0, mode: str = "event") -> SpikingNetwork:
    """Network with weights scaled up so that layers fire."""
    network = SpikingNetwork(spec, mode=mode, seed=seed)
    for name, p in network.params.items():
        if name.endswith(".weight"):
            p.data *= scale
    return network


def write_yaml(path: Path, data: dict) -> Path:
    with open(path, "w") as f:
        yaml.safe_dump(data, f)
    return path
