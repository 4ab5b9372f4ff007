"""
Dataset manifests (YAML index of sample files) and in-memory datasets built from them.
"""

import logging
from pathlib import Path
from typing import Iterator, List, Literal, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from ..exceptions import DataError
from .events import load_event_stream, load_frame
from .preprocessing import bin_events

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yaml"
TRAIN = "train"
TEST = "test"


class ManifestEntry(BaseModel):
    path: str
    label: int = Field(ge=0)
    split: Literal["train", "test"]


class DatasetManifest(BaseModel):
    """Index of a dataset directory; ``root`` is where the manifest file lives."""

    mode: Literal["event", "frame"]
    T: int = Field(ge=1)
    classes: int = Field(ge=2)
    input_shape: Tuple[int, int, int]
    window_us: Optional[int] = Field(default=None, gt=0)
    seed: int = 0
    samples: List[ManifestEntry]
    root: Optional[Path] = Field(default=None, exclude=True)

    @model_validator(mode="after")
    def _check_samples(self) -> "DatasetManifest":
        seen = set()
        for entry in self.samples:
            if entry.path in seen:
                raise ValueError(f"sample {entry.path} is listed more than once")
            seen.add(entry.path)
            if entry.label >= self.classes:
                raise ValueError(f"sample {entry.path} has label {entry.label}, dataset has {self.classes} classes")
        if self.mode == "event" and self.window_us is None:
            raise ValueError("event datasets need window_us")
        return self

    def entries(self, split: Optional[str] = None) -> List[ManifestEntry]:
        return [e for e in self.samples if split is None or e.split == split]

    def resolve(self, entry: ManifestEntry) -> Path:
        return (self.root or Path(".")) / entry.path

    def check_files(self) -> None:
        for index, entry in enumerate(self.samples):
            if not self.resolve(entry).is_file():
                raise DataError(f"manifest references missing file {entry.path}", record_index=index)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w") as f:
            yaml.safe_dump(self.model_dump(mode="json"), f, sort_keys=False)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.is_file():
            raise DataError(f"dataset manifest {path} not found")
        with open(path) as f:
            raw = yaml.safe_load(f)
        try:
            manifest = cls.model_validate(raw or {})
        except ValidationError as e:
            raise DataError(f"invalid dataset manifest {path}: {e.errors()[0]['msg']}") from e
        manifest.root = path.parent
        manifest.check_files()
        return manifest


class SpikeDataset:
    """Network-ready inputs and labels of one split."""

    def __init__(self, inputs: np.ndarray, labels: np.ndarray, mode: str = "event"):
        if len(inputs) != len(labels):
            raise DataError(f"{len(inputs)} inputs but {len(labels)} labels")
        self.inputs = inputs
        self.labels = np.asarray(labels, dtype=np.int64)
        self.mode = mode

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[-3:])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Mini-batches in order, or shuffled by ``rng``."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for begin in range(0, len(order), batch_size):
            index = order[begin:begin + batch_size]
            yield self.inputs[index], self.labels[index]

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, split: Optional[str] = None, T: Optional[int] = None,
                      binarize: bool = False) -> "SpikeDataset":
        """
        Load and bin every sample of ``split``.

        Event samples are binned over [0, window_us) into ``T`` bins (the
        manifest's T by default); frame samples are loaded as they are.
        """
        T = T or manifest.T
        entries = manifest.entries(split)
        if not entries:
            raise DataError(f"dataset has no samples in split {split!r}")
        inputs, labels = [], []
        for entry in entries:
            path = manifest.resolve(entry)
            if manifest.mode == "event":
                stream = load_event_stream(path)
                inputs.append(bin_events(stream, T, (0, manifest.window_us), binarize=binarize).bins)
            else:
                inputs.append(load_frame(path).frame)
            labels.append(entry.label)
        logger.info(f"Loaded {len(labels)} {manifest.mode} samples (split={split or 'all'})")
        return cls(np.stack(inputs), np.asarray(labels), manifest.mode)
