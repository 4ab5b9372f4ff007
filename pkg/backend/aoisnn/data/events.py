"""
Event streams and analog frames, and their little-endian file containers.

AEDAT-lite (``.aesl``)::

    "AESL" | version u16 | width u16 | height u16 | label u32 | event_count u64
    event_count x (timestamp_us u64, x u16, y u16, polarity u8, pad u8)

Frame (``.afrm``)::

    "AFRM" | version u16 | channels u16 | height u16 | width u16 | label u32
    channels*height*width float32
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from ..exceptions import DataError, FormatError, IntegrityError

logger = logging.getLogger(__name__)

EVENT_MAGIC = b"AESL"
FRAME_MAGIC = b"AFRM"
FORMAT_VERSION = 1

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1")])
EVENT_HEADER = np.dtype([("magic", "S4"), ("version", "<u2"), ("width", "<u2"), ("height", "<u2"),
                         ("label", "<u4"), ("count", "<u8")])
FRAME_HEADER = np.dtype([("magic", "S4"), ("version", "<u2"), ("channels", "<u2"), ("height", "<u2"),
                         ("width", "<u2"), ("label", "<u4")])
FRAME_DTYPE = np.dtype("<f4")


@dataclass
class EventStream:
    """Timestamp-ordered events of one recording; ``events`` uses ``EVENT_DTYPE``."""

    events: np.ndarray
    width: int
    height: int
    label: int

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)

    @classmethod
    def from_arrays(cls, t, x, y, p, width: int, height: int, label: int) -> "EventStream":
        events = np.zeros(len(t), dtype=EVENT_DTYPE)
        events["t"], events["x"], events["y"], events["p"] = t, x, y, p
        return cls(events=events, width=width, height=height, label=label)

    def __len__(self) -> int:
        return len(self.events)

    def validate(self) -> None:
        """Raise DataError naming the first event that breaks ordering or bounds."""
        ev = self.events
        for name, limit in (("x", self.width), ("y", self.height), ("p", 2)):
            bad = np.flatnonzero(ev[name] >= limit)
            if bad.size:
                raise DataError(f"event {name}={ev[name][bad[0]]} outside [0, {limit})", record_index=int(bad[0]))
        unordered = np.flatnonzero(np.diff(ev["t"].astype(np.int64)) < 0)
        if unordered.size:
            raise DataError("event timestamps decrease", record_index=int(unordered[0]) + 1)


@dataclass
class FrameSample:
    """Analog intensities in [0, 1], shape (channels, height, width)."""

    frame: np.ndarray
    label: int

    def __post_init__(self):
        self.frame = np.asarray(self.frame, dtype=np.float64)
        if self.frame.ndim != 3:
            raise DataError(f"frame must be (channels, height, width), got shape {self.frame.shape}")
        if self.frame.size and (self.frame.min() < 0.0 or self.frame.max() > 1.0):
            raise DataError("frame values must lie in [0, 1]")


def _check_header(header, magic: bytes, path: Path) -> None:
    if header["magic"] != magic:
        raise FormatError(f"{path}: bad magic {bytes(header['magic'])!r}, expected {magic!r}")
    if int(header["version"]) != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {int(header['version'])}")


def write_event_stream(stream: EventStream, path: Union[str, Path]) -> Path:
    path = Path(path)
    header = np.zeros((), dtype=EVENT_HEADER)
    header["magic"] = EVENT_MAGIC
    header["version"] = FORMAT_VERSION
    header["width"], header["height"] = stream.width, stream.height
    header["label"], header["count"] = stream.label, len(stream)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(stream.events).tobytes())
    return path


def load_event_stream(path: Union[str, Path], strict_order: bool = True) -> EventStream:
    """
    Read and validate an AEDAT-lite file.

    Args:
        path: File to read
        strict_order: Reject decreasing timestamps; when False they are re-sorted (stable)

    Returns:
        EventStream with timestamp-sorted events
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < EVENT_HEADER.itemsize:
        raise FormatError(f"{path}: file too short for an AEDAT-lite header")
    header = np.frombuffer(raw, dtype=EVENT_HEADER, count=1)[0]
    _check_header(header, EVENT_MAGIC, path)
    count = int(header["count"])
    body = raw[EVENT_HEADER.itemsize:]
    if len(body) != count * EVENT_DTYPE.itemsize:
        raise IntegrityError(f"{path}: header announces {count} events, body holds {len(body)} bytes")
    events = np.frombuffer(body, dtype=EVENT_DTYPE, count=count).copy()
    stream = EventStream(events=events, width=int(header["width"]), height=int(header["height"]),
                         label=int(header["label"]))
    if not strict_order and np.any(np.diff(events["t"].astype(np.int64)) < 0):
        logger.warning(f"{path}: timestamps out of order, re-sorting")
        stream.events = events[np.argsort(events["t"], kind="stable")]
    stream.validate()
    return stream


def write_frame(sample: FrameSample, path: Union[str, Path]) -> Path:
    path = Path(path)
    channels, height, width = sample.frame.shape
    header = np.zeros((), dtype=FRAME_HEADER)
    header["magic"] = FRAME_MAGIC
    header["version"] = FORMAT_VERSION
    header["channels"], header["height"], header["width"] = channels, height, width
    header["label"] = sample.label
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(sample.frame.astype(FRAME_DTYPE).tobytes())
    return path


def load_frame(path: Union[str, Path]) -> FrameSample:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < FRAME_HEADER.itemsize:
        raise FormatError(f"{path}: file too short for a frame header")
    header = np.frombuffer(raw, dtype=FRAME_HEADER, count=1)[0]
    _check_header(header, FRAME_MAGIC, path)
    shape = (int(header["channels"]), int(header["height"]), int(header["width"]))
    body = raw[FRAME_HEADER.itemsize:]
    if len(body) != int(np.prod(shape)) * FRAME_DTYPE.itemsize:
        raise IntegrityError(f"{path}: frame body of {len(body)} bytes does not match shape {shape}")
    frame = np.frombuffer(body, dtype=FRAME_DTYPE).reshape(shape)
    return FrameSample(frame=frame.astype(np.float64), label=int(header["label"]))
