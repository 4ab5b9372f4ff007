"""
Preprocessing utilities for turning event streams and frames into network inputs.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from ..exceptions import ConfigError, ContractError
from .events import EventStream, FrameSample

logger = logging.getLogger(__name__)

MAX_SHIFT_FRAC = 0.2
POLARITIES = 2


@dataclass
class BinnedSample:
    """Per-bin event counts of shape (T, polarity, height, width)."""

    bins: np.ndarray
    label: int
    dropped: int = 0

    @property
    def T(self) -> int:
        return self.bins.shape[0]


def bin_events(stream: EventStream, T: int, window: Optional[Tuple[int, int]] = None,
               binarize: bool = False) -> BinnedSample:
    """
    Integrate events into ``T`` equal time bins.

    Args:
        stream: Event stream
        T: Number of bins
        window: Half-open [t0, t1) in microseconds; defaults to the span of the stream
        binarize: Store occupancy (0/1) instead of counts

    Returns:
        BinnedSample whose ``dropped`` counts the events outside the window
    """
    if T < 1:
        raise ContractError(f"bin_events: T must be at least 1, got {T}")
    ev = stream.events
    if window is None:
        window = (int(ev["t"].min()), int(ev["t"].max()) + 1) if len(ev) else (0, 1)
    t0, t1 = int(window[0]), int(window[1])
    if t1 <= t0:
        raise ContractError(f"bin_events: empty window [{t0}, {t1})")

    ts = ev["t"].astype(np.int64)
    inside = (ts >= t0) & (ts < t1)
    dropped = int(len(ev) - inside.sum())
    if dropped:
        logger.warning(f"Dropped {dropped} of {len(ev)} events outside window [{t0}, {t1})")
    # integer arithmetic keeps bin edges exact
    index = np.minimum(((ts[inside] - t0) * T) // (t1 - t0), T - 1)
    bins = np.zeros((T, POLARITIES, stream.height, stream.width))
    np.add.at(bins, (index, ev["p"][inside].astype(np.int64), ev["y"][inside].astype(np.int64),
                     ev["x"][inside].astype(np.int64)), 1.0)
    if binarize:
        bins = (bins > 0).astype(np.float64)
    return BinnedSample(bins=bins, label=stream.label, dropped=dropped)


def shift_pixels(frac: float, extent: int) -> int:
    """``round(frac * extent)`` with halves rounded away from zero."""
    value = frac * extent
    return int(np.sign(value) * np.floor(abs(value) + 0.5))


def shift_array(array: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate the last two axes by (dy rows, dx columns); positive moves content right/down, vacated cells are zero."""
    height, width = array.shape[-2:]
    out = np.zeros_like(array)
    if abs(dx) >= width or abs(dy) >= height:
        return out
    src_y = slice(max(0, -dy), height - max(0, dy))
    dst_y = slice(max(0, dy), height - max(0, -dy))
    src_x = slice(max(0, -dx), width - max(0, dx))
    dst_x = slice(max(0, dx), width - max(0, -dx))
    out[..., dst_y, dst_x] = array[..., src_y, src_x]
    return out


def augment_shift(sample: Union[BinnedSample, FrameSample], dx_frac: Optional[float] = None,
                  dy_frac: Optional[float] = None, rng: Optional[np.random.Generator] = None,
                  max_frac: float = MAX_SHIFT_FRAC) -> Union[BinnedSample, FrameSample]:
    """
    Shift a sample by fractions of its width and height; out-of-bounds content is lost.

    A fraction left as None is drawn uniformly from [-max_frac, max_frac] with ``rng``.
    """
    if dx_frac is None or dy_frac is None:
        if rng is None:
            raise ContractError("augment_shift: a random shift needs rng")
        dx_frac = rng.uniform(-max_frac, max_frac) if dx_frac is None else dx_frac
        dy_frac = rng.uniform(-max_frac, max_frac) if dy_frac is None else dy_frac
    for name, frac in (("dx_frac", dx_frac), ("dy_frac", dy_frac)):
        if abs(frac) > max_frac:
            raise ConfigError(name, f"shift fraction {frac} outside [-{max_frac}, {max_frac}]")
    if isinstance(sample, BinnedSample):
        data = sample.bins
    else:
        data = sample.frame
    height, width = data.shape[-2:]
    shifted = shift_array(data, shift_pixels(dx_frac, width), shift_pixels(dy_frac, height))
    if isinstance(sample, BinnedSample):
        return BinnedSample(bins=shifted, label=sample.label, dropped=sample.dropped)
    return FrameSample(frame=shifted, label=sample.label)


def random_shift_batch(inputs: np.ndarray, rng: np.random.Generator, max_frac: float = MAX_SHIFT_FRAC) -> np.ndarray:
    """Shift every sample of a batch by its own fractions drawn uniformly from [-max_frac, max_frac]."""
    if max_frac <= 0:
        return inputs
    height, width = inputs.shape[-2:]
    fracs = rng.uniform(-max_frac, max_frac, size=(len(inputs), 2))
    return np.stack([
        shift_array(sample, shift_pixels(fx, width), shift_pixels(fy, height))
        for sample, (fx, fy) in zip(inputs, fracs)
    ])


def frame_to_current(sample: FrameSample, T: int) -> np.ndarray:
    """The frame repeated unchanged for each of the ``T`` timesteps, shape (T, c, h, w)."""
    if T < 1:
        raise ContractError(f"frame_to_current: T must be at least 1, got {T}")
    return np.repeat(sample.frame[None], T, axis=0)
