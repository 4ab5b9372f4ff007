"""
Synthetic desk-scale datasets: oriented bars rendered as Poisson event streams or analog frames.

Class ``c`` of ``k`` is a bar through the sensor centre at angle ``pi * c / k``,
jittered per sample in offset and angle. Event polarity marks the side of
the bar's centre line.
"""

import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

from ..exceptions import ConfigError
from .events import EventStream, FrameSample, write_event_stream, write_frame
from .manifest import MANIFEST_NAME, TEST, TRAIN, DatasetManifest, ManifestEntry

logger = logging.getLogger(__name__)

BAR_HALF_WIDTH = 1.5
OFFSET_JITTER = 1.5
FRAME_NOISE = 0.1


def bar_mask(label: int, classes: int, height: int, width: int, offset: float = 0.0,
             angle_jitter: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pixels covered by the class bar and their side of its centre line.

    Returns:
        (boolean mask (height, width), signed distance to the centre line)
    """
    angle = np.pi * label / classes + angle_jitter
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    # distance from the line through the centre with direction (cos, sin)
    distance = -(x - cx) * np.sin(angle) + (y - cy) * np.cos(angle) - offset
    return np.abs(distance) <= BAR_HALF_WIDTH, distance


def _jitter(rng: np.random.Generator, classes: int) -> Tuple[float, float]:
    offset = rng.uniform(-OFFSET_JITTER, OFFSET_JITTER)
    angle = rng.uniform(-1.0, 1.0) * np.pi / (6 * classes)
    return offset, angle


def generate_event_sample(label: int, classes: int, height: int, width: int, window_us: int,
                          rate: float, noise_rate: float, rng: np.random.Generator) -> Tuple[EventStream, int]:
    """
    One Poisson event stream of class ``label``.

    Every bar pixel emits Poisson(rate * window_us) events and every pixel
    Poisson(noise_rate * window_us) noise events, at uniform timestamps.

    Returns:
        (stream, number of bar pixels)
    """
    offset, angle = _jitter(rng, classes)
    mask, distance = bar_mask(label, classes, height, width, offset, angle)
    counts = rng.poisson(rate * window_us, size=(height, width)) * mask
    if noise_rate > 0:
        noise = rng.poisson(noise_rate * window_us, size=(height, width))
    else:
        noise = np.zeros((height, width), dtype=np.int64)
    ys, xs = np.nonzero(counts)
    bar_y = np.repeat(ys, counts[ys, xs])
    bar_x = np.repeat(xs, counts[ys, xs])
    bar_p = (distance[bar_y, bar_x] >= 0).astype(np.uint8)
    ys, xs = np.nonzero(noise)
    noise_y = np.repeat(ys, noise[ys, xs])
    noise_x = np.repeat(xs, noise[ys, xs])
    noise_p = rng.integers(0, 2, size=len(noise_y)).astype(np.uint8)

    y = np.concatenate([bar_y, noise_y])
    x = np.concatenate([bar_x, noise_x])
    p = np.concatenate([bar_p, noise_p])
    t = rng.integers(0, window_us, size=len(y))
    order = np.argsort(t, kind="stable")
    stream = EventStream.from_arrays(t[order], x[order], y[order], p[order], width=width, height=height, label=label)
    return stream, int(mask.sum())


def generate_frame_sample(label: int, classes: int, height: int, width: int,
                          rng: np.random.Generator, channels: int = 1) -> FrameSample:
    """Bar intensity 0.9 over a uniform [0, FRAME_NOISE) background, float32-exact."""
    offset, angle = _jitter(rng, classes)
    mask, _ = bar_mask(label, classes, height, width, offset, angle)
    frame = np.clip(np.where(mask, 0.9, 0.0) + rng.uniform(0.0, FRAME_NOISE, size=(channels, height, width)), 0.0, 1.0)
    return FrameSample(frame=frame.astype(np.float32).astype(np.float64), label=label)


def _prepare_out_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise ConfigError("out", f"output directory {out_dir} is not empty; use --force to overwrite")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)


def _split_labels(classes: int, samples_per_class: int, test_fraction: float, seed: int) -> Tuple[np.ndarray, List[str]]:
    labels = np.repeat(np.arange(classes), samples_per_class)
    splits = [TRAIN] * len(labels)
    if test_fraction > 0:
        _, test_index = train_test_split(np.arange(len(labels)), test_size=test_fraction,
                                         stratify=labels, random_state=seed)
        for i in test_index:
            splits[i] = TEST
    return labels, splits


def _write_event_job(args) -> Tuple[str, int]:
    index, label, split, classes, height, width, window_us, rate, noise_rate, seed_seq, out_dir = args
    stream, _ = generate_event_sample(label, classes, height, width, window_us, rate, noise_rate,
                                      np.random.default_rng(seed_seq))
    relative = f"{split}/{index:05d}_c{label}.aesl"
    write_event_stream(stream, Path(out_dir) / relative)
    return relative, len(stream)


def _write_frame_job(args) -> Tuple[str, int]:
    index, label, split, classes, height, width, channels, seed_seq, out_dir = args
    sample = generate_frame_sample(label, classes, height, width, np.random.default_rng(seed_seq), channels)
    relative = f"{split}/{index:05d}_c{label}.afrm"
    write_frame(sample, Path(out_dir) / relative)
    return relative, 0


def _run_jobs(job, jobs: list, workers: int) -> List[Tuple[str, int]]:
    if workers <= 1:
        return [job(args) for args in jobs]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(job, jobs))


def synth_event_dataset(out_dir: Union[str, Path], classes: int = 3, samples_per_class: int = 100,
                        height: int = 16, width: int = 16, T: int = 10, window_us: int = 100_000,
                        rate: float = 2e-4, noise_rate: float = 5e-6, seed: int = 0,
                        test_fraction: float = 0.25, workers: int = 1, force: bool = False) -> DatasetManifest:
    """
    Write an oriented-bar event dataset and its manifest.

    Args:
        out_dir: Destination directory (must be empty unless ``force``)
        classes: Number of classes, at least 2
        samples_per_class: Streams per class
        height: Sensor rows
        width: Sensor columns
        T: Default number of bins recorded in the manifest
        window_us: Recording length in microseconds
        rate: Bar events per pixel per microsecond
        noise_rate: Background events per pixel per microsecond
        seed: Master seed; each sample draws from its own spawned stream
        test_fraction: Stratified share of samples in the test split
        workers: Worker processes
        force: Replace a non-empty ``out_dir``

    Returns:
        The written DatasetManifest
    """
    if classes < 2:
        raise ConfigError("classes", f"at least 2 classes are required, got {classes}")
    if rate < 0 or noise_rate < 0:
        raise ConfigError("rate", "event rates must be non-negative")
    out_dir = Path(out_dir)
    _prepare_out_dir(out_dir, force)
    for split in (TRAIN, TEST):
        (out_dir / split).mkdir()
    labels, splits = _split_labels(classes, samples_per_class, test_fraction, seed)
    seeds = np.random.SeedSequence(seed).spawn(len(labels))
    jobs = [
        (i, int(label), split, classes, height, width, window_us, rate, noise_rate, seeds[i], str(out_dir))
        for i, (label, split) in enumerate(zip(labels, splits))
    ]
    written = _run_jobs(_write_event_job, jobs, workers)
    manifest = DatasetManifest(
        mode="event", T=T, classes=classes, input_shape=(2, height, width), window_us=window_us, seed=seed,
        samples=[ManifestEntry(path=path, label=int(label), split=split)
                 for (path, _), label, split in zip(written, labels, splits)],
    )
    manifest.save(out_dir / MANIFEST_NAME)
    manifest.root = out_dir
    total = sum(count for _, count in written)
    logger.info(f"Wrote {len(written)} event streams ({total} events, {total / max(len(written), 1):.1f} per stream) to {out_dir}")
    return manifest


def synth_frame_dataset(out_dir: Union[str, Path], classes: int = 3, samples_per_class: int = 100,
                        height: int = 16, width: int = 16, T: int = 10, channels: int = 1, seed: int = 0,
                        test_fraction: float = 0.25, workers: int = 1, force: bool = False) -> DatasetManifest:
    """Write an oriented-bar frame dataset and its manifest."""
    if classes < 2:
        raise ConfigError("classes", f"at least 2 classes are required, got {classes}")
    out_dir = Path(out_dir)
    _prepare_out_dir(out_dir, force)
    for split in (TRAIN, TEST):
        (out_dir / split).mkdir()
    labels, splits = _split_labels(classes, samples_per_class, test_fraction, seed)
    seeds = np.random.SeedSequence(seed).spawn(len(labels))
    jobs = [
        (i, int(label), split, classes, height, width, channels, seeds[i], str(out_dir))
        for i, (label, split) in enumerate(zip(labels, splits))
    ]
    written = _run_jobs(_write_frame_job, jobs, workers)
    manifest = DatasetManifest(
        mode="frame", T=T, classes=classes, input_shape=(channels, height, width), seed=seed,
        samples=[ManifestEntry(path=path, label=int(label), split=split)
                 for (path, _), label, split in zip(written, labels, splits)],
    )
    manifest.save(out_dir / MANIFEST_NAME)
    manifest.root = out_dir
    logger.info(f"Wrote {len(written)} frames to {out_dir}")
    return manifest
