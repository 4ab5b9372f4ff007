"""
Event and frame samples: file formats, binning, augmentation and synthetic datasets.
"""

from .events import EventStream, FrameSample, load_event_stream, load_frame, write_event_stream, write_frame
from .manifest import DatasetManifest, SpikeDataset
from .preprocessing import BinnedSample, augment_shift, bin_events, frame_to_current

__all__ = [
    "EventStream",
    "FrameSample",
    "BinnedSample",
    "DatasetManifest",
    "SpikeDataset",
    "load_event_stream",
    "write_event_stream",
    "load_frame",
    "write_frame",
    "bin_events",
    "augment_shift",
    "frame_to_current",
]
