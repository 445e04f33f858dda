"""Event streams, the EVS1 format, synthetic classes, meta-splits and
episodes."""

from .datasets import DirectoryDataset, Pipeline, SyntheticDataset, TaskDataset, save_synthetic
from .splits import (
    PARTS,
    Episode,
    MetaSplit,
    make_meta_splits,
    ordered_pairs,
    read_manifest,
    sample_episode,
    write_manifest,
)
from .stream import (
    EVENT_DTYPE,
    HEADER,
    MAGIC,
    EventStream,
    FrameSequence,
    compose_double,
    crop_temporal,
    downsample_spatial,
    load_events,
    make_events,
    rasterize,
    read_events,
    save_events,
    write_events,
)
from .synth import GOLDEN_ANGLE, Trajectory, class_angle, synth_class

__all__ = [name for name in dir() if not name.startswith("_")]
