"""Image/label ingestion, patching, augmentation and synthetic data."""

from .augment import AugmentSpec, augment, flip_sample, rotate_sample
from .io import load_dataset, read_label, read_rgb, write_dataset, write_label, write_rgb
from .patches import Patch, extract_patches
from .synth import synth_glands, synth_image
from .types import Dataset, Sample, split_indices, to_input

__all__ = [
    "AugmentSpec",
    "augment",
    "flip_sample",
    "rotate_sample",
    "load_dataset",
    "read_label",
    "read_rgb",
    "write_dataset",
    "write_label",
    "write_rgb",
    "Patch",
    "extract_patches",
    "synth_glands",
    "synth_image",
    "Dataset",
    "Sample",
    "split_indices",
    "to_input",
]
