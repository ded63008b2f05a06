"""Containers for paired images and instance labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ..errors import ConfigError


@dataclass
class Sample:
    """One image with its instance label map (0 = background, k >= 1 = gland k).

    ``image`` is (H, W, 3) uint8; ``lumen`` is an optional instance map of the
    lumen regions sharing the ids of their glands.
    """

    name: str
    image: np.ndarray
    labels: np.ndarray
    lumen: Optional[np.ndarray] = None

    @property
    def extent(self) -> tuple:
        return self.image.shape[:2]

    @property
    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids > 0]


@dataclass
class Dataset:
    samples: List[Sample]
    train_idx: List[int] = field(default_factory=list)
    val_idx: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def train(self) -> List[Sample]:
        return [self.samples[i] for i in self.train_idx]

    @property
    def val(self) -> List[Sample]:
        return [self.samples[i] for i in self.val_idx]

    @property
    def has_lumen(self) -> bool:
        return bool(self.samples) and all(s.lumen is not None for s in self.samples)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], val_fraction: float = 0.2, seed: int = 0) -> "Dataset":
        train, val = split_indices(len(samples), val_fraction, seed)
        return cls(list(samples), train, val)


def split_indices(n: int, val_fraction: float = 0.2, seed: int = 0):
    """Deterministic train/validation split; at least one training item is kept."""
    if not 0 <= val_fraction < 1:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n_val = min(int(round(n * val_fraction)), max(n - 1, 0))
    order = np.random.default_rng(seed).permutation(n)
    return sorted(int(i) for i in order[n_val:]), sorted(int(i) for i in order[:n_val])


def to_input(images) -> np.ndarray:
    """uint8 (H, W, 3) image or (N, H, W, 3) stack -> float32 (N, 3, H, W) in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ConfigError(f"expected (H, W, 3) or (N, H, W, 3) images, got {arr.shape}")
    return (arr.astype(np.float32) / np.float32(255.0)).transpose(0, 3, 1, 2).copy()
