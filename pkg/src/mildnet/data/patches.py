"""Overlapping patch grids over large images."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np

from ..errors import ConfigError
from .types import Sample


def grid_positions(extent: int, patch: int, stride: int) -> List[int]:
    """Top-left offsets along one axis; the last patch is flush with the edge."""
    if extent <= patch:
        return [0]
    pos = list(range(0, extent - patch + 1, stride))
    if pos[-1] != extent - patch:
        pos.append(extent - patch)
    return pos


@dataclass
class Patch:
    sample: Sample
    origin: tuple  # (row, col) of the patch in the (padded) source


def extract_patches(sample: Sample, patch: int = 500, stride: Optional[int] = None) -> Iterator[Patch]:
    """Yield ``patch`` x ``patch`` crops on a regular grid (stride patch/2 by default).

    Images smaller than ``patch`` are mirror-padded first. Instance ids are
    kept as they are in the source.
    """
    if patch < 1:
        raise ConfigError(f"patch must be positive, got {patch}")
    stride = patch // 2 if stride is None else stride
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    image, labels, lumen = sample.image, sample.labels, sample.lumen
    h, w = labels.shape
    ph, pw = max(patch - h, 0), max(patch - w, 0)
    if ph or pw:
        pad = ((0, ph), (0, pw))
        image = np.pad(image, pad + ((0, 0),), mode="symmetric")
        labels = np.pad(labels, pad, mode="symmetric")
        lumen = None if lumen is None else np.pad(lumen, pad, mode="symmetric")
        h, w = labels.shape
    for y in grid_positions(h, patch, stride):
        for x in grid_positions(w, patch, stride):
            sl = (slice(y, y + patch), slice(x, x + patch))
            yield Patch(
                Sample(
                    f"{sample.name}@{y},{x}",
                    image[sl].copy(),
                    labels[sl].copy(),
                    None if lumen is None else lumen[sl].copy(),
                ),
                (y, x),
            )
