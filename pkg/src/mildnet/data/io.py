"""
Dataset directory format.

::

    DIR/
      images/NNN.png     8-bit RGB
      labels/NNN.png     16-bit greyscale, pixel value = instance id (0 = background)
      lumen/NNN.png      optional, same encoding as labels
      manifest.txt       one "name<TAB>split" line per item, split in {train, val}

Without a manifest every item is listed and an 80/20 split is drawn from
the seed passed to :func:`load_dataset`.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from PIL import Image

from ..errors import DataError
from .types import Dataset, Sample, split_indices

MANIFEST = "manifest.txt"
SPLITS = ("train", "val")


def write_rgb(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")


def write_label(path: Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 65535):
        raise DataError(f"{path}: label ids must fit in 16 bits")
    Image.fromarray(np.ascontiguousarray(labels, dtype=np.uint16)).save(path, format="PNG")


def read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_label(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I", "L", "P"):
            raise DataError(f"{path}: label image has unsupported mode {im.mode}")
        return np.asarray(im, dtype=np.int64).astype(np.int32)


def write_dataset(
    directory: Union[str, Path],
    samples: Sequence[Sample],
    val_names: Sequence[str] = (),
) -> Path:
    directory = Path(directory)
    for sub in ("images", "labels"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    with_lumen = any(s.lumen is not None for s in samples)
    if with_lumen:
        (directory / "lumen").mkdir(exist_ok=True)
    val = set(val_names)
    lines = []
    for s in samples:
        write_rgb(directory / "images" / f"{s.name}.png", s.image)
        write_label(directory / "labels" / f"{s.name}.png", s.labels)
        if with_lumen and s.lumen is not None:
            write_label(directory / "lumen" / f"{s.name}.png", s.lumen)
        lines.append(f"{s.name}\t{'val' if s.name in val else 'train'}\n")
    (directory / MANIFEST).write_text("".join(lines))
    return directory


def _read_manifest(path: Path, problems: List[str]) -> Optional[Dict[str, str]]:
    if not path.exists():
        return None
    out: Dict[str, str] = {}
    for no, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in SPLITS:
            problems.append(f"{MANIFEST}:{no}: expected 'name<TAB>train|val', got {line!r}")
            continue
        out[parts[0]] = parts[1]
    return out


def load_dataset(directory: Union[str, Path], seed: int = 0, val_fraction: float = 0.2) -> Dataset:
    """Read and validate a dataset directory.

    All problems (missing pairs, unreadable files, extent mismatches, manifest
    entries without files) are collected and raised together as one
    :class:`DataError`.
    """
    directory = Path(directory)
    problems: List[str] = []
    img_dir, lab_dir, lum_dir = directory / "images", directory / "labels", directory / "lumen"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise DataError(f"{directory}: expected images/ and labels/ subdirectories")
    img_names = {p.stem for p in img_dir.glob("*.png")}
    lab_names = {p.stem for p in lab_dir.glob("*.png")}
    has_lumen = lum_dir.is_dir()
    for n in sorted(img_names - lab_names):
        problems.append(f"{n}: image without label map")
    for n in sorted(lab_names - img_names):
        problems.append(f"{n}: label map without image")
    names = sorted(img_names & lab_names)
    manifest = _read_manifest(directory / MANIFEST, problems)
    if manifest is not None:
        for n in sorted(set(manifest) - set(names)):
            problems.append(f"{n}: listed in {MANIFEST} but files are missing")
        for n in sorted(set(names) - set(manifest)):
            problems.append(f"{n}: present but not listed in {MANIFEST}")

    samples: List[Sample] = []
    for n in names:
        try:
            image = read_rgb(img_dir / f"{n}.png")
            labels = read_label(lab_dir / f"{n}.png")
            lumen = None
            if has_lumen:
                lp = lum_dir / f"{n}.png"
                if not lp.exists():
                    problems.append(f"{n}: lumen/ exists but has no {n}.png")
                    continue
                lumen = read_label(lp)
        except (OSError, ValueError, SyntaxError, DataError) as exc:
            problems.append(f"{n}: unreadable ({exc})")
            continue
        if image.shape[:2] != labels.shape:
            problems.append(f"{n}: image {image.shape[:2]} and labels {labels.shape} differ in extent")
            continue
        if lumen is not None and lumen.shape != labels.shape:
            problems.append(f"{n}: lumen {lumen.shape} and labels {labels.shape} differ in extent")
            continue
        samples.append(Sample(n, image, labels, lumen))

    if problems:
        raise DataError(f"{directory}: {len(problems)} problem(s) in dataset", problems)
    if not samples:
        raise DataError(f"{directory}: dataset is empty")
    if manifest is not None:
        train = [i for i, s in enumerate(samples) if manifest[s.name] == "train"]
        val = [i for i, s in enumerate(samples) if manifest[s.name] == "val"]
        return Dataset(samples, train, val)
    train, val = split_indices(len(samples), val_fraction, seed)
    return Dataset(samples, train, val)
