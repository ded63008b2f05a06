"""
Training-time augmentation.

Transforms run in a fixed order: elastic distortion, flip, rotation,
Gaussian blur, median blur, colour distortion, then a random crop. Geometric
steps move the image (linear interpolation, reflected borders) and the label
maps (nearest neighbour, same borders) with one shared coordinate map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from ..errors import ConfigError
from .types import Sample


@dataclass
class AugmentSpec:
    elastic: bool = True
    elastic_grid: int = 8  # control points per side
    elastic_alpha: float = 10.0  # max displacement, px
    flip: bool = True
    rotation: bool = True
    max_angle: float = 180.0  # degrees, symmetric range
    gaussian_blur: bool = True
    blur_sigma: Tuple[float, float] = (0.0, 1.5)
    median_blur: bool = True
    median_sizes: Tuple[int, ...] = (3, 5)
    colour: bool = True
    gain_range: Tuple[float, float] = (0.9, 1.1)
    offset_range: Tuple[float, float] = (-10.0, 10.0)
    prob: float = 0.5  # chance of applying each enabled photometric/elastic step
    crop_size: Optional[int] = 464

    def __post_init__(self):
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)
        self.median_sizes = tuple(int(v) for v in self.median_sizes)
        self.gain_range = tuple(float(v) for v in self.gain_range)
        self.offset_range = tuple(float(v) for v in self.offset_range)
        self.validate()

    def validate(self) -> None:
        if self.elastic_grid < 2 or self.elastic_alpha < 0:
            raise ConfigError("elastic_grid must be >= 2 and elastic_alpha >= 0")
        if not 0 <= self.prob <= 1:
            raise ConfigError(f"prob must be in [0, 1], got {self.prob}")
        if any(k < 1 or k % 2 == 0 for k in self.median_sizes) or not self.median_sizes:
            raise ConfigError(f"median_sizes must be odd positive ints, got {self.median_sizes}")
        for name in ("blur_sigma", "gain_range", "offset_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be (low, high), got {(lo, hi)}")
        if self.blur_sigma[0] < 0 or self.gain_range[0] <= 0:
            raise ConfigError("blur sigma must be >= 0 and gains > 0")
        if self.crop_size is not None and self.crop_size < 1:
            raise ConfigError(f"crop_size must be positive, got {self.crop_size}")

    @classmethod
    def crop_only(cls, crop_size: Optional[int] = 464) -> "AugmentSpec":
        return cls(
            elastic=False, flip=False, rotation=False, gaussian_blur=False,
            median_blur=False, colour=False, crop_size=crop_size,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown AugmentSpec field(s): {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------
# geometry
# ----------------------------------------------------------------------
def _warp(image, maps, coords):
    """Resample the image (order 1) and each label map (order 0) at ``coords``."""
    chans = [ndimage.map_coordinates(image[..., c], coords, order=1, mode="reflect") for c in range(image.shape[2])]
    out_img = np.stack(chans, axis=-1)
    out_maps = [None if m is None else ndimage.map_coordinates(m, coords, order=0, mode="reflect") for m in maps]
    return out_img, out_maps


def elastic_field(shape, grid: int, alpha: float, rng) -> np.ndarray:
    """Smooth displacement field (2, H, W) from a coarse random control grid.

    The amplitude is capped at a quarter of the control spacing, which keeps
    the mapping one-to-one (displacement gradient well below 1).
    """
    h, w = shape
    spacing = min(h, w) / (grid - 1)
    amp = min(alpha, 0.25 * spacing)
    coarse = rng.uniform(-amp, amp, size=(2, grid, grid))
    return np.stack([ndimage.zoom(c, (h / grid, w / grid), order=3, mode="nearest")[:h, :w] for c in coarse])


def rotation_coords(shape, angle_deg: float) -> np.ndarray:
    """Source coordinates for a rotation by ``angle_deg`` about the image centre.

    Positive angles rotate content counter-clockwise as displayed (row axis
    pointing down).
    """
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    dy, dx = yy - cy, xx - cx
    # inverse map: output (dy, dx) samples input R(-t) applied in display coords
    sy = cy + c * dy - s * dx
    sx = cx + s * dy + c * dx
    return np.stack([sy, sx])


def rotate_point(y: float, x: float, shape, angle_deg: float) -> Tuple[float, float]:
    """Where input point (y, x) lands under :func:`rotation_coords`."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    dy, dx = y - cy, x - cx
    return cy + c * dy + s * dx, cx - s * dy + c * dx


def _relabel_split(labels: np.ndarray) -> np.ndarray:
    """Give each separate piece of every id its own id (reflections can
    duplicate an instance near the border).

    Nearest-neighbour warping can leave slivers joined to their instance only
    diagonally; within each 8-connected piece only the largest 4-connected
    part is kept.
    """
    out = np.zeros_like(labels)
    nxt = 1
    four = ndimage.generate_binary_structure(2, 1)
    eight = ndimage.generate_binary_structure(2, 2)
    for k in np.unique(labels):
        if k == 0:
            continue
        coarse, n = ndimage.label(labels == k, structure=eight)
        for piece in range(1, n + 1):
            fine, m = ndimage.label(coarse == piece, structure=four)
            if m > 1:
                sizes = np.bincount(fine.ravel())[1:]
                keep = fine == 1 + int(np.argmax(sizes))
            else:
                keep = fine == 1
            out[keep] = nxt
            nxt += 1
    return out


def _relabel_like(lumen: np.ndarray, glands: np.ndarray) -> np.ndarray:
    # lumen takes the id of the gland containing it
    return np.where(lumen > 0, glands, 0).astype(lumen.dtype)


def random_crop(image, maps, size: int, rng):
    h, w = image.shape[:2]
    ph, pw = max(size - h, 0), max(size - w, 0)
    if ph or pw:
        pad = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
        image = np.pad(image, pad + ((0, 0),), mode="reflect")
        maps = [None if m is None else np.pad(m, pad, mode="reflect") for m in maps]
        h, w = image.shape[:2]
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    sl = (slice(y0, y0 + size), slice(x0, x0 + size))
    return image[sl], [None if m is None else m[sl] for m in maps]


def _finish(name, img, labels, lumen, relabel: bool) -> Sample:
    labels = np.ascontiguousarray(labels)
    if relabel:
        labels = _relabel_split(labels)
        if lumen is not None:
            lumen = _relabel_like(lumen, labels)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(name, np.ascontiguousarray(image), labels, None if lumen is None else np.ascontiguousarray(lumen))


def flip_sample(sample: Sample, axis: int) -> Sample:
    """Mirror image and labels along ``axis`` (0: rows, 1: columns)."""
    maps = [None if m is None else np.flip(m, axis) for m in (sample.labels, sample.lumen)]
    return _finish(sample.name, np.flip(sample.image, axis).astype(np.float64), maps[0], maps[1], False)


def rotate_sample(sample: Sample, angle_deg: float) -> Sample:
    """Rotate about the image centre (see :func:`rotation_coords`)."""
    img, (labels, lumen) = _warp(sample.image.astype(np.float64), [sample.labels, sample.lumen],
                                 rotation_coords(sample.labels.shape, angle_deg))
    return _finish(sample.name, img, labels, lumen, True)


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------
def augment(sample: Sample, spec: AugmentSpec, seed) -> Sample:
    """Randomly transformed copy of ``sample``; deterministic given ``seed``."""
    if sample.image.shape[:2] != sample.labels.shape:
        raise ConfigError(f"{sample.name}: image {sample.image.shape[:2]} and labels {sample.labels.shape} differ")
    rng = np.random.default_rng(seed)
    img = sample.image.astype(np.float64)
    maps = [sample.labels, sample.lumen]
    shape = img.shape[:2]
    geometric = False

    if spec.elastic and rng.random() < spec.prob:
        disp = elastic_field(shape, spec.elastic_grid, spec.elastic_alpha, rng)
        grid = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
        img, maps = _warp(img, maps, grid + disp)
        geometric = True
    if spec.flip:
        axis = int(rng.integers(0, 3))  # 0: none, 1: vertical, 2: horizontal
        if axis:
            img = np.flip(img, axis - 1)
            maps = [None if m is None else np.flip(m, axis - 1) for m in maps]
    if spec.rotation:
        angle = float(rng.uniform(-spec.max_angle, spec.max_angle))
        img, maps = _warp(img, maps, rotation_coords(shape, angle))
        geometric = True
    if spec.gaussian_blur and rng.random() < spec.prob:
        sigma = float(rng.uniform(*spec.blur_sigma))
        img = ndimage.gaussian_filter(img, (sigma, sigma, 0))
    if spec.median_blur and rng.random() < spec.prob:
        k = int(rng.choice(spec.median_sizes))
        img = ndimage.median_filter(img, size=(k, k, 1))
    if spec.colour and rng.random() < spec.prob:
        gain = rng.uniform(*spec.gain_range, size=3)
        offset = rng.uniform(*spec.offset_range, size=3)
        img = img * gain + offset
    if spec.crop_size is not None:
        geometric |= min(img.shape[:2]) < spec.crop_size  # reflect-padded
        img, maps = random_crop(img, maps, spec.crop_size, rng)

    return _finish(sample.name, img, maps[0], maps[1], geometric)
