"""
Whole-image inference.

Images no larger than the model input size run in one pass (reflect-padded
up to a multiple of 8 and cropped back). Larger images are covered by tiles
of the model input size placed with stride input_size/2; every output pixel
is taken from the tile whose centre is nearest, which keeps each tile's
central region and discards its borders.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from .data.patches import grid_positions
from .data.types import to_input
from .model import MILDNet


def pad_to_multiple(x: np.ndarray, m: int = 8) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Reflect-pad the last two axes of (N, C, H, W) up to multiples of ``m``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "symmetric"
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)
    return x, (h, w)


def forward_probs(model: MILDNet, x: np.ndarray) -> Dict[str, np.ndarray]:
    """Inference probabilities for an (N, C, H, W) float input of any extent."""
    xp, (h, w) = pad_to_multiple(x)
    probs = model.predict(xp)
    return {k: v[..., :h, :w] for k, v in probs.items()}


def tile_layout(extent: int, tile: int) -> List[Tuple[int, int, int]]:
    """(tile start, owned start, owned end) along one axis.

    Tiles advance by tile/2; ownership boundaries sit midway between
    consecutive tile centres, so the owned ranges partition [0, extent).
    """
    if extent <= tile:
        return [(0, 0, extent)]
    starts = grid_positions(extent, tile, max(tile // 2, 1))
    centres = [s + tile / 2 for s in starts]
    bounds = [0] + [int(np.floor((a + b) / 2)) for a, b in zip(centres, centres[1:])] + [extent]
    return [(s, bounds[i], bounds[i + 1]) for i, s in enumerate(starts)]


def predict_image(model: MILDNet, image: np.ndarray, tile: int | None = None) -> Dict[str, np.ndarray]:
    """Branch probabilities, each (2, H, W), for one uint8 (H, W, 3) image.

    ``tile`` defaults to the model's configured input size.
    """
    return predict_input(model, to_input(image)[0], tile)


def predict_input(model: MILDNet, x: np.ndarray, tile: int | None = None) -> Dict[str, np.ndarray]:
    """As :func:`predict_image` for a float (3, H, W) network input."""
    x = np.asarray(x, dtype=np.float32)[None]
    tile = model.cfg.input_size if tile is None else tile
    h, w = x.shape[-2:]
    if h <= tile and w <= tile:
        return {k: v[0] for k, v in forward_probs(model, x).items()}
    out: Dict[str, np.ndarray] = {}
    for ty, oy0, oy1 in tile_layout(h, tile):
        for tx, ox0, ox1 in tile_layout(w, tile):
            th, tw = min(tile, h), min(tile, w)
            probs = forward_probs(model, x[:, :, ty : ty + th, tx : tx + tw])
            for k, v in probs.items():
                if k not in out:
                    out[k] = np.zeros((v.shape[1], h, w), dtype=v.dtype)
                out[k][:, oy0:oy1, ox0:ox1] = v[0, :, oy0 - ty : oy1 - ty, ox0 - tx : ox1 - tx]
    return out


def foreground(probs: Dict[str, np.ndarray], branch: str = "gland") -> np.ndarray:
    """Foreground (channel 1) probability map of a branch."""
    return probs[branch][1]
