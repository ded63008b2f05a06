"""
Test-time random transformation sampling (RTS) and instance uncertainty.

Each of ``n`` samples applies a transform drawn from a pool to the network
input, runs inference, and maps the probabilities back onto the original
pixel grid. The mean over samples is the prediction; the population
variance of the foreground probability is the uncertainty map. Geometric
transforms are restricted to flips and right-angle rotations so the inverse
is exact on the grid.

Setting pixels that the contour branch marks as boundary to zero gives the
boundary-removed map; an instance's score is the mean of that map over its
pixels. Instances scoring at or above a threshold can then be discarded.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .data.types import to_input
from .errors import ConfigError, DataError
from .evaluation import detection
from .inference import predict_input
from .model import MILDNet

GEOMETRIC = ("identity", "flip-h", "flip-v", "rot90", "rot180", "rot270")
PHOTOMETRIC = ("gaussian-blur", "median-blur", "gaussian-noise")
_DEFAULT_PARAM = {"gaussian-blur": 1.0, "median-blur": 3.0, "gaussian-noise": 0.02}
_SPEC_RE = re.compile(r"^\s*([a-z0-9-]+)\s*(?:\(\s*([^)]*)\s*\))?\s*$")

# which contour branch trims which variance map
BOUNDARY_OF = {"gland": "contour", "lumen": "lumen_contour"}


class UncertaintyWarning(UserWarning):
    pass


# ----------------------------------------------------------------------
# transforms
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class TransformSpec:
    """One test-time transform.

    ``param`` is the blur sigma (pixels), the median window size, or the
    noise standard deviation (input intensity units, inputs in [0, 1]).
    """

    kind: str
    param: float = 0.0

    def __post_init__(self):
        if self.kind.startswith("rot") and self.kind not in GEOMETRIC:
            raise ConfigError(f"transform {self.kind!r} has no exact inverse on the pixel grid; use rot90, rot180 or rot270")
        if self.kind not in GEOMETRIC + PHOTOMETRIC:
            raise ConfigError(f"unknown transform {self.kind!r}; expected one of {GEOMETRIC + PHOTOMETRIC}")
        if self.kind in GEOMETRIC and self.param:
            raise ConfigError(f"transform {self.kind!r} takes no parameter")
        if self.kind == "median-blur" and (self.param < 1 or self.param != int(self.param)):
            raise ConfigError(f"median-blur window must be a positive integer, got {self.param}")
        if self.kind in ("gaussian-blur", "gaussian-noise") and self.param < 0:
            raise ConfigError(f"{self.kind} parameter must be >= 0, got {self.param}")

    @classmethod
    def parse(cls, text: str) -> "TransformSpec":
        """``"flip-h"``, ``"gaussian-blur(1.5)"``, ``"median-blur"`` ..."""
        m = _SPEC_RE.match(text)
        if not m:
            raise ConfigError(f"cannot parse transform {text!r}")
        kind, arg = m.group(1), m.group(2)
        if arg is None or arg == "":
            return cls(kind, _DEFAULT_PARAM.get(kind, 0.0))
        try:
            return cls(kind, float(arg))
        except ValueError:
            raise ConfigError(f"transform {text!r}: parameter {arg!r} is not a number") from None

    def __str__(self) -> str:
        if self.kind in GEOMETRIC:
            return self.kind
        return f"{self.kind}({self.param:g})"

    @property
    def geometric(self) -> bool:
        return self.kind in GEOMETRIC

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Transform a (C, H, W) input."""
        k = self.kind
        if k == "identity":
            return x
        if k == "flip-h":
            return x[:, :, ::-1]
        if k == "flip-v":
            return x[:, ::-1, :]
        if k.startswith("rot"):
            return np.rot90(x, int(k[3:]) // 90, axes=(1, 2))
        if k == "gaussian-blur":
            return ndimage.gaussian_filter(x, (0, self.param, self.param), mode="reflect")
        if k == "median-blur":
            s = int(self.param)
            return ndimage.median_filter(x, size=(1, s, s), mode="reflect")
        if rng is None:
            raise ConfigError("gaussian-noise needs a random generator")
        return x + rng.normal(0.0, self.param, x.shape).astype(x.dtype)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        """Map a (C, H, W) output back onto the original grid."""
        k = self.kind
        if k == "flip-h":
            return y[:, :, ::-1]
        if k == "flip-v":
            return y[:, ::-1, :]
        if k.startswith("rot"):
            return np.rot90(y, -(int(k[3:]) // 90), axes=(1, 2))
        return y


DEFAULT_POOL: Tuple[TransformSpec, ...] = tuple(
    TransformSpec.parse(t)
    for t in ("flip-h", "flip-v", "rot90", "rot180", "rot270", "gaussian-blur(1)", "median-blur(3)", "gaussian-noise(0.02)")
)


def parse_pool(items: Iterable[Union[str, TransformSpec]]) -> Tuple[TransformSpec, ...]:
    pool = tuple(t if isinstance(t, TransformSpec) else TransformSpec.parse(t) for t in items)
    if not pool:
        raise ConfigError("transform pool is empty")
    return pool


def draw_transforms(pool: Sequence[TransformSpec], n: int, seed) -> List[TransformSpec]:
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 0])
    return [pool[int(i)] for i in rng.integers(0, len(pool), size=n)]


# ----------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------
@dataclass
class UncertaintyMap:
    """RTS output for one image.

    ``mu`` holds the mean (2, H, W) probability map of every branch;
    ``variance`` the foreground variance of the segmentation branches
    (gland, and lumen for the four-branch network); ``sigma_hat`` the same
    maps with predicted boundaries zeroed.
    """

    mu: Dict[str, np.ndarray]
    variance: Dict[str, np.ndarray]
    sigma_hat: Dict[str, np.ndarray]
    n: int
    transforms: List[TransformSpec] = field(default_factory=list)

    @property
    def sigma(self) -> np.ndarray:
        return self.variance["gland"]

    @property
    def gland_sigma_hat(self) -> np.ndarray:
        return self.sigma_hat["gland"]


def aggregate_samples(samples: Sequence[Dict[str, np.ndarray]]) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Mean probability maps and foreground population variance, accumulated in float64."""
    n = len(samples)
    mu64 = {k: sum(s[k].astype(np.float64) for s in samples) / n for k in samples[0]}
    var = {}
    for k in BOUNDARY_OF:
        if k in mu64:
            m = mu64[k][1]
            var[k] = sum((s[k][1].astype(np.float64) - m) ** 2 for s in samples) / n
    mu = {k: v.astype(samples[0][k].dtype) for k, v in mu64.items()}
    return mu, var


def rts_predict(
    model: MILDNet,
    image: np.ndarray,
    n: int = 8,
    pool: Optional[Sequence[Union[str, TransformSpec]]] = None,
    seed=0,
    tile: Optional[int] = None,
    contour_threshold: float = 0.5,
) -> UncertaintyMap:
    """Random transformation sampling over one uint8 (H, W, 3) image.

    The forward passes are run in sample order and reduced in float64, so
    the result depends only on ``seed``.
    """
    if n < 1:
        raise ConfigError(f"RTS needs n >= 1 samples, got {n}")
    pool = DEFAULT_POOL if pool is None else parse_pool(pool)
    chosen = draw_transforms(pool, n, seed)
    x = to_input(image)[0]
    samples = []
    for i, t in enumerate(chosen):
        rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 1, i])
        xt = np.ascontiguousarray(t.forward(x, rng), dtype=np.float32)
        probs = predict_input(model, xt, tile)
        samples.append({k: np.ascontiguousarray(t.inverse(v)) for k, v in probs.items()})
    mu, var = aggregate_samples(samples)
    hat = {k: boundary_removed(v, mu[BOUNDARY_OF[k]][1], contour_threshold) for k, v in var.items() if BOUNDARY_OF[k] in mu}
    return UncertaintyMap(mu, var, hat, n, chosen)


def boundary_removed(umap: Union[UncertaintyMap, np.ndarray], contour_prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Zero the variance wherever the contour foreground probability is >= ``threshold``."""
    sigma = umap.sigma if isinstance(umap, UncertaintyMap) else np.asarray(umap)
    contour_prob = np.asarray(contour_prob)
    if contour_prob.shape != sigma.shape:
        raise ConfigError(f"contour map {contour_prob.shape} and variance map {sigma.shape} differ")
    return np.where(contour_prob >= threshold, 0.0, sigma).astype(sigma.dtype)


# ----------------------------------------------------------------------
# instance scores and filtering
# ----------------------------------------------------------------------
def instance_uncertainty(
    sigma_hat: np.ndarray, instances: np.ndarray, ids: Optional[Iterable[int]] = None
) -> Dict[int, float]:
    """tau_k: mean of ``sigma_hat`` over the pixels of instance k.

    ``ids`` restricts (or extends) the instances scored; ids with no pixels
    are skipped with an :class:`UncertaintyWarning`.
    """
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
    instances = np.asarray(instances)
    if sigma_hat.shape != instances.shape:
        raise ConfigError(f"uncertainty map {sigma_hat.shape} and instance map {instances.shape} differ")
    flat = instances.ravel()
    top = int(flat.max()) if flat.size else 0
    counts = np.bincount(flat, minlength=top + 1)
    sums = np.bincount(flat, weights=sigma_hat.ravel(), minlength=top + 1)
    wanted = [int(k) for k in (np.flatnonzero(counts[1:]) + 1 if ids is None else ids)]
    out: Dict[int, float] = {}
    for k in wanted:
        if k <= 0 or k > top or counts[k] == 0:
            warnings.warn(f"instance {k} has no pixels; no uncertainty score", UncertaintyWarning, stacklevel=2)
            continue
        out[k] = float(sums[k] / counts[k])
    return out


@dataclass
class FilterReport:
    threshold: float
    removed: List[int]
    total: int

    @property
    def retained(self) -> int:
        return self.total - len(self.removed)

    @property
    def retained_fraction(self) -> float:
        return 1.0 if self.total == 0 else self.retained / self.total


def removed_ids(tau: Mapping[int, float], threshold: float) -> List[int]:
    if not threshold >= 0:
        raise ConfigError(f"uncertainty threshold must be >= 0, got {threshold}")
    return sorted(k for k, t in tau.items() if t >= threshold)


def filter_instances(instances: np.ndarray, tau: Mapping[int, float], threshold: float) -> Tuple[np.ndarray, FilterReport]:
    """Drop instances whose score is at or above ``threshold``."""
    ids = [int(k) for k in np.unique(instances) if k > 0]
    missing = [k for k in ids if k not in tau]
    if missing:
        raise ConfigError(f"no uncertainty score for instance ids {missing}")
    gone = removed_ids({k: tau[k] for k in ids}, threshold)
    out = np.where(np.isin(instances, gone), 0, instances).astype(instances.dtype)
    return out, FilterReport(float(threshold), gone, len(ids))


# ----------------------------------------------------------------------
# threshold sweep
# ----------------------------------------------------------------------
@dataclass
class SweepItem:
    """One image: predicted and true instances plus per-variant scores,
    e.g. ``{"sigma": {...}, "sigma_hat": {...}}``."""

    pred: np.ndarray
    gt: np.ndarray
    tau: Dict[str, Dict[int, float]]


@dataclass(frozen=True)
class SweepRecord:
    threshold: float
    f1: float
    retained_fraction: float
    map_variant: str
    tp: int = 0
    fp: int = 0
    fn: int = 0


def _pooled_f1(tp: int, fp: int, fn: int) -> float:
    d = 2 * tp + fp + fn
    return 1.0 if d == 0 else 2 * tp / d


def filter_pair(pred: np.ndarray, gt: np.ndarray, drop: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Remove predictions ``drop`` together with their ground-truth counterparts.

    A removed prediction that is matched takes its matched ground truth with
    it. An unmatched one takes the ground-truth object it overlaps most,
    unless a retained prediction is matched to that object.
    """
    drop = set(int(k) for k in drop)
    if not drop:
        return pred, gt
    det = detection(pred, gt)
    match = {p: g for p, g, _ in det.matches}
    kept_gt = {g for p, g, _ in det.matches if p not in drop}
    gt_drop = set()
    for p in drop:
        if p in match:
            gt_drop.add(match[p])
            continue
        under = gt[pred == p]
        under = under[under > 0]
        if under.size:
            counts = np.bincount(under)
            g = int(np.argmax(counts))  # lowest id among equal overlaps
            if g not in kept_gt:
                gt_drop.add(g)
    pred_f = np.where(np.isin(pred, list(drop)), 0, pred).astype(pred.dtype)
    gt_f = np.where(np.isin(gt, list(gt_drop)), 0, gt).astype(gt.dtype)
    return pred_f, gt_f


def uncertainty_sweep(items: Sequence[SweepItem], thresholds: Sequence[float], variants: Optional[Sequence[str]] = None) -> List[SweepRecord]:
    """Filtered detection F1 and retained fraction for every threshold and score variant.

    Counts are pooled over all images before F1 is formed; the retained
    fraction is retained predictions over all predictions.
    """
    if variants is None:
        variants = sorted({v for it in items for v in it.tau})
    records = []
    for var in variants:
        for t in thresholds:
            tp = fp = fn = kept = total = 0
            for it in items:
                ids = [int(k) for k in np.unique(it.pred) if k > 0]
                scores = it.tau[var]
                missing = [k for k in ids if k not in scores]
                if missing:
                    raise ConfigError(f"variant {var!r}: no score for instance ids {missing}")
                drop = removed_ids({k: scores[k] for k in ids}, t)
                p, g = filter_pair(it.pred, it.gt, drop)
                d = detection(p, g)
                tp, fp, fn = tp + d.tp, fp + d.fp, fn + d.fn
                kept += len(ids) - len(drop)
                total += len(ids)
            frac = 1.0 if total == 0 else kept / total
            records.append(SweepRecord(float(t), _pooled_f1(tp, fp, fn), frac, var, tp, fp, fn))
    return records


SWEEP_HEADER = "threshold\tf1\tretained_fraction\tmap_variant\ttp\tfp\tfn"


def write_sweep(path: Union[str, Path], records: Sequence[SweepRecord]) -> None:
    lines = [SWEEP_HEADER]
    for r in records:
        lines.append(f"{r.threshold:.9g}\t{r.f1:.9g}\t{r.retained_fraction:.9g}\t{r.map_variant}\t{r.tp}\t{r.fp}\t{r.fn}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_sweep(path: Union[str, Path]) -> List[SweepRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SWEEP_HEADER:
        raise DataError(f"{path}: not a sweep file")
    out = []
    for no, line in enumerate(lines[1:], 2):
        f = line.split("\t")
        try:
            out.append(SweepRecord(float(f[0]), float(f[1]), float(f[2]), f[3], int(f[4]), int(f[5]), int(f[6])))
        except (IndexError, ValueError):
            raise DataError(f"{path}:{no}: malformed sweep row {line!r}") from None
    return out


# ----------------------------------------------------------------------
# map export
# ----------------------------------------------------------------------
def export_map(directory: Union[str, Path], name: str, values: np.ndarray) -> Dict[str, object]:
    """Write ``name.png`` (16-bit, linearly scaled), ``name.f32`` (raw
    little-endian float32, row-major) and ``name.json`` describing both.

    PNG value v maps back to ``v / 65535 * scale``.
    """
    directory = Path(directory)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ConfigError(f"map {name!r} must be 2-D, got shape {values.shape}")
    if not np.all(np.isfinite(values)) or values.min(initial=0.0) < 0:
        raise DataError(f"map {name!r} must be finite and non-negative")
    top = float(values.max(initial=0.0))
    scale = top if top > 0 else 1.0
    png = np.rint(values / scale * 65535).astype(np.uint16)
    Image.fromarray(png).save(directory / f"{name}.png", format="PNG")
    (directory / f"{name}.f32").write_bytes(values.astype("<f4").tobytes())
    meta = {"shape": list(values.shape), "dtype": "<f4", "png_scale": scale, "png_max": 65535}
    (directory / f"{name}.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return meta


def load_map(directory: Union[str, Path], name: str, from_png: bool = False) -> np.ndarray:
    directory = Path(directory)
    try:
        meta = json.loads((directory / f"{name}.json").read_text())
        shape = tuple(meta["shape"])
        if from_png:
            with Image.open(directory / f"{name}.png") as im:
                v = np.asarray(im, dtype=np.float64)
            return v / meta["png_max"] * meta["png_scale"]
        raw = np.frombuffer((directory / f"{name}.f32").read_bytes(), dtype=meta["dtype"])
        return raw.reshape(shape).astype(np.float32)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{directory / name}: cannot read map ({exc})") from None


def write_tau_table(path: Union[str, Path], taus: Mapping[str, Mapping[int, float]], threshold: Optional[float] = None) -> None:
    """One row per instance: id, score per variant, and keep flag
    (under the ``sigma_hat`` score) when a threshold is given."""
    variants = sorted(taus)
    ids = sorted(set().union(*(taus[v].keys() for v in variants))) if variants else []
    head = ["id", *(f"tau_{v}" for v in variants)] + (["kept"] if threshold is not None else [])
    lines = ["\t".join(head)]
    for k in ids:
        row = [str(k)] + [f"{taus[v][k]:.9g}" for v in variants]
        if threshold is not None:
            row.append("1" if taus["sigma_hat"][k] < threshold else "0")
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")
