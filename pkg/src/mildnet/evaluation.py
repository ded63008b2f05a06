"""
Post-processing and object-level evaluation (detection F1, object Dice,
object Hausdorff) following the GlaS challenge conventions.

All functions take integer instance maps (0 = background, k >= 1 = object)
and are pure, so images can be evaluated in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigError

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def disk(radius: int) -> np.ndarray:
    """Discrete disk {(dy, dx): dy^2 + dx^2 <= r^2} as a boolean footprint."""
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def binary_open(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological opening with a disk; the image is edge-padded so objects
    cut by the border are not eroded along the cut."""
    if radius <= 0:
        return mask.astype(bool)
    r = int(radius)
    padded = np.pad(mask.astype(bool), r, mode="edge")
    opened = ndimage.binary_opening(padded, structure=disk(r))
    return opened[r:-r, r:-r]


def label_components(mask: np.ndarray) -> np.ndarray:
    labels, _ = ndimage.label(mask, structure=FOUR_CONNECTED)
    return labels.astype(np.int32)


def postprocess(prob_map: np.ndarray, threshold: float = 0.5, disk_radius: int = 5) -> np.ndarray:
    """Foreground probability -> instance map.

    Binarise (p > threshold), open with a disk, then label 4-connected
    components. Contour outputs are deliberately not used for splitting.
    """
    prob_map = np.asarray(prob_map)
    if prob_map.ndim != 2:
        raise ConfigError(f"postprocess expects a 2-D probability map, got shape {prob_map.shape}")
    return label_components(binary_open(prob_map > threshold, disk_radius))


def lumen_instances(prob_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Lumen probability -> instance map: threshold and 4-connected labelling.

    No opening: lumens are often narrower than the gland disk and would be
    erased by it.
    """
    return postprocess(prob_map, threshold, disk_radius=0)


def relabel_sequential(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    ids = ids[ids > 0]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int32)
    lut[ids] = np.arange(1, len(ids) + 1, dtype=np.int32)
    return lut[labels]


# ----------------------------------------------------------------------
# overlap bookkeeping
# ----------------------------------------------------------------------
def _ids(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    return ids[ids > 0]


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ConfigError(f"prediction {pred.shape} and ground truth {gt.shape} extents differ")


class _Overlaps:
    """Contingency table between two instance maps."""

    def __init__(self, pred: np.ndarray, gt: np.ndarray):
        _check_pair(pred, gt)
        self.pred_ids = _ids(pred)
        self.gt_ids = _ids(gt)
        p_idx = np.searchsorted(self.pred_ids, pred.ravel())
        g_idx = np.searchsorted(self.gt_ids, gt.ravel())
        p_fg = pred.ravel() > 0
        g_fg = gt.ravel() > 0
        both = p_fg & g_fg
        npred, ngt = len(self.pred_ids), len(self.gt_ids)
        self.table = np.bincount(p_idx[both] * ngt + g_idx[both], minlength=npred * ngt).reshape(npred, ngt)
        self.pred_area = np.bincount(p_idx[p_fg], minlength=npred)
        self.gt_area = np.bincount(g_idx[g_fg], minlength=ngt)

    def partners_of_pred(self, i: int) -> np.ndarray:
        """Indices of ground-truth objects tied for maximal overlap (empty if none)."""
        row = self.table[i]
        if not row.size or row.max() == 0:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(row == row.max())

    def partners_of_gt(self, j: int) -> np.ndarray:
        col = self.table[:, j]
        if not col.size or col.max() == 0:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(col == col.max())


# ----------------------------------------------------------------------
# detection F1
# ----------------------------------------------------------------------
@dataclass
class Detection:
    tp: int
    fp: int
    fn: int
    matches: List[Tuple[int, int, int]] = field(default_factory=list)  # (pred id, gt id, overlap px)

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return 1.0 if d == 0 else self.tp / d

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return 1.0 if d == 0 else self.tp / d


def detection(pred: np.ndarray, gt: np.ndarray) -> Detection:
    """Match predictions to ground truth.

    A (pred, gt) pair is a candidate when the overlap covers at least half of
    the ground-truth object. Candidates are accepted greedily by descending
    overlap (ties: lower gt id, then lower pred id), one partner per object.
    """
    ov = _Overlaps(pred, gt)
    cand = []
    for i, j in zip(*np.nonzero(2 * ov.table >= ov.gt_area[None, :])):
        if ov.table[i, j] > 0:
            cand.append((-int(ov.table[i, j]), int(ov.gt_ids[j]), int(ov.pred_ids[i]), i, j))
    cand.sort()
    used_p, used_g = set(), set()
    matches = []
    for neg, gid, pid, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matches.append((pid, gid, -neg))
    tp = len(matches)
    return Detection(tp, len(ov.pred_ids) - tp, len(ov.gt_ids) - tp, matches)


def detection_f1(pred: np.ndarray, gt: np.ndarray) -> float:
    return detection(pred, gt).f1


# ----------------------------------------------------------------------
# object Dice
# ----------------------------------------------------------------------
def object_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Area-weighted, maximal-overlap-matched Dice averaged over both roles.

    Unmatched objects contribute 0; two empty maps score 1.
    """
    ov = _Overlaps(pred, gt)
    if len(ov.pred_ids) == 0 and len(ov.gt_ids) == 0:
        return 1.0

    def half(areas, partner_areas, partners, overlap):
        total = areas.sum()
        if total == 0:
            return 0.0
        acc = 0.0
        for i, a in enumerate(areas):
            ks = partners(i)
            if not len(ks):
                continue
            # overlap ties are resolved in favour of the best Dice, which keeps
            # the score independent of instance numbering
            best = max(2.0 * overlap(i, k) / (a + partner_areas[k]) for k in ks)
            acc += (a / total) * best
        return acc

    g_half = half(ov.gt_area, ov.pred_area, ov.partners_of_gt, lambda j, i: ov.table[i, j])
    s_half = half(ov.pred_area, ov.gt_area, ov.partners_of_pred, lambda i, j: ov.table[i, j])
    return 0.5 * (g_half + s_half)


# ----------------------------------------------------------------------
# object Hausdorff
# ----------------------------------------------------------------------
def boundary_coords(mask: np.ndarray) -> np.ndarray:
    """(row, col) of object pixels with a 4-neighbour outside the object or image."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1] & padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return np.argwhere(mask & ~interior)


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two point sets (Euclidean)."""
    da = cKDTree(b).query(a, k=1)[0].max()
    db = cKDTree(a).query(b, k=1)[0].max()
    return float(max(da, db))


def object_hausdorff(pred: np.ndarray, gt: np.ndarray) -> float:
    """Area-weighted object-level Hausdorff distance between boundary sets.

    Each object is paired with its maximal-overlap counterpart (the closest
    one when several tie); an object overlapping nothing is paired with the
    counterpart of smallest Hausdorff distance. When the other map has no
    objects at all the pair distance is the image diagonal.
    """
    _check_pair(pred, gt)
    ov = _Overlaps(pred, gt)
    if len(ov.pred_ids) == 0 and len(ov.gt_ids) == 0:
        return 0.0
    diag = float(np.hypot(*pred.shape))
    pred_b = [boundary_coords(pred == k) for k in ov.pred_ids]
    gt_b = [boundary_coords(gt == k) for k in ov.gt_ids]
    cache: Dict[Tuple[int, int], float] = {}

    def dist(i, j):
        if (i, j) not in cache:
            cache[(i, j)] = hausdorff(pred_b[i], gt_b[j])
        return cache[(i, j)]

    def half(areas, n_other, partners, pair):
        # exact products summed with fsum, so the order of objects cannot change the result
        terms = []
        for i, a in enumerate(areas):
            if not n_other:
                d = diag
            else:
                ks = partners(i)
                d = min(pair(i, k) for k in (ks if len(ks) else range(n_other)))
            terms.append(float(a) * d)
        return 0.5 * math.fsum(terms) / float(areas.sum()) if len(areas) else 0.0

    g_half = half(ov.gt_area, len(ov.pred_ids), ov.partners_of_gt, lambda j, k: dist(k, j))
    p_half = half(ov.pred_area, len(ov.gt_ids), ov.partners_of_pred, dist)
    return g_half + p_half


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------
@dataclass
class EvalReport:
    f1: float
    tp: int
    fp: int
    fn: int
    object_dice: float
    object_hausdorff: float
    matches: List[Tuple[int, int, int]] = field(default_factory=list)
    name: str = ""

    SUMMARY_HEADER = "name\tf1\tobject_dice\tobject_hausdorff\ttp\tfp\tfn"

    def to_text(self) -> str:
        """key=value block followed by a tab-separated match table."""
        lines = [
            f"name={self.name}",
            f"f1={self.f1:.6f}",
            f"tp={self.tp}",
            f"fp={self.fp}",
            f"fn={self.fn}",
            f"object_dice={self.object_dice:.6f}",
            f"object_hausdorff={self.object_hausdorff:.6f}",
            "",
            "pred_id\tgt_id\toverlap",
        ]
        lines += [f"{p}\t{g}\t{o}" for p, g, o in self.matches]
        return "\n".join(lines) + "\n"

    def summary_row(self) -> str:
        return (
            f"{self.name}\t{self.f1:.6f}\t{self.object_dice:.6f}\t{self.object_hausdorff:.6f}"
            f"\t{self.tp}\t{self.fp}\t{self.fn}"
        )

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        head, _, table = text.partition("\n\n")
        kv = dict(line.split("=", 1) for line in head.splitlines() if "=" in line)
        matches = []
        for line in table.splitlines()[1:]:
            if line.strip():
                p, g, o = (int(v) for v in line.split("\t"))
                matches.append((p, g, o))
        return cls(
            f1=float(kv["f1"]),
            tp=int(kv["tp"]),
            fp=int(kv["fp"]),
            fn=int(kv["fn"]),
            object_dice=float(kv["object_dice"]),
            object_hausdorff=float(kv["object_hausdorff"]),
            matches=matches,
            name=kv.get("name", ""),
        )


def evaluate(pred: np.ndarray, gt: np.ndarray, name: str = "") -> EvalReport:
    det = detection(pred, gt)
    return EvalReport(
        f1=det.f1,
        tp=det.tp,
        fp=det.fp,
        fn=det.fn,
        object_dice=object_dice(pred, gt),
        object_hausdorff=object_hausdorff(pred, gt),
        matches=det.matches,
        name=name,
    )


def aggregate(reports: List[EvalReport]) -> Dict[str, float]:
    """Dataset row: means of the per-image scores plus pooled counts."""
    if not reports:
        return {"f1": 0.0, "object_dice": 0.0, "object_hausdorff": 0.0, "images": 0, "tp": 0, "fp": 0, "fn": 0}
    return {
        "f1": float(np.mean([r.f1 for r in reports])),
        "object_dice": float(np.mean([r.object_dice for r in reports])),
        "object_hausdorff": float(np.mean([r.object_hausdorff for r in reports])),
        "images": len(reports),
        "tp": int(sum(r.tp for r in reports)),
        "fp": int(sum(r.fp for r in reports)),
        "fn": int(sum(r.fn for r in reports)),
    }
