import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mildnet.evaluation import (
    EvalReport,
    aggregate,
    detection,
    detection_f1,
    disk,
    evaluate,
    lumen_instances,
    object_dice,
    object_hausdorff,
    postprocess,
)
from oracles import (
    oracle_dice,
    oracle_f1,
    oracle_hausdorff,
    random_instance_map,
)


def perturbed_pair(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(12, 33))
    gt = random_instance_map(rng, size)
    if rng.random() < 0.5:
        pred = random_instance_map(rng, size)
    else:
        pred = np.roll(gt, tuple(rng.integers(-3, 4, 2)), axis=(0, 1))
        pred = np.where(pred > 0, pred + 10, 0).astype(np.int32)
    return pred, gt


# ----------------------------------------------------------------------
# postprocess
# ----------------------------------------------------------------------
def opening_oracle(mask, r):
    fp = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]
    h, w = mask.shape
    inside = lambda y, x: 0 <= y < h and 0 <= x < w and mask[y, x]  # noqa: E731
    eroded = {(y, x) for y in range(h) for x in range(w) if all(inside(y + dy, x + dx) for dy, dx in fp)}
    out = np.zeros_like(mask, bool)
    for y, x in eroded:
        for dy, dx in fp:
            out[y + dy, x + dx] = True
    return out


class TestPostprocess:
    def test_disk_definition(self):
        d = disk(5)
        assert d.shape == (11, 11)
        assert d[5, 0] and d[1, 2] and not d[0, 0] and not d[1, 1]
        assert d.sum() == sum(1 for y in range(-5, 6) for x in range(-5, 6) if y * y + x * x <= 25)

    def test_all_zero(self):
        assert postprocess(np.zeros((32, 32))).max() == 0

    def test_fat_square_survives(self):
        prob = np.zeros((80, 80))
        prob[15:65, 15:65] = 0.9
        lab = postprocess(prob)
        assert lab.max() == 1
        expected = opening_oracle(prob > 0.5, 5)
        np.testing.assert_array_equal(lab > 0, expected)
        rows, cols = np.nonzero(lab)
        assert (rows.min(), rows.max(), cols.min(), cols.max()) == (15, 64, 15, 64)
        # a disk cannot reach into square corners: 10 px are trimmed from each
        assert (lab > 0).sum() == expected.sum() == 2500 - 4 * 10

    def test_bridge_is_cut(self):
        prob = np.zeros((60, 90))
        prob[10:40, 10:40] = 1.0
        prob[10:40, 50:80] = 1.0
        prob[25, 40:50] = 1.0
        lab = postprocess(prob, threshold=0.5, disk_radius=5)
        assert lab.max() == 2
        np.testing.assert_array_equal(lab > 0, opening_oracle(prob > 0.5, 5))

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        prob = np.zeros((64, 64))
        for _ in range(5):
            r, c = rng.integers(5, 50, 2)
            prob[r : r + 14, c : c + 12] = 0.8
        once = postprocess(prob)
        twice = postprocess((once > 0).astype(float))
        np.testing.assert_array_equal(once, twice)


# ----------------------------------------------------------------------
# detection F1
# ----------------------------------------------------------------------
def test_lumen_instances_keep_small_objects():
    prob = np.zeros((20, 20))
    prob[2:6, 2:6] = 0.9  # far narrower than the gland disk
    prob[10:13, 12:18] = 0.7
    prob[15, 15] = 0.5  # not above threshold
    lab = lumen_instances(prob)
    assert lab.max() == 2
    assert (lab > 0).sum() == 16 + 18
    assert postprocess(prob).max() == 0


class TestDetectionF1:
    def test_identical(self):
        gt = random_instance_map(np.random.default_rng(1), 32)
        gt[0:4, 0:4] = 9
        assert detection_f1(gt, gt) == 1.0

    def test_empty_prediction(self):
        gt = np.zeros((10, 10), np.int32)
        gt[2:5, 2:5] = 1
        assert detection_f1(np.zeros_like(gt), gt) == 0.0

    def test_constructed_case(self):
        gt = np.zeros((20, 40), np.int32)
        gt[0:10, 0:10] = 1  # A, area 100
        gt[0:10, 20:30] = 2  # B, area 100
        pred = np.zeros_like(gt)
        pred[0:6, 0:10] = 1  # 60% of A
        pred[0:1, 20:30] = 1  # 10% of B, same predicted object
        pred[15:18, 35:38] = 2  # spurious
        det = detection(pred, gt)
        assert (det.tp, det.fp, det.fn) == (1, 1, 1)
        assert det.f1 == 0.5
        assert det.f1 == oracle_f1(pred, gt)

    @pytest.mark.parametrize("seed", range(60))
    def test_matches_enumeration_oracle(self, seed):
        pred, gt = perturbed_pair(seed)
        assert detection_f1(pred, gt) == oracle_f1(pred, gt)

    def test_swap_roles_keeps_f1_for_one_to_one(self):
        gt = np.zeros((20, 20), np.int32)
        gt[1:8, 1:8] = 1
        gt[10:18, 10:18] = 2
        pred = np.roll(gt, 1, axis=1)
        d1, d2 = detection(pred, gt), detection(gt, pred)
        assert d1.f1 == d2.f1
        assert (d1.precision, d1.recall) == (d2.recall, d2.precision)


# ----------------------------------------------------------------------
# object Dice and Hausdorff
# ----------------------------------------------------------------------
class TestObjectDice:
    def test_identical(self):
        gt = random_instance_map(np.random.default_rng(2), 32)
        gt[0:3, 0:3] = 7
        assert object_dice(gt, gt) == 1.0

    def test_disjoint(self):
        a = np.zeros((10, 10), np.int32)
        b = np.zeros_like(a)
        a[0:3, 0:3] = 1
        b[6:9, 6:9] = 1
        assert object_dice(a, b) == 0.0

    def test_two_instance_hand_computed(self):
        gt = np.zeros((10, 20), np.int32)
        gt[0:4, 0:4] = 1  # 16 px
        gt[5:10, 10:20] = 2  # 50 px
        pred = np.zeros_like(gt)
        pred[0:4, 0:2] = 1  # 8 px, inside gt1
        pred[5:10, 12:20] = 2  # 40 px, inside gt2
        d1 = 2 * 8 / (16 + 8)
        d2 = 2 * 40 / (50 + 40)
        expected = 0.5 * ((16 / 66) * d1 + (50 / 66) * d2 + (8 / 48) * d1 + (40 / 48) * d2)
        assert object_dice(pred, gt) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", range(60))
    def test_matches_pixel_oracle(self, seed):
        pred, gt = perturbed_pair(seed)
        assert object_dice(pred, gt) == pytest.approx(oracle_dice(pred, gt), abs=1e-9)


class TestObjectHausdorff:
    def test_identical(self):
        gt = random_instance_map(np.random.default_rng(3), 32)
        gt[0:3, 0:3] = 7
        assert object_hausdorff(gt, gt) == 0.0

    def test_shifted_square(self):
        gt = np.zeros((30, 30), np.int32)
        gt[5:15, 5:15] = 1
        pred = np.roll(gt, 3, axis=1)
        assert object_hausdorff(pred, gt) == 3.0

    def test_both_empty(self):
        z = np.zeros((5, 5), np.int32)
        assert object_hausdorff(z, z) == 0.0

    def test_irregular_blobs(self):
        rng = np.random.default_rng(4)
        gt = np.zeros((24, 24), np.int32)
        pred = np.zeros_like(gt)
        yy, xx = np.mgrid[0:24, 0:24]
        gt[((yy - 10) / 7.0) ** 2 + ((xx - 11) / 5.0) ** 2 + 0.3 * rng.random((24, 24)) <= 1] = 1
        pred[((yy - 12) / 6.0) ** 2 + ((xx - 10) / 6.5) ** 2 + 0.3 * rng.random((24, 24)) <= 1] = 1
        assert object_hausdorff(pred, gt) == oracle_hausdorff(pred, gt)

    @pytest.mark.parametrize("seed", range(60))
    def test_matches_scan_oracle(self, seed):
        pred, gt = perturbed_pair(seed)
        assert object_hausdorff(pred, gt) == pytest.approx(oracle_hausdorff(pred, gt), rel=1e-12, abs=0)


# ----------------------------------------------------------------------
# shared properties
# ----------------------------------------------------------------------
def permute_ids(labels, rng):
    ids = np.unique(labels)
    ids = ids[ids > 0]
    new = rng.permutation(np.arange(1, len(ids) + 1)) + 100
    lut = np.zeros(labels.max() + 1, np.int32)
    lut[ids] = new
    return lut[labels]


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_metrics_invariant_to_id_permutation(seed):
    pred, gt = perturbed_pair(seed)
    rng = np.random.default_rng(seed)
    p2, g2 = permute_ids(pred, rng), permute_ids(gt, rng)
    assert detection_f1(pred, gt) == detection_f1(p2, g2)
    assert object_dice(pred, gt) == pytest.approx(object_dice(p2, g2), abs=1e-12)
    assert object_hausdorff(pred, gt) == pytest.approx(object_hausdorff(p2, g2), abs=1e-9)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_metric_ranges_and_symmetry(seed):
    pred, gt = perturbed_pair(seed)
    assert 0.0 <= object_dice(pred, gt) <= 1.0
    assert object_hausdorff(pred, gt) >= 0.0
    assert object_dice(pred, gt) == pytest.approx(object_dice(gt, pred), abs=1e-12)


def test_far_spurious_prediction():
    gt = np.zeros((64, 64), np.int32)
    gt[5:20, 5:20] = 1
    gt[5:18, 25:40] = 2
    pred = np.roll(gt, 2, axis=0)
    base = evaluate(pred, gt)
    worse = pred.copy()
    worse[50:60, 50:60] = 9
    rep = evaluate(worse, gt)
    assert rep.f1 < base.f1
    assert rep.object_dice < base.object_dice
    assert rep.object_hausdorff >= base.object_hausdorff


def test_report_round_trip_and_aggregate():
    gt = np.zeros((20, 20), np.int32)
    gt[2:9, 2:9] = 1
    rep = evaluate(np.roll(gt, 1, axis=0), gt, name="img001")
    again = EvalReport.from_text(rep.to_text())
    assert again.matches == rep.matches
    assert again.f1 == pytest.approx(rep.f1, abs=1e-6)
    perfect = evaluate(gt, gt, name="p")
    assert (perfect.f1, perfect.object_dice, perfect.object_hausdorff) == (1.0, 1.0, 0.0)
    agg = aggregate([rep, perfect])
    assert agg["f1"] == pytest.approx((rep.f1 + perfect.f1) / 2)
    assert agg["object_hausdorff"] == pytest.approx(rep.object_hausdorff / 2)
    assert rep.summary_row().split("\t")[0] == "img001"
