import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decodet.geometry import BBox, RegressionDelta, iou
from decodet.targets import (
    PROB_FLOOR,
    GroundTruth,
    RpnLabel,
    assign_detection_labels,
    assign_rpn_labels,
    cross_entropy,
    ohem_select,
    smooth_l1,
    total_loss,
)
from fixtures import FIXTURE_GTS, FIXTURE_PREDS, FIXTURE_ROIS, FIXTURE_TAX, pred, taxonomy

IGN, NEG, POS = RpnLabel.IGNORE, RpnLabel.NEGATIVE, RpnLabel.POSITIVE


def test_fixture_targets_by_hand():
    ts = assign_detection_labels(FIXTURE_ROIS, FIXTURE_GTS, taxonomy(FIXTURE_TAX))
    assert ts.background == 2
    t0, t1, t2 = ts.targets
    # RoI 0 coincides with gt 0 (class 1, super-class 1)
    assert (t0.detection_label, t0.classification_label, t0.matched_gt) == (1, 1, 0)
    assert t0.regression_target == RegressionDelta(0.0, 0.0, 0.0, 0.0)
    assert t0.max_iou == 1.0
    # RoI 1 covers 80 of gt 1's 100 px: IoU 0.8; centre y 4 -> 5 over height 8, height 8 -> 10
    assert (t1.detection_label, t1.classification_label, t1.matched_gt) == (0, 0, 1)
    assert t1.max_iou == pytest.approx(0.8, abs=1e-12)
    assert t1.regression_target.dx == 0.0
    assert t1.regression_target.dy == pytest.approx(1 / 8, abs=1e-12)
    assert t1.regression_target.dw == 0.0
    assert t1.regression_target.dh == pytest.approx(math.log(10 / 8), abs=1e-12)
    # RoI 2 is disjoint
    assert (t2.detection_label, t2.classification_label, t2.regression_target, t2.matched_gt) == (2, None, None, None)
    assert ts.positives() == [0, 1]


def test_fixture_loss_by_hand():
    ts = assign_detection_labels(FIXTURE_ROIS, FIXTURE_GTS, taxonomy(FIXTURE_TAX))
    report = total_loss(FIXTURE_PREDS, ts, batch_size=2)
    det = [-math.log(0.7), -math.log(0.5), -math.log(0.8)]
    reg = [0.5 * 0.1**2 + 0.5 * 0.2**2, 0.5 * math.log(1.25) ** 2, 0.0]
    # per-RoI det+reg: 0.3817, 0.7180, 0.2231 -> OHEM with B=2 keeps RoIs 0 and 1
    assert report.selected_rois == [0, 1]
    want_det = (det[0] + det[1]) / 2
    want_reg = (reg[0] + reg[1]) / 2
    want_cls = (-math.log(0.8) - math.log(0.6)) / 2
    assert report.detection_loss == pytest.approx(want_det, abs=1e-9)
    assert report.regression_loss == pytest.approx(want_reg, abs=1e-9)
    assert report.classification_loss == pytest.approx(want_cls, abs=1e-9)
    assert report.total == pytest.approx(want_det + want_reg + 0.05 * want_cls, abs=1e-9)
    full = total_loss(FIXTURE_PREDS, ts, batch_size=128)
    assert full.selected_rois == [0, 1, 2]
    assert full.detection_loss == pytest.approx(sum(det) / 3, abs=1e-9)


def test_highest_iou_wins_across_superclasses():
    tax = taxonomy([0, 1, 2])
    roi = BBox(0, 0, 10, 10)
    gts = [GroundTruth(BBox(0, 0, 10, 5.5), 0), GroundTruth(BBox(0, 0, 10, 6), 2)]
    t = assign_detection_labels([roi], gts, tax)[0]
    assert t.max_iou == pytest.approx(0.6)
    assert (t.detection_label, t.classification_label) == (2, 2)


def test_label_edge_cases():
    tax = taxonomy([0, 0])
    # IoU exactly 0.5 is not > 0.5
    t = assign_detection_labels([BBox(0, 0, 10, 10)], [GroundTruth(BBox(0, 0, 10, 5), 1)], tax)[0]
    assert t.detection_label == 1 and t.classification_label is None
    assert len(assign_detection_labels([BBox(0, 0, 1, 1)], [], tax)) == 1
    with pytest.raises(ValueError):
        assign_detection_labels([BBox(0, 0, 1, 1)], [GroundTruth(BBox(0, 0, 1, 1), 5)], tax)


def test_rpn_regimes_on_iou_06_fixture():
    gt = [BBox(0, 0, 10, 10)]
    anchors = [BBox(0, 0, 10, 10), BBox(0, 0, 10, 6), BBox(50, 50, 60, 60)]
    assert assign_rpn_labels(anchors, gt, 0.7, 0.3).tolist() == [POS, IGN, NEG]
    assert assign_rpn_labels(anchors, gt, 0.5, 0.4).tolist() == [POS, POS, NEG]


def test_rpn_argmax_rule():
    gt = [BBox(0, 0, 10, 10)]
    anchors = [BBox(0, 0, 10, 4), BBox(0, 0, 10, 2)]
    assert assign_rpn_labels(anchors, gt, 0.7, 0.3).tolist() == [POS, NEG]
    # tied argmax anchors are all positive
    assert assign_rpn_labels([BBox(0, 0, 10, 4), BBox(0, 6, 10, 10)], gt).tolist() == [POS, POS]
    # a gt touching no anchor does not promote anything
    assert assign_rpn_labels([BBox(0, 0, 10, 10)], [BBox(0, 0, 10, 10), BBox(90, 90, 99, 99)]).tolist() == [POS]
    assert assign_rpn_labels([BBox(0, 0, 1, 1)], []).tolist() == [NEG]
    with pytest.raises(ValueError):
        assign_rpn_labels(anchors, gt, 0.3, 0.3)


box_st = st.tuples(st.floats(0, 80), st.floats(0, 80), st.floats(1, 40), st.floats(1, 40)).map(
    lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@given(st.lists(box_st, min_size=1, max_size=15), st.lists(box_st, min_size=1, max_size=4))
def test_every_gt_gets_a_positive_anchor(anchors, gts):
    labels = assign_rpn_labels(anchors, gts)
    for g in gts:
        overlaps = [iou(a, g) for a in anchors]
        if max(overlaps) > 0:
            assert any(labels[i] == POS and o == max(overlaps) for i, o in enumerate(overlaps))


def test_smooth_l1_examples():
    assert smooth_l1(0.0) == 0.0
    assert smooth_l1(1.0) == 0.5
    assert smooth_l1(-3.0) == 2.5
    # both branch formulas agree at the join
    assert 0.5 * 1.0**2 == abs(1.0) - 0.5 == smooth_l1(1.0) == smooth_l1(-1.0)
    assert np.array_equal(smooth_l1(np.array([0.5, -2.0])), [0.125, 1.5])


@given(st.floats(-1e6, 1e6))
def test_smooth_l1_even_nonnegative(x):
    assert smooth_l1(x) == smooth_l1(-x) >= 0.0


def test_cross_entropy():
    assert cross_entropy([0.0, 1.0], 1) == 0.0
    assert cross_entropy([0.25] * 4, 2) == pytest.approx(math.log(4))
    assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(PROB_FLOOR))
    with pytest.raises(ValueError):
        cross_entropy([0.5, 0.5], 2)


def test_ohem_select():
    assert ohem_select([0.1, 5.0, 2.0], 2) == [1, 2]
    assert ohem_select([0.1, 5.0, 2.0], 10) == [0, 1, 2]
    assert ohem_select([1.0, 1.0, 1.0], 2) == [0, 1]
    with pytest.raises(ValueError):
        ohem_select([1.0], 0)


@given(st.lists(st.floats(0, 10), max_size=40), st.integers(1, 50))
def test_ohem_properties(losses, b):
    sel = ohem_select(losses, b)
    assert len(sel) == min(b, len(losses))
    rest = [losses[i] for i in range(len(losses)) if i not in sel]
    if sel and rest:
        assert min(losses[i] for i in sel) >= max(rest)


def test_total_loss_trivia():
    tax = taxonomy([0, 0])
    rois = [BBox(0, 0, 10, 10), BBox(50, 50, 60, 60)]
    ts = assign_detection_labels(rois, [GroundTruth(BBox(0, 0, 10, 10), 1)], tax)
    perfect = [pred([1.0, 0.0], [0.0, 1.0], [0, 0, 0, 0]), pred([0.0, 1.0], [0.5, 0.5], [3, 3, 3, 3])]
    assert total_loss(perfect, ts).total == 0.0
    noisy = [pred([0.6, 0.4], [0.3, 0.7], [0.1, 0, 0, 0]), pred([0.2, 0.8], [0.5, 0.5], [0, 0, 0, 0])]
    other_cls = [pred([0.6, 0.4], [0.9, 0.1], [0.1, 0, 0, 0]), noisy[1]]
    a, b = total_loss(noisy, ts, w_cls=0.0), total_loss(other_cls, ts, w_cls=0.0)
    assert a.total == b.total
    r = total_loss(noisy, ts)
    assert r.total == r.detection_loss + r.regression_loss + 0.05 * r.classification_loss
    with pytest.raises(ValueError):
        total_loss(noisy[:1], ts)
