import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from macft.boxes import xywh_to_cxcywh
from macft.objectives import LossWeights, composite_loss_stage2, composite_loss_stage13, giou_loss, l1_box_loss

# hand geometry: IoU 1/7, enclosing area 9, union 7
OVERLAP_LOSS = 1 - (1 / 7 - 2 / 9)
# disjoint unit squares: IoU 0, enclosing area 100, union 2
DISJOINT_LOSS = 1 - (0 - 98 / 100)


def _c(xywh):
    return xywh_to_cxcywh(np.array(xywh, dtype=np.float64))


def test_giou_hand_fixtures():
    assert OVERLAP_LOSS == pytest.approx(1.0793650793650793, abs=1e-15)
    assert giou_loss(_c([0, 0, 2, 2]), _c([1, 1, 2, 2])) == pytest.approx(OVERLAP_LOSS, abs=1e-14)
    assert giou_loss(_c([0, 0, 1, 1]), _c([9, 9, 1, 1])) == pytest.approx(DISJOINT_LOSS, abs=1e-14)
    assert DISJOINT_LOSS == pytest.approx(1.98)


def test_giou_identical_is_zero(rng):
    b = np.column_stack([rng.random((5, 2)), rng.uniform(0.1, 1, (5, 2))])
    np.testing.assert_allclose(giou_loss(b, b), 0.0, atol=1e-15)


def test_giou_rejects_empty_boxes():
    with pytest.raises(ValueError):
        giou_loss([0.5, 0.5, 0.0, 0.2], [0.5, 0.5, 0.2, 0.2])


@given(st.lists(st.floats(0, 1), min_size=8, max_size=8), st.floats(0.05, 1), st.floats(0.05, 1),
       st.floats(0.05, 1), st.floats(0.05, 1))
def test_giou_range(xy, w1, h1, w2, h2):
    loss = giou_loss([xy[0], xy[1], w1, h1], [xy[2], xy[3], w2, h2])
    assert 0 <= loss <= 2


def test_giou_grows_as_boxes_separate():
    gt = np.array([0.5, 0.5, 0.2, 0.2])
    losses = [giou_loss([0.5 + d, 0.5, 0.2, 0.2], gt) for d in np.linspace(0, 1.5, 31)]
    assert np.all(np.diff(losses) > 0)


def test_giou_gradient_matches_differences(rng):
    for _ in range(20):
        b = np.concatenate([rng.random(2), rng.uniform(0.1, 0.5, 2)])
        t = np.concatenate([rng.random(2), rng.uniform(0.1, 0.5, 2)])
        _, g = giou_loss(b, t, return_grad=True)
        num = np.zeros(4)
        for i in range(4):
            e = np.zeros(4)
            e[i] = 1e-6
            num[i] = (giou_loss(b + e, t) - giou_loss(b - e, t)) / 2e-6
        np.testing.assert_allclose(g, num, atol=1e-6)


def test_l1_fixture():
    assert l1_box_loss([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.4]) == pytest.approx(0.05, abs=1e-15)
    assert l1_box_loss([0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3, 0.4]) == 0


def test_composite_stage13():
    w = LossWeights()
    assert (w.giou, w.l1, w.kl) == (2.0, 5.0, 800.0)
    composite = 2 * OVERLAP_LOSS + 5 * 0.05
    assert composite == pytest.approx(2.4088, abs=1e-4)
    # pair of boxes with the overlap-loss geometry scaled into the unit square and l1 == 0.05
    b = _c([0, 0, 2, 2])
    t = _c([1, 1, 2, 2])
    l1 = l1_box_loss(b, t)
    assert composite_loss_stage13(b, t, w) == pytest.approx(2 * OVERLAP_LOSS + 5 * l1, abs=1e-13)
    assert composite_loss_stage13(b, t, LossWeights(2, 0, 800)) == pytest.approx(2 * OVERLAP_LOSS, abs=1e-13)


def test_stage2_takes_the_smaller_modality_loss():
    w = LossWeights(giou=0, l1=4, kl=800)
    gt = np.array([0.5, 0.5, 0.2, 0.2])
    b_v = gt + np.array([0.3, 0, 0, 0])      # L1 = 0.075 -> loss 0.3
    b_t = gt + np.array([0.5, 0, 0, 0])      # loss 0.5
    assert composite_loss_stage2(b_v, gt, b_t, gt, 0.0, w) == pytest.approx(0.3, abs=1e-14)
    assert composite_loss_stage2(b_t, gt, b_v, gt, 0.0, w) == pytest.approx(0.3, abs=1e-14)
    extra = composite_loss_stage2(b_v, gt, b_t, gt, 1e-4, w) - composite_loss_stage2(b_v, gt, b_t, gt, 0.0, w)
    assert extra == pytest.approx(0.08, abs=1e-14)


def test_stage2_gradient_routing_and_ties():
    w = LossWeights()
    gt = np.array([[0.5, 0.5, 0.2, 0.2]])
    b = gt + 0.05
    total, gv, gt_grad, pick_v = composite_loss_stage2(b, gt, b.copy(), gt, 0.0, w, return_grad=True)
    assert pick_v.all()
    assert np.any(gv) and not np.any(gt_grad)
    far = gt + 0.2
    _, gv, gt_grad, pick_v = composite_loss_stage2(far, gt, b, gt, 0.0, w, return_grad=True)
    assert not pick_v.any() and not np.any(gv) and np.any(gt_grad)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(giou=-1)
