import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    TOY_ANCHORS,
    TOY_GRIDS,
    TOY_SIDE,
    box_iou_scalar,
    classification_case,
    diou_case,
    focal_grad_closed_form,
    objectness_case,
    random_box,
    total_case,
    toy_labels,
)
from voxdet.anchors import AnchorSet
from voxdet.boxes import Box3
from voxdet.loss import (
    Hyperparameters,
    NonFiniteValue,
    assign_targets,
    box_iou_t,
    classification_loss,
    diou_box_loss,
    diou_t,
    gradient_check,
    objectness_loss,
    total_loss,
)

LN2 = math.log(2)


def test_diou_examples():
    b = Box3(0, (0.5, 0.5, 0.5), (0.2, 0.3, 0.4))
    assert diou_box_loss(b, b) == pytest.approx(0.0, abs=1e-12)
    half = Box3(0, (0.5, 0.5, 0.5), (0.1, 0.15, 0.2))
    assert diou_box_loss(half, b) == pytest.approx(0.875, abs=1e-12)
    a = [0.0, 0.0, 0.0, 0.1, 0.1, 0.1]
    c = [0.5, 0.0, 0.0, 0.1, 0.1, 0.1]
    assert box_iou_scalar(a, c) == 0.0
    assert diou_box_loss(a, c) == pytest.approx(1 + 0.25 / 0.38, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_diou_against_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    p, t = random_box(rng), random_box(rng)
    iou = box_iou_scalar(p, t)
    lo = np.minimum(p[:3] - p[3:] / 2, t[:3] - t[3:] / 2)
    hi = np.maximum(p[:3] + p[3:] / 2, t[:3] + t[3:] / 2)
    expected = 1 - iou + np.sum((p[:3] - t[:3]) ** 2) / np.sum((hi - lo) ** 2)
    got = diou_box_loss(p, t)
    assert got == pytest.approx(expected, abs=1e-10)
    assert got >= 0
    assert float(box_iou_t(torch.tensor(p), torch.tensor(t))) == pytest.approx(iou, abs=1e-10)


def test_objectness_examples():
    z = torch.zeros(1, 1, 1, 1, 1, dtype=torch.float64)
    assert float(objectness_loss([z], [z], (1.0,))) == pytest.approx(LN2, abs=1e-12)
    neg = torch.full((1, 2, 3, 3, 3), -60.0, dtype=torch.float64)
    assert float(objectness_loss([neg], [torch.zeros_like(neg)], (4.0,))) < 1e-20
    pos = torch.full((1, 1, 1, 1, 1), 60.0, dtype=torch.float64)
    assert float(objectness_loss([pos], [torch.ones_like(pos)], (1.0,))) < 1e-20


def test_objectness_balance_weights():
    a = torch.zeros(1, 1, 2, 2, 2, dtype=torch.float64)
    b = torch.zeros(1, 1, 1, 1, 1, dtype=torch.float64)
    got = objectness_loss([a, b], [torch.zeros_like(a), torch.zeros_like(b)], (4.0, 0.4))
    assert float(got) == pytest.approx(4.4 * LN2, abs=1e-12)


def test_classification_examples():
    logits = torch.tensor([[60.0, -60.0, -60.0]], dtype=torch.float64)
    assert float(classification_loss(logits, [0])) < 1e-20
    assert float(classification_loss(torch.zeros(4, 3, dtype=torch.float64), [0, 1, 2, 0])) == pytest.approx(LN2, abs=1e-12)
    assert float(classification_loss(torch.randn(5, 1, dtype=torch.float64), [0] * 5)) == 0.0


def test_focal_scaling():
    # p_t = 0.9 for a positive: logit = ln 9
    x = torch.tensor([[math.log(9.0)]], dtype=torch.float64)
    t = torch.ones_like(x)
    from voxdet.loss import _bce

    plain = float(_bce(x, t, 0.0))
    focal = float(_bce(x, t, 2.0))
    assert focal == pytest.approx(plain * 0.01, rel=1e-12)


@pytest.mark.parametrize("target", [0, 1])
@pytest.mark.parametrize("gamma", [0.0, 2.0])
def test_focal_gradient_closed_form_saturated(target, gamma):
    # covers the logit range where finite differences lose resolution
    xs = np.linspace(-15, 15, 61)
    for x0 in xs:
        x = torch.tensor([[x0, 0.0]], dtype=torch.float64, requires_grad=True)
        cls = [0] if target == 1 else [1]
        loss = classification_loss(x, cls, gamma) * 2  # undo the mean over 2 entries
        (g,) = torch.autograd.grad(loss, x)
        want = focal_grad_closed_form(x0, target, gamma)
        assert float(g[0, 0]) == pytest.approx(want, rel=1e-9, abs=1e-300)


def test_gradient_check_quadratic():
    a = torch.tensor([[3.0, 1.0], [1.0, 2.0]], dtype=torch.float64)
    assert gradient_check(lambda x: x @ a @ x + x.sum(), [0.3, -1.7]) < 1e-9


def test_gradient_check_nonfinite():
    with pytest.raises(NonFiniteValue):
        gradient_check(lambda x: torch.log(x).sum(), [-1.0, 2.0])


@pytest.mark.parametrize(
    "case",
    [diou_case, objectness_case, lambda r: classification_case(r, 0.0), lambda r: classification_case(r, 2.0)],
    ids=["diou", "objectness", "cls_gamma0", "cls_gamma2"],
)
def test_gradient_contract_components(case):
    rng = np.random.default_rng(1234)
    worst = max(gradient_check(*case(rng)) for _ in range(100))
    assert worst < 1e-4


def test_gradient_contract_total_sampled():
    # the full 100-configuration run lives in the acceptance suite
    rng = np.random.default_rng(99)
    worst = max(gradient_check(*total_case(rng, batch=int(rng.integers(1, 3)))) for _ in range(8))
    assert worst < 1e-4


def make_anchor_set(a):
    return AnchorSet(np.array([a], dtype=float), num_scales=1)


def test_assignment_ratio_filter():
    anchors = make_anchor_set([8.0, 8.0, 8.0])
    same = Box3(0, (0.3, 0.3, 0.3), (8 / 64, 8 / 64, 8 / 64))
    assert assign_targets([[same]], anchors, (8,), 64).num_positives > 0
    big = Box3(0, (0.3, 0.3, 0.3), (40 / 64, 8 / 64, 8 / 64))
    a = assign_targets([[big]], anchors, (8,), 64)
    assert a.num_positives == 0 and a.unmatched == 1


def test_assignment_cell_center_gives_one_cell():
    anchors = make_anchor_set([8.0, 8.0, 8.0])
    box = Box3(0, (3.5 / 8, 4.5 / 8, 5.5 / 8), (0.125, 0.125, 0.125))
    a = assign_targets([[box]], anchors, (8,), 64)
    assert a.num_positives == 1
    np.testing.assert_array_equal(a.scales[0].cells, [[3, 4, 5]])


def test_assignment_neighbours():
    anchors = make_anchor_set([8.0, 8.0, 8.0])
    box = Box3(0, (3.2 / 8, 4.7 / 8, 5.5 / 8), (0.125, 0.125, 0.125))
    a = assign_targets([[box]], anchors, (8,), 64)
    assert sorted(map(tuple, a.scales[0].cells.tolist())) == [(2, 4, 5), (3, 4, 5), (3, 5, 5)]
    # at most 4 cells, center plus one neighbour per axis
    box = Box3(0, (3.2 / 8, 4.7 / 8, 5.9 / 8), (0.125, 0.125, 0.125))
    assert assign_targets([[box]], anchors, (8,), 64).num_positives == 4


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_assignment_invariants(seed):
    rng = np.random.default_rng(seed)
    labels = [toy_labels(rng, 3) for _ in range(2)]
    a = assign_targets(labels, TOY_ANCHORS, TOY_GRIDS, TOY_SIDE)
    for st_, g, anc in zip(a.scales, TOY_GRIDS, TOY_ANCHORS.per_scale):
        if not len(st_):
            continue
        ratio = st_.boxes[:, 3:] * TOY_SIDE / st_.anchors
        assert np.all(np.maximum(ratio, 1 / ratio) < 4.0)
        center_cell = np.clip(np.floor(st_.boxes[:, :3] * g), 0, g - 1)
        assert np.all(np.abs(st_.cells - center_cell).sum(axis=1) <= 1)
        keys = set(zip(st_.batch, st_.anchor, *st_.cells.T))
        assert len(keys) == len(st_)


def test_assignment_last_gt_wins():
    anchors = make_anchor_set([8.0, 8.0, 8.0])
    first = Box3(0, (3.5 / 8, 3.5 / 8, 3.5 / 8), (0.125, 0.125, 0.125))
    second = Box3(2, (3.5 / 8, 3.5 / 8, 3.5 / 8), (0.12, 0.13, 0.125))
    st_ = assign_targets([[first, second]], anchors, (8,), 64).scales[0]
    assert len(st_) == 1 and st_.classes[0] == 2 and st_.gt_index[0] == 1


def toy_preds(rng, batch=2, nc=2, scale=1.0):
    return [torch.from_numpy(rng.normal(0, scale, (batch, 1, g, g, g, 7 + nc))) for g in TOY_GRIDS]


def toy_hyp(**kw):
    return Hyperparameters(obj_balance=(4.0, 1.0), **kw)


def test_total_empty_labels_and_zero_gains():
    rng = np.random.default_rng(0)
    preds = toy_preds(rng)
    total, comps = total_loss(preds, [[], []], TOY_ANCHORS, TOY_SIDE, toy_hyp())
    assert comps["box"] == 0 and comps["cls"] == 0
    assert float(total) == pytest.approx(2 * comps["obj"], rel=1e-12)
    labels = [toy_labels(rng, 2), toy_labels(rng, 2)]
    total, _ = total_loss(preds, labels, TOY_ANCHORS, TOY_SIDE, toy_hyp(box_gain=0, obj_gain=0, cls_gain=0))
    assert float(total) == 0.0


def test_total_perfect_prediction_vanishes():
    anchors = AnchorSet(np.array([[4.0, 4.0, 4.0], [20.0, 20.0, 20.0]]), num_scales=2)
    grids = (4, 2)
    box = Box3(1, (1.5 / 4, 2.5 / 4, 0.5 / 4), (4 / 32, 4 / 32, 4 / 32))
    preds = [torch.full((1, 1, g, g, g, 9), -60.0, dtype=torch.float64) for g in grids]
    # box logits 0 decode to the cell center with the anchor's extent
    preds[0][0, 0, 1, 2, 0, :6] = 0.0
    preds[0][0, 0, 1, 2, 0, 6] = 60.0
    preds[0][0, 0, 1, 2, 0, 8] = 60.0
    total, comps = total_loss(preds, [[box]], anchors, 32, toy_hyp())
    assert comps["box"] == pytest.approx(0.0, abs=1e-12)
    assert float(total) < 1e-20


def test_total_linearity_in_obj_gain():
    rng = np.random.default_rng(5)
    preds = toy_preds(rng)
    labels = [toy_labels(rng, 2), toy_labels(rng, 2)]
    t1, c1 = total_loss(preds, labels, TOY_ANCHORS, TOY_SIDE, toy_hyp(obj_gain=1.0))
    t2, c2 = total_loss(preds, labels, TOY_ANCHORS, TOY_SIDE, toy_hyp(obj_gain=2.0))
    assert float(t2 - t1) == pytest.approx(2 * c1["obj"], rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_total_permutation_invariant_over_batch(seed):
    rng = np.random.default_rng(seed)
    batch = 3
    preds = toy_preds(rng, batch=batch)
    labels = [toy_labels(rng, 2) for _ in range(batch)]
    perm = rng.permutation(batch)
    t1, _ = total_loss(preds, labels, TOY_ANCHORS, TOY_SIDE, toy_hyp())
    t2, _ = total_loss([p[perm] for p in preds], [labels[i] for i in perm], TOY_ANCHORS, TOY_SIDE, toy_hyp())
    assert abs(float(t1) - float(t2)) <= 1e-9 * max(1.0, abs(float(t1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 30))
def test_components_finite_and_box_nonnegative(seed, scale):
    rng = np.random.default_rng(seed)
    preds = toy_preds(rng, scale=scale)
    labels = [toy_labels(rng, 2), toy_labels(rng, 2)]
    total, comps = total_loss(preds, labels, TOY_ANCHORS, TOY_SIDE, toy_hyp(focal_gamma=2.0))
    assert all(math.isfinite(v) for v in comps.values())
    assert comps["box"] >= 0


def test_diou_tensor_path_matches_scalar():
    rng = np.random.default_rng(3)
    p = np.stack([random_box(rng) for _ in range(10)])
    t = np.stack([random_box(rng) for _ in range(10)])
    got = diou_t(torch.from_numpy(p), torch.from_numpy(t)).numpy()
    want = [diou_box_loss(a, b) for a, b in zip(p, t)]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_hyperparameter_validation(tmp_path):
    with pytest.raises(ValueError):
        Hyperparameters.from_dict({"lr_zero": 0.1})
    with pytest.raises(ValueError):
        Hyperparameters(patience=1000, epochs_max=1000)
    with pytest.raises(ValueError):
        Hyperparameters(box_gain=-1)
    p = tmp_path / "hyp.yaml"
    p.write_text("lr0: 0.02\nfocal_gamma: 2.0\n")
    h = Hyperparameters.load(p)
    assert h.lr0 == 0.02 and h.focal_gamma == 2.0 and h.patience == 200
