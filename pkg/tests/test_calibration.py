from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from kinseg.calibration import (
    CalibrationFrame,
    HandEyeCalibrator,
    SearchBox,
    evaluate_transform,
    f1_prime,
    iou,
    specificity,
    stochastic_bnb,
)
from kinseg.geometry import pose_from_vector, pose_to_vector
from kinseg.grabcut import GrabcutParams
from kinseg.simulator import frame_seed, perturb_model, preset, render_frame, trajectory

FAST_GC = GrabcutParams(iterations=1, fit_stride=4)


@pytest.fixture(scope="module")
def scene():
    cfg = preset("default", seed=1)
    qs = trajectory(cfg.motion, cfg.true_params, np.arange(4))
    recs = [render_frame(cfg, q, frame_seed(1, i), i) for i, q in enumerate(qs)]
    frames = [CalibrationFrame(r.frame_id, r.image, r.joints) for r in recs]
    return cfg, recs, frames, perturb_model(cfg.true_params, cfg.noise)


def test_iou_examples():
    a = np.zeros((1, 3), bool)
    b = np.zeros((1, 3), bool)
    a[0, :2] = True
    b[0, 1:] = True
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(a, a) == 1 and iou(a, ~a) == 0
    assert iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1
    with pytest.raises(ValueError):
        iou(a, np.zeros((3, 1), bool))


def test_specificity_examples():
    y = np.zeros((10, 20), bool)
    y[:, 10:] = True
    region = np.ones_like(y)
    assert specificity(y, y, region) == 1
    assert specificity(y, region, region) == 0
    h = y.copy()
    h[:5, :5] = True  # 25 of the 100 negatives
    assert specificity(y, h, region) == pytest.approx(0.75)
    assert specificity(y, h, y) == 1  # no negatives inside the region


def test_f1_prime_examples():
    y = np.zeros((1, 16), bool)
    y[0, :8] = True
    assert f1_prime(y, y, np.ones_like(y)) == 1
    # IoU = 5/10 and specificity = 6/8 gives exactly 0.6
    h = np.zeros_like(y)
    h[0, 3:10] = True
    assert iou(y, h) == 0.5 and specificity(y, h, np.ones_like(y)) == 0.75
    assert f1_prime(y, h, np.ones_like(y)) == pytest.approx(0.6, abs=1e-15)
    assert f1_prime(y, ~y, np.ones_like(y)) == 0
    assert f1_prime(y, np.zeros_like(y), np.ones_like(y)) == 0


@settings(max_examples=200, deadline=None)
@given(arrays(bool, (4, 5)), arrays(bool, (4, 5)), arrays(bool, (4, 5)))
def test_f1_prime_between_its_sides(y, h, region):
    a, b = iou(y, h), specificity(y, h, region)
    f = f1_prime(y, h, region)
    assert min(a, b) - 1e-12 <= f <= max(a, b) + 1e-12
    assert f <= 2 * min(a, b) + 1e-12


def test_offscreen_pose_scores_zero(scene):
    cfg, _, frames, model = scene
    behind = pose_from_vector(np.r_[pose_to_vector(cfg.true_T)[:3], 0.0, 0.0, -800.0])
    score, per = evaluate_transform(behind, frames, model, cfg.intrinsics, FAST_GC)
    assert score == 0 and np.all(per == 0)
    with pytest.raises(ValueError):
        evaluate_transform(cfg.true_T, [], model, cfg.intrinsics)


def test_view_filling_tube_scores_zero(scene):
    cfg, _, frames, model = scene
    fat = replace(model, tube_radius=1e4)
    score, per = evaluate_transform(cfg.true_T, frames, fat, cfg.intrinsics, FAST_GC)
    assert score == 0 and np.all(per == 0)


def test_evaluate_deterministic_and_thread_invariant(scene):
    cfg, _, frames, model = scene
    a = evaluate_transform(cfg.true_T, frames, model, cfg.intrinsics, FAST_GC, seed=3, threads=1)
    b = evaluate_transform(cfg.true_T, frames, model, cfg.intrinsics, FAST_GC, seed=3, threads=1)
    c = evaluate_transform(cfg.true_T, frames, model, cfg.intrinsics, FAST_GC, seed=3, threads=3)
    assert a[0] == b[0] == c[0]
    assert np.array_equal(a[1], c[1])


def test_true_pose_beats_prior(scene):
    cfg, _, frames, model = scene
    good = evaluate_transform(cfg.true_T, frames, model, cfg.intrinsics, FAST_GC)[0]
    prior = evaluate_transform(pose_from_vector(cfg.prior_vector), frames, model, cfg.intrinsics, FAST_GC)[0]
    assert good > prior


def test_search_box():
    box = SearchBox.around(np.zeros(6))
    np.testing.assert_allclose(box.extent, [np.deg2rad(30)] * 3 + [60.0] * 3)
    lo, hi = box.split(box.extent)
    assert np.array_equal(lo.lower, box.lower) and np.array_equal(hi.upper, box.upper)
    assert lo.upper[0] == hi.lower[0] == 0.0
    np.testing.assert_array_equal(lo.upper[1:], box.upper[1:])
    edge = SearchBox.around([3.1, 0, 0, 0, 0, 0])
    assert edge.upper[0] == np.pi
    with pytest.raises(ValueError):
        SearchBox(np.ones(6), np.zeros(6))
    with pytest.raises(ValueError):
        SearchBox(np.full(6, -4.0), np.zeros(6))


def _stub(v0, diam):
    return lambda v, it: -np.linalg.norm(v - v0) / diam


def test_stub_cost_converges_over_seeds():
    box = SearchBox.around(np.zeros(6))
    diam = np.linalg.norm(box.extent)
    for s in range(20):
        v0 = box.sample(np.random.default_rng(1000 + s))
        best, trace, _ = stochastic_bnb(_stub(v0, diam), box, 300, seed=s)
        assert np.linalg.norm(best - v0) <= 0.05 * diam


def _check_tree(node):
    if not node.children:
        return 1
    a, b = node.children
    d = np.flatnonzero(a.box.upper != node.box.upper)
    assert len(d) == 1
    assert np.array_equal(a.box.lower, node.box.lower) and np.array_equal(b.box.upper, node.box.upper)
    assert a.box.upper[d[0]] == b.box.lower[d[0]]
    assert np.array_equal(np.delete(a.box.upper, d), np.delete(b.box.upper, d))
    assert np.array_equal(np.delete(a.box.lower, d), np.delete(b.box.lower, d))
    assert node.best_value >= max(a.best_value, b.best_value)
    return _check_tree(a) + _check_tree(b)


def test_trace_monotone_tree_valid_and_seeded():
    box = SearchBox.around(np.zeros(6))
    rng = np.random.default_rng(0)
    bumps = rng.uniform(box.lower, box.upper, (5, 6))
    cost = lambda v, it: float(np.max(np.exp(-np.sum(((v - bumps) / box.extent) ** 2, 1) * 20)))
    seen = []
    best, trace, root = stochastic_bnb(cost, box, 120, seed=4, callback=seen.append)
    assert len(seen) == len(trace) == 120
    assert np.all(np.diff(trace.best_values()) >= 0)
    assert _check_tree(root) == 121
    assert sum(1 for _ in root.leaves()) == 121
    assert cost(best, 0) == trace[-1].best_f1 == trace.values().max()
    _, again, _ = stochastic_bnb(cost, box, 120, seed=4)
    assert [r.sample for r in again] == [r.sample for r in trace]
    _, other, _ = stochastic_bnb(cost, box, 120, seed=5)
    assert [r.sample for r in other] != [r.sample for r in trace]


def test_single_iteration_and_errors():
    box = SearchBox.around(np.zeros(6))
    best, trace, _ = stochastic_bnb(lambda v, it: 0.3, box, 1, seed=0)
    assert len(trace) == 1 and np.array_equal(best, trace[0].sample)
    with pytest.raises(ValueError):
        stochastic_bnb(lambda v, it: 0.0, box, 0)
    with pytest.raises(ValueError):
        stochastic_bnb(lambda v, it: 0.0, SearchBox(np.zeros(6), np.zeros(6)), 5)


def test_calibrator_short_run(scene):
    cfg, recs, _, model = scene
    images = [r.image for r in recs]
    joints = [r.joints for r in recs]
    kw = dict(model=model, intrinsics=cfg.intrinsics, center=cfg.prior_vector, iters=6,
              grabcut_params=FAST_GC, seed=2)
    cal = HandEyeCalibrator(**kw).fit(images, joints, gt_masks=[r.gt_mask for r in recs])
    assert len(cal.trace_) == 6 and not np.isnan(cal.trace_.gt_ious()).any()
    assert cal.best_score_ == cal.trace_.values().max()
    labels = cal.transform(joints)
    assert all(m.shape == cfg.intrinsics.shape for m in labels)
    assert 0 <= cal.score(images, joints) <= 1
    np.testing.assert_allclose(cal.T_.as_matrix(), pose_from_vector(cal.best_vector_).as_matrix())
    threaded = HandEyeCalibrator(**kw, threads=2).fit(images, joints)
    assert [r.sample for r in threaded.trace_] == [r.sample for r in cal.trace_]
    assert np.array_equal(threaded.trace_.values(), cal.trace_.values())
    assert np.isnan(threaded.trace_.gt_ious()).all()
