"""Metric suite vs hand fixtures and brute-force oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import oracle_depth_metrics, oracle_psnr, oracle_seg_metrics, oracle_ssim
from tcdepth.metrics import (
    MetricsReport,
    depth_metrics,
    flicker_metric,
    focal_correction,
    merge_reports,
    seg_metrics,
    structural_metrics,
)
from tcdepth.scenegen import SceneConfig, generate_sequence


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------------------
# depth metrics

def test_depth_perfect_prediction():
    gt = rng_for(0).uniform(1, 10, (6, 6))
    m = depth_metrics(gt, gt, max_cap=100.0)
    assert m.abs_rel == 0 and m.sq_rel == 0 and m.rmse == 0 and m.rmse_log == 0
    assert m.delta1 == 1 and m.delta2 == 1 and m.delta3 == 1
    assert m.n_pixels == 36


def test_depth_hand_fixture():
    pred = np.array([[1.0, 2.0, 3.0, 4.0]])
    gt = np.array([[2.0, 2.0, 2.0, 4.0]])
    m = depth_metrics(pred, gt, max_cap=100.0)
    assert m.abs_rel == pytest.approx(0.25, abs=1e-12)
    assert m.sq_rel == pytest.approx(0.25, abs=1e-12)
    assert m.rmse == pytest.approx(math.sqrt(0.5), abs=1e-12)
    # sqrt((ln 2)^2 + (ln 1.5)^2) / 2
    assert m.rmse_log == pytest.approx(0.40151431101872537, abs=1e-12)
    assert m.delta1 == pytest.approx(0.5)
    assert m.delta2 == pytest.approx(0.75)
    assert m.delta3 == pytest.approx(0.75)


def test_depth_matches_oracle_on_random_instances():
    for seed in range(10):
        r = rng_for(seed)
        pred = r.uniform(0.5, 20.0, (8, 8))
        gt = r.uniform(0.5, 20.0, (8, 8))
        mask = r.random((8, 8)) > 0.3
        m = depth_metrics(pred, gt, valid_mask=mask, min_cap=1.0, max_cap=15.0)
        ref = oracle_depth_metrics(pred, gt, valid_mask=mask, min_cap=1.0, max_cap=15.0)
        for key, want in ref.items():
            assert getattr(m, key) == pytest.approx(want, abs=1e-9), key


def test_depth_caps_and_mask_define_valid_set():
    pred = np.full((4, 4), 5.0)
    gt = np.full((4, 4), 5.0)
    gt[0, 0] = 0.5   # below min cap
    gt[0, 1] = 60.0  # above max cap
    mask = np.ones((4, 4), dtype=bool)
    mask[1, 1] = False
    m = depth_metrics(pred, gt, valid_mask=mask, min_cap=1.0, max_cap=50.0)
    assert m.n_pixels == 13


def test_depth_error_paths():
    gt = np.full((2, 2), 5.0)
    with pytest.raises(ValueError):
        depth_metrics(np.zeros((2, 3)), gt)
    with pytest.raises(ValueError):
        depth_metrics(gt, gt, min_cap=0.0)
    with pytest.raises(ValueError):
        depth_metrics(gt, np.full((2, 2), 1000.0), max_cap=50.0)  # nothing valid


@settings(deadline=None, max_examples=30)
@given(st.floats(min_value=0.1, max_value=10.0), st.integers(min_value=0, max_value=10**6))
def test_depth_scale_consistency(scale, seed):
    r = rng_for(seed)
    pred = r.uniform(1.0, 5.0, (6, 6))
    gt = r.uniform(1.0, 5.0, (6, 6))
    a = depth_metrics(pred, gt, min_cap=1e-6, max_cap=1e9)
    b = depth_metrics(pred * scale, gt * scale, min_cap=1e-6, max_cap=1e9)
    assert b.abs_rel == pytest.approx(a.abs_rel, rel=1e-9)
    assert b.rmse_log == pytest.approx(a.rmse_log, rel=1e-9)
    assert b.delta1 == a.delta1 and b.delta2 == a.delta2 and b.delta3 == a.delta3
    assert b.rmse == pytest.approx(a.rmse * scale, rel=1e-9)


@settings(deadline=None, max_examples=30)
@given(st.integers(min_value=0, max_value=10**6))
def test_delta_monotone_and_bounded(seed):
    r = rng_for(seed)
    pred = r.uniform(0.1, 30.0, (5, 5))
    gt = r.uniform(0.1, 30.0, (5, 5))
    m = depth_metrics(pred, gt, min_cap=1e-3, max_cap=100.0)
    assert 0.0 <= m.delta1 <= m.delta2 <= m.delta3 <= 1.0
    assert m.abs_rel >= 0 and m.rmse >= 0 and m.rmse_log >= 0 and m.sq_rel >= 0


# --------------------------------------------------------------------------
# segmentation metrics

def test_seg_perfect():
    labels = rng_for(1).integers(0, 4, (6, 6))
    m = seg_metrics(labels, labels, 4)
    assert m.pixel_accuracy == 1.0
    assert m.mean_iou == 1.0


def test_seg_hand_fixture():
    pred = np.array([[0, 0, 1, 1]])
    gt = np.array([[0, 1, 1, 1]])
    m = seg_metrics(pred, gt, 2)
    assert m.pixel_accuracy == pytest.approx(0.75)
    assert m.per_class_iou[0] == pytest.approx(0.5)
    assert m.per_class_iou[1] == pytest.approx(2.0 / 3.0)
    assert m.mean_iou == pytest.approx((0.5 + 2.0 / 3.0) / 2.0, abs=1e-12)


def test_seg_absent_class_excluded():
    pred = np.array([[0, 1]])
    gt = np.array([[0, 1]])
    m = seg_metrics(pred, gt, 3)
    assert m.excluded_classes == [2]
    assert math.isnan(m.per_class_iou[2])
    assert m.mean_iou == 1.0


def test_seg_matches_oracle_on_random_instances():
    for seed in range(10):
        r = rng_for(seed + 100)
        pred = r.integers(0, 5, (8, 8))
        gt = r.integers(0, 5, (8, 8))
        m = seg_metrics(pred, gt, 5)
        ref = oracle_seg_metrics(pred, gt, 5)
        assert m.pixel_accuracy == pytest.approx(ref["pixel_accuracy"], abs=1e-9)
        assert m.mean_iou == pytest.approx(ref["mean_iou"], abs=1e-9)
        for got, want in zip(m.per_class_iou, ref["per_class_iou"]):
            if math.isnan(want):
                assert math.isnan(got)
            else:
                assert got == pytest.approx(want, abs=1e-9)


def test_seg_rejects_label_overflow():
    with pytest.raises(ValueError):
        seg_metrics(np.array([[3]]), np.array([[0]]), 3)
    with pytest.raises(ValueError):
        seg_metrics(np.array([[0]]), np.array([[5]]), 3)


# --------------------------------------------------------------------------
# structural metrics

def test_structural_perfect_pair():
    x = rng_for(2).uniform(0, 1, (8, 8))
    m = structural_metrics(x, x, 1.0)
    assert m.psnr == 100.0
    assert m.ssim == pytest.approx(1.0, abs=1e-12)


def test_psnr_known_value():
    gt = np.zeros((4, 4))
    pred = np.full((4, 4), 0.5)
    m = structural_metrics(pred, gt, 1.0)
    assert m.psnr == pytest.approx(10.0 * math.log10(1.0 / 0.25), abs=1e-9)


def test_ssim_symmetric():
    r = rng_for(3)
    a = r.uniform(0, 1, (8, 8))
    b = r.uniform(0, 1, (8, 8))
    assert structural_metrics(a, b, 1.0).ssim == pytest.approx(
        structural_metrics(b, a, 1.0).ssim, abs=1e-12)


def test_structural_matches_oracles():
    for seed in range(5):
        r = rng_for(seed + 50)
        a = r.uniform(0, 1, (8, 8))
        b = np.clip(a + r.normal(0, 0.1, (8, 8)), 0, 1)
        m = structural_metrics(a, b, 1.0)
        assert m.psnr == pytest.approx(oracle_psnr(a, b, 1.0), abs=1e-9)
        assert m.ssim == pytest.approx(oracle_ssim(a, b, 1.0), abs=1e-6)


def test_structural_zero_range_rejected():
    x = np.zeros((4, 4))
    with pytest.raises(ValueError):
        structural_metrics(x, x, 0.0)


# --------------------------------------------------------------------------
# flicker

def test_flicker_constant_sequence_zero_flow():
    pred = [np.full((4, 6), 7.0)] * 3
    flow = [np.zeros((4, 6, 2))] * 2
    occ = [np.zeros((4, 6), dtype=bool)] * 2
    assert flicker_metric(pred, flow, occ) == 0.0


def test_flicker_linearity_in_perturbation():
    base = np.full((4, 6), 10.0)
    flow = [np.zeros((4, 6, 2))] * 2
    occ = [np.zeros((4, 6), dtype=bool)] * 2

    def metric(delta):
        seq = [base + delta, base - delta, base + delta]
        return flicker_metric(seq, flow, occ)

    assert metric(0.2) == pytest.approx(0.4, abs=1e-12)
    assert metric(0.4) == pytest.approx(2 * metric(0.2), rel=1e-12)


def test_flicker_gt_floor_on_generated_scene():
    seq = generate_sequence(SceneConfig(
        image_width=96, image_height=32, sequence_length=4, seed=5))
    preds = [f.depth for f in seq.frames]
    flows = [f.flow_to_next for f in seq.frames[:-1]]
    occs = [f.occ_to_next for f in seq.frames[:-1]]
    floor = flicker_metric(preds, flows, occs)
    assert floor >= 0
    noisy = [p + (0.5 if i % 2 else -0.5) for i, p in enumerate(preds)]
    assert flicker_metric(noisy, flows, occs) > floor


def test_flicker_needs_two_frames():
    with pytest.raises(ValueError):
        flicker_metric([np.zeros((2, 2))], [], [])


# --------------------------------------------------------------------------
# focal correction and report plumbing

def test_focal_correction_identity_and_doubling():
    d = rng_for(4).uniform(1, 10, (4, 4))
    assert np.allclose(focal_correction(d, 90.0, 90.0), d)
    assert np.allclose(focal_correction(d, 50.0, 100.0), 2 * d)


@settings(deadline=None, max_examples=25)
@given(st.floats(min_value=1.0, max_value=500.0), st.floats(min_value=1.0, max_value=500.0),
       st.floats(min_value=1.0, max_value=500.0))
def test_focal_correction_composes(f1, f2, f3):
    d = np.array([[2.0, 5.0]])
    once = focal_correction(focal_correction(d, f1, f2), f2, f3)
    direct = focal_correction(d, f1, f3)
    assert np.allclose(once, direct, rtol=1e-12)


def test_focal_correction_rejects_bad_focals():
    with pytest.raises(ValueError):
        focal_correction(np.ones((2, 2)), 0.0, 10.0)


def test_merge_reports_and_kv():
    a = depth_metrics(np.full((2, 2), 5.0), np.full((2, 2), 5.0), max_cap=50.0)
    b = seg_metrics(np.zeros((2, 2), dtype=int), np.zeros((2, 2), dtype=int), 2)
    merged = merge_reports(a, b)
    assert merged.abs_rel == 0.0 and merged.pixel_accuracy == 1.0
    kv = merged.to_kv()
    assert "abs_rel" in kv and "pixel_accuracy" in kv and "iou_0" in kv
    assert "excluded_classes" in kv  # class 1 absent from both
    assert isinstance(merged.format_table(), str)
