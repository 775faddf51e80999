import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import copy_detections, random_layout
from aerialsynth.detector_io import fit_class_score_model
from aerialsynth.geometry import Annotation, BBox, Detection
from aerialsynth.refine import (
    ADDED_FALSE_GEN,
    KEPT,
    KEPT_REPLACED,
    DetectorNoise,
    RefineConfig,
    RefinedLabel,
    RefineReport,
    label_quality,
    match_labels,
    refine,
    simulate_detections,
    simulate_detector,
)


def _model(scores_by_class):
    dets = [Detection(1, BBox(0, 0, 1, 1), c, s) for c, ss in scores_by_class.items() for s in ss]
    return fit_class_score_model(dets)


SPREAD = _model({1: list(np.linspace(0.05, 0.95, 19)), 2: list(np.linspace(0.05, 0.95, 19))})


def _a(x, y=0, w=10, h=10, c=1):
    return Annotation(1, BBox(x, y, w, h), c)


def _d(x, y=0, w=10, h=10, c=1, s=0.9):
    return Detection(1, BBox(x, y, w, h), c, s)


def test_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(tau_ref=0)
    with pytest.raises(ValueError):
        RefineConfig(alpha=1.0)
    RefineConfig(tau_ref=1.0)


def test_match_labels_examples():
    gts = [_a(0), _a(50)]
    assert match_labels(gts, copy_detections(gts), 0.5) == {0: 0, 1: 1}
    # iou 0.7 vs 0.9 on a single GT; 0.9 wins
    d07 = _d(0, w=10, h=7)
    d09 = _d(0, w=10, h=9)
    assert match_labels([_a(0)], [d07, d09], 0.5) == {0: 1}
    assert match_labels([_a(0)], [_d(100)], 0.5) == {}
    # class-agnostic
    assert match_labels([_a(0, c=1)], [_d(0, c=2)], 0.5) == {0: 0}


def test_refine_exact_copies_median_levels_all_replaced():
    gts = [_a(0), _a(30, c=2), _a(60)]
    dets = copy_detections(gts, 1.0)
    out, rep = refine(gts, dets, SPREAD, RefineConfig(alpha=0.5, beta=0.5, gamma=0.5))
    assert [r.provenance for r in out] == [KEPT_REPLACED] * 3
    assert [(r.bbox, r.class_id) for r in out] == [(a.bbox, a.category_id) for a in gts]
    assert rep.n_replaced == 3 and rep.n_output == 3


def test_refine_missed_label_dropped():
    gts = [_a(0), _a(50)]
    out, rep = refine(gts, [_d(0, s=0.5)], SPREAD)
    assert [r.bbox for r in out] == [gts[0].bbox] and out[0].provenance == KEPT
    assert rep.n_missed_dropped == 1 and rep.n_low_conf_dropped == 0


def test_refine_false_generation_added():
    out, rep = refine([], [_d(5, s=0.97)], SPREAD)
    assert len(out) == 1 and out[0].provenance == ADDED_FALSE_GEN and out[0].matched_score == 0.97
    out, rep = refine([], [_d(5, s=0.5)], SPREAD)
    assert out == [] and rep.n_false_added == 0


def test_refine_low_conf_and_replacement_takes_det_class():
    gts = [_a(0), _a(50)]
    dets = [_d(0, s=0.01), _d(50.5, c=2, s=0.99)]
    out, rep = refine(gts, dets, SPREAD)
    assert rep.n_low_conf_dropped == 1 and rep.n_replaced == 1
    assert out == [RefinedLabel(dets[1].bbox, 2, KEPT_REPLACED, 0.99, 1, 1)]


def test_refine_gamma_is_strict():
    m = _model({1: [0.5] * 40})  # sigma 0: every quantile is 0.5
    out, _ = refine([_a(0)], [_d(0, s=0.5)], m, RefineConfig())
    assert out[0].provenance == KEPT


def test_refine_unfitted_class_counts_warning():
    out, rep = refine([_a(0)], [_d(0, c=7, s=0.99), _d(80, c=7, s=0.99)], SPREAD)
    assert out == [] and rep.n_warnings >= 1 and rep.n_low_conf_dropped == 1


def test_report_add_and_check():
    a = RefineReport(3, 1, 0, 2, 1, 4)
    b = RefineReport(1, 0, 1, 0, 0, 0)
    s = a + b
    assert s.n_input == 4 and s.n_output == 4
    s.check()
    with pytest.raises(AssertionError):
        RefineReport(1, 0, 0, 0, 0, 5).check()


def _noisy_fixture(seed):
    rng = np.random.default_rng(seed)
    gts = random_layout(rng, int(rng.integers(0, 12)), (128, 128), classes=(1, 2))
    sim = simulate_detections(gts, DetectorNoise(0.2, 0.3, 1.5, class_scores={1: (0.6, 0.2), 2: (0.7, 0.2)}),
                              seed, (128, 128), classes=(1, 2))
    return gts, sim.detections


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_refine_monotone_in_alpha_and_beta(seed, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    gts, dets = _noisy_fixture(seed)
    _, r_lo = refine(gts, dets, SPREAD, RefineConfig(alpha=lo, beta=lo))
    _, r_hi = refine(gts, dets, SPREAD, RefineConfig(alpha=hi, beta=hi))
    kept = lambda r: r.n_input - r.n_missed_dropped - r.n_low_conf_dropped
    assert kept(r_hi) <= kept(r_lo)
    assert r_hi.n_false_added <= r_lo.n_false_added
    r_lo.check()
    r_hi.check()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_added_labels_never_replaced(seed):
    gts, dets = _noisy_fixture(seed)
    out, rep = refine(gts, dets, SPREAD, RefineConfig(beta=0.2, gamma=0.05))
    added = [r for r in out if r.provenance == ADDED_FALSE_GEN]
    assert all(r.real_index is None for r in added)
    assert rep.n_replaced == sum(r.provenance == KEPT_REPLACED for r in out)


def test_tau_one_disjoint_detections():
    gts = [_a(0), _a(20)]
    dets = [_d(60, s=0.99), _d(90, s=0.2)]
    out, rep = refine(gts, dets, SPREAD, RefineConfig(tau_ref=1.0))
    assert rep.n_missed_dropped == 2
    assert [r.provenance for r in out] == [ADDED_FALSE_GEN] and out[0].bbox == dets[0].bbox


def test_refine_idempotent_on_fixed_point():
    gts = random_layout(np.random.default_rng(4), 10, (128, 128))
    dets = copy_detections(gts)
    m = fit_class_score_model(dets)
    out1, _ = refine(gts, dets, m)
    again = [Annotation(1, r.bbox, r.class_id) for r in out1]
    out2, _ = refine(again, copy_detections(again), fit_class_score_model(copy_detections(again)))
    assert [(r.bbox, r.class_id) for r in out2] == [(r.bbox, r.class_id) for r in out1]


def test_simulator_examples():
    gts = random_layout(np.random.default_rng(0), 6, (128, 128))
    clean = simulate_detector(gts, DetectorNoise(score_mu=0.7, score_sigma=0.0), 1)
    assert [(d.bbox, d.category_id, d.score) for d in clean] == [(a.bbox, a.category_id, 0.7) for a in gts]
    sim = simulate_detections(gts, DetectorNoise(miss_rate=1.0, false_rate=1.0), 3)
    assert all(s is None for s in sim.sources) and sim.missed == list(range(6))
    a = simulate_detections(gts, DetectorNoise(0.3, 0.5, 2.0), 9)
    b = simulate_detections(gts, DetectorNoise(0.3, 0.5, 2.0), 9)
    assert a == b
    with pytest.raises(ValueError):
        DetectorNoise(miss_rate=1.5)
    with pytest.raises(ValueError):
        DetectorNoise(jitter_std_px=-1)


def test_label_quality_examples():
    truth = [_a(0), _a(50)]
    exact = [RefinedLabel(t.bbox, t.category_id, KEPT) for t in truth]
    q = label_quality(exact, truth)
    assert (q.precision, q.recall) == (1.0, 1.0)
    q = label_quality([], truth)
    assert q.precision == 1.0 and q.precision_undefined and q.recall == 0.0
    q = label_quality(exact[:1], truth)
    assert q.recall == 0.5 and q.precision == 1.0
    wrong_class = [RefinedLabel(truth[0].bbox, 2, KEPT)]
    assert label_quality(wrong_class, truth).precision == 0.0
