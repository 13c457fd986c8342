import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakdet.errors import AnnotationError, CalibrationError, ConfigError, DataError
from weakdet.postprocess import (BoundingBox, Detection, PostprocessConfig, box_from_moments,
                                 calibrate_betas, decide, detect, fit_betas, read_detections,
                                 weighted_center, weighted_std, write_detections)

from oracles import center_loop, std_loop


def random_mask(rng, h=24, w=24):
    conf = rng.random((h, w)) ** 3
    y0, x0 = rng.integers(0, h - 6), rng.integers(0, w - 6)
    conf[y0:y0 + rng.integers(2, 6), x0:x0 + rng.integers(2, 6)] += 0.5
    return np.clip(conf, 0, 1)


# ------------------------------------------------------------------ center

def test_center_single_pixel():
    conf = np.zeros((32, 32))
    conf[20, 10] = 0.9
    assert weighted_center(conf, 0.5) == (10.0, 20.0)


def test_center_uniform_rectangle():
    conf = np.zeros((20, 20))
    conf[4:9, 3:12] = 0.7
    assert weighted_center(conf, 0.5) == pytest.approx((7.0, 6.0))


def test_center_hand_value():
    conf = np.zeros((1, 4))
    conf[0, 0], conf[0, 3] = 0.6, 0.9
    assert weighted_center(conf, 0.5)[0] == pytest.approx(1.8, rel=1e-12)


def test_center_empty():
    assert weighted_center(np.full((4, 4), 0.2), 0.5) is None


# --------------------------------------------------------------------- std

def test_std_single_pixel_is_zero():
    conf = np.zeros((5, 5))
    conf[2, 3] = 0.8
    assert weighted_std(conf, 0.5, (3.0, 2.0)) == (0.0, 0.0)


def test_std_two_pixels_hand_value():
    conf = np.zeros((1, 3))
    conf[0, 0] = conf[0, 2] = 0.7
    c = weighted_center(conf, 0.5)
    assert c[0] == pytest.approx(1.0)
    assert weighted_std(conf, 0.5, c)[0] == pytest.approx(math.sqrt(2), rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_moments_match_loops(seed):
    rng = np.random.default_rng(seed)
    for _ in range(250):
        conf = random_mask(rng, 12, 12)
        thr = rng.uniform(0.3, 0.9)
        c = weighted_center(conf, thr)
        if c is None:
            continue
        ref = center_loop(conf, thr)
        assert c == pytest.approx(ref, rel=1e-9)
        assert weighted_std(conf, thr, c) == pytest.approx(std_loop(conf, thr, ref), rel=1e-9,
                                                           abs=1e-12)


# --------------------------------------------------------------------- box

def test_box_floor_at_zero_spread():
    cfg = PostprocessConfig()
    box = box_from_moments((50.0, 40.0), (0.0, 0.0), cfg)
    assert (box.width, box.height) == (2, 2)
    assert box.center == (50.0, 40.0)


def test_box_hand_extent():
    cfg = PostprocessConfig(beta_x=4.0, beta_y=4.0)
    box = box_from_moments((50.0, 50.0), (5.0, 5.0), cfg)
    assert (box.x_min, box.x_max) == (40.0, 60.0)


def test_box_clipped_near_border():
    cfg = PostprocessConfig(beta_x=4.0, beta_y=4.0)
    box = box_from_moments((1.0, 95.0), (5.0, 5.0), cfg, shape=(96, 96))
    assert box.x_min == 0 and box.y_max == 96
    assert box.x_min < box.x_max and box.y_min < box.y_max


def test_degenerate_box_rejected():
    with pytest.raises(AnnotationError):
        BoundingBox(3, 3, 3, 5)


# -------------------------------------------------------------- calibration

def test_fit_betas_exact():
    s = np.array([[1.0, 2.0], [3.0, 0.5], [2.0, 2.0]])
    assert fit_betas(s, 4 * s) == pytest.approx((4.0, 4.0))


def test_fit_betas_least_squares():
    bx, _ = fit_betas([[1.0, 1.0], [2.0, 1.0]], [[3.0, 1.0], [8.0, 1.0]])
    assert bx == pytest.approx(19 / 5)


def test_fit_betas_errors():
    with pytest.raises(CalibrationError):
        fit_betas(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(CalibrationError):
        fit_betas([[0.0, 0.0]], [[3.0, 3.0]])


def test_calibrate_uniform_boxes_recovers_sqrt12():
    # uniform confidence over a box: sigma = W / sqrt(12) up to the K correction
    masks, boxes = [], []
    for w in (10, 16, 24):
        conf = np.zeros((40, 40))
        conf[5:5 + w, 8:8 + w] = 0.9
        masks.append(conf)
        boxes.append(BoundingBox(8, 5, 8 + w, 5 + w))
    bx, by = calibrate_betas(masks, boxes)
    assert bx == pytest.approx(math.sqrt(12), rel=0.01)
    assert bx == pytest.approx(by)


def test_calibrate_skips_absent_and_empty():
    conf = np.zeros((10, 10))
    with pytest.raises(CalibrationError):
        calibrate_betas([conf, conf], [None, BoundingBox(1, 1, 4, 4)])


# ----------------------------------------------------------------- decide

@pytest.mark.parametrize("m,c,or_,and_", [(True, True, True, True), (True, False, True, False),
                                          (False, True, True, False),
                                          (False, False, False, False)])
def test_decide_truth_table(m, c, or_, and_):
    assert decide(m, c, "or") == or_
    assert decide(m, c, "and") == and_


def test_decide_bad_logic():
    with pytest.raises(ConfigError):
        decide(True, True, "xor")


# -------------------------------------------------------------- detect

def test_detect_empty_mask_classifier_absent():
    d = detect(np.zeros((16, 16)), PostprocessConfig(), False)
    assert not d.present and d.k == 0


def test_detect_classifier_only_falls_back_to_argmax():
    conf = np.zeros((16, 16))
    conf[3, 7] = 0.3
    d = detect(conf, PostprocessConfig(), True)
    assert d.present and d.center == (7.5, 3.5)
    assert not detect(conf, PostprocessConfig(decision_logic="and"), True).present


def test_detect_continuous_center():
    conf = np.zeros((32, 32))
    conf[10:20, 4:12] = 0.9
    d = detect(conf, PostprocessConfig())
    assert d.center == pytest.approx((8.0, 15.0))
    # uniform box, beta = sqrt(12): recovered box close to the true one
    assert d.box.x_min == pytest.approx(4, abs=0.5) and d.box.x_max == pytest.approx(12, abs=0.5)


def test_postprocess_config_validation():
    with pytest.raises(ConfigError):
        PostprocessConfig(sigmoid_threshold=1.0)
    with pytest.raises(ConfigError):
        PostprocessConfig(beta_x=0)
    with pytest.raises(ConfigError):
        PostprocessConfig(decision_logic="xor")


# ------------------------------------------------------ property suite

masks = st.integers(0, 2**32 - 1).map(lambda s: random_mask(np.random.default_rng(s)))


@given(masks, st.floats(0.05, 0.9), st.floats(0.0, 0.09))
@settings(max_examples=100, deadline=None)
def test_threshold_monotonicity(conf, t1, dt):
    t2 = t1 + dt
    k1 = detect(conf, PostprocessConfig(sigmoid_threshold=t1)).k
    k2 = detect(conf, PostprocessConfig(sigmoid_threshold=t2)).k
    assert k2 <= k1
    assert not (np.logical_and(conf >= t2, conf < t1)).any()


@given(masks, st.floats(0.2, 0.9))
@settings(max_examples=100, deadline=None)
def test_center_containment(conf, thr):
    c = weighted_center(conf, thr)
    if c is None:
        return
    ys, xs = np.nonzero(conf >= thr)
    assert xs.min() <= c[0] <= xs.max() and ys.min() <= c[1] <= ys.max()
    d = detect(conf, PostprocessConfig(sigmoid_threshold=thr))
    assert d.box.x_min <= d.center[0] <= d.box.x_max
    assert d.box.y_min <= d.center[1] <= d.box.y_max


@given(st.integers(0, 2**32 - 1), st.integers(-5, 5), st.integers(-5, 5))
@settings(max_examples=100, deadline=None)
def test_translation_equivariance(seed, dx, dy):
    rng = np.random.default_rng(seed)
    small = random_mask(rng, 14, 14)
    a = np.zeros((30, 30))
    b = np.zeros((30, 30))
    a[8:22, 8:22] = small
    b[8 + dy:22 + dy, 8 + dx:22 + dx] = small
    ca, cb = weighted_center(a, 0.5), weighted_center(b, 0.5)
    if ca is None:
        assert cb is None
        return
    assert cb[0] == pytest.approx(ca[0] + dx, abs=1e-9)
    assert cb[1] == pytest.approx(ca[1] + dy, abs=1e-9)
    assert weighted_std(b, 0.5, cb) == pytest.approx(weighted_std(a, 0.5, ca), abs=1e-9)


@given(st.lists(st.tuples(masks, st.booleans()), min_size=1, max_size=8), st.floats(0.3, 0.99))
@settings(max_examples=100, deadline=None)
def test_and_subset_of_or(frames, thr):
    and_cfg = PostprocessConfig(sigmoid_threshold=thr, decision_logic="and")
    or_cfg = PostprocessConfig(sigmoid_threshold=thr, decision_logic="or")
    and_pos = {i for i, (c, p) in enumerate(frames) if detect(c, and_cfg, p).present}
    or_pos = {i for i, (c, p) in enumerate(frames) if detect(c, or_cfg, p).present}
    assert and_pos <= or_pos


@given(st.integers(0, 47), st.integers(0, 47), st.floats(0.5, 1.0))
@settings(max_examples=100, deadline=None)
def test_single_pixel_convention(x, y, v):
    conf = np.zeros((48, 48))
    conf[y, x] = v
    d = detect(conf, PostprocessConfig())
    assert d.k == 1 and d.extra["sigma"] == (0.0, 0.0)
    assert d.center == pytest.approx((x + 0.5, y + 0.5), abs=1e-12)
    assert d.size == (2, 2)


# ------------------------------------------------------------------- CSV

def test_detections_csv_round_trip(tmp_path):
    conf = np.zeros((32, 32))
    conf[5:15, 6:20] = 0.8
    rows = [("s0", 0, detect(conf, PostprocessConfig())), ("s0", 1, Detection(False))]
    write_detections(tmp_path / "d.csv", rows)
    back = read_detections(tmp_path / "d.csv", (32, 32))
    assert not back[("s0", 1)].present
    d = back[("s0", 0)]
    assert d.center == pytest.approx(rows[0][2].center, abs=1e-4)
    assert d.box.x_min == pytest.approx(rows[0][2].box.x_min, abs=1e-4)


def test_detections_csv_bad_header(tmp_path):
    (tmp_path / "d.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_detections(tmp_path / "d.csv")
