import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import components
from omniseg.aplr import (
    BoxLabel,
    NoneLabel,
    PointLabel,
    Refined,
    RefinerConfig,
    Skip,
    SkipReason,
    nearest_set_distance,
    refine,
    select_box,
    select_point,
)
from omniseg.mask_core import PixelBox, PixelPoint

CFG = RefinerConfig(tau=0.5, binarize_threshold=0.5)


def cfg(**kw):
    return RefinerConfig(**{"tau": 0.5, "binarize_threshold": 0.5, **kw})


def two_blobs():
    p = np.zeros((12, 12))
    p[1:4, 1:4] = 0.9  # blob A
    p[8:11, 7:11] = 0.8  # blob B
    return p


def test_select_point():
    m = np.zeros((5, 5), bool)
    m[1:3, 1:3] = True
    assert select_point(m, PixelPoint(1, 2))
    assert not select_point(np.zeros((5, 5), bool), PixelPoint(1, 2))
    m[4, 4] = True
    m[0, 4] = True
    assert select_point(m, PixelPoint(0, 4))


def test_select_box():
    b = PixelBox(2, 2, 6, 6)
    assert select_box(b.indicator((8, 8)), b, 0.5)
    assert not select_box(np.zeros((8, 8), bool), b, 0.01)
    m = np.zeros((8, 8), bool)
    m[2, 2:5] = m[3, 3] = m[5, 5] = True  # 5 of 16
    assert select_box(m, b, 0.3)
    assert not select_box(m, b, 0.35)


def test_none_label_passes_binarized_mask():
    p = two_blobs()
    out = refine(p, NoneLabel(), CFG)
    np.testing.assert_array_equal(out.mask, p >= 0.5)


def test_point_keeps_single_blob():
    p = np.zeros((8, 8))
    p[2:5, 2:5] = 0.9
    out = refine(p, PointLabel(PixelPoint(3, 3)), CFG)
    assert isinstance(out, Refined)
    np.testing.assert_array_equal(out.mask, p > 0)


def test_point_selects_one_of_two_blobs():
    p = two_blobs()
    out = refine(p, PointLabel(PixelPoint(2, 2)), CFG)
    expected = np.zeros((12, 12), bool)
    expected[1:4, 1:4] = True
    np.testing.assert_array_equal(out.mask, expected)


def test_point_miss_skips():
    out = refine(two_blobs(), PointLabel(PixelPoint(6, 6)), CFG)
    assert out == Skip(SkipReason.NO_COMPONENT_HITS_POINT)


def test_box_keeps_touched_component_only():
    p = two_blobs()
    # box 5x3 over A (3x3 = 9 pixels) with ratio 9/15 = 0.6
    box = PixelBox(0, 1, 5, 4)
    out = refine(p, BoxLabel(box), cfg(tau=0.5))
    expected = np.zeros((12, 12), bool)
    expected[1:4, 1:4] = True
    np.testing.assert_array_equal(out.mask, expected)


def test_box_keeps_whole_component_even_outside_box():
    p = np.zeros((10, 10))
    p[2:6, 2:8] = 0.9
    box = PixelBox(2, 2, 6, 5)
    out = refine(p, BoxLabel(box), cfg(tau=0.5))
    np.testing.assert_array_equal(out.mask, p > 0)


def test_box_skip_reasons():
    box = PixelBox(0, 0, 4, 4)
    assert refine(np.zeros((8, 8)), BoxLabel(box), CFG) == Skip(SkipReason.EMPTY_MASK)
    p = np.zeros((8, 8))
    p[0, 0] = 0.9
    assert refine(p, BoxLabel(box), CFG) == Skip(SkipReason.COVERAGE_BELOW_TAU)
    p[6, 6] = 0.9
    p[:, :] = 0
    p[7, 7] = 0.9  # set pixels only outside the box
    assert refine(p, BoxLabel(box), CFG) == Skip(SkipReason.COVERAGE_BELOW_TAU)


def test_out_of_bounds_label():
    with pytest.raises(ValueError):
        refine(np.zeros((4, 4)), PointLabel(PixelPoint(4, 0)), CFG)
    with pytest.raises(ValueError):
        refine(np.zeros((4, 4)), BoxLabel(PixelBox(0, 0, 5, 2)), CFG)


def test_no_filtering_never_skips():
    p = two_blobs()
    hit = refine(p, PointLabel(PixelPoint(2, 2)), cfg(strategy="no_filtering"))
    np.testing.assert_array_equal(hit.mask, refine(p, PointLabel(PixelPoint(2, 2)), CFG).mask)
    miss = refine(p, PointLabel(PixelPoint(6, 6)), cfg(strategy="no_filtering"))
    np.testing.assert_array_equal(miss.mask, p >= 0.5)


@given(arrays(float, (9, 9), elements=st.floats(0, 1)), st.integers(0, 8), st.integers(0, 8))
@settings(max_examples=100)
def test_no_filtering_skip_rate_zero(p, r, c):
    assert isinstance(refine(p, PointLabel(PixelPoint(r, c)), cfg(strategy="no_filtering")), Refined)


def test_point_distance():
    p = np.zeros((64, 64))
    p[10, 10] = 0.9
    on = refine(p, PointLabel(PixelPoint(10, 10)), cfg(strategy="point_distance", distance_delta=0.05))
    np.testing.assert_array_equal(on.mask, p > 0)
    empty = refine(np.zeros((64, 64)), PointLabel(PixelPoint(3, 3)), cfg(strategy="point_distance"))
    assert empty == Skip(SkipReason.DISTANCE_EXCEEDED)
    far = PointLabel(PixelPoint(13, 14))  # 3-4-5 triangle, 5 px away
    assert nearest_set_distance(p >= 0.5, far.point) == 5.0
    assert 5 / math.hypot(64, 64) == pytest.approx(0.0552, abs=1e-4)
    assert refine(p, far, cfg(strategy="point_distance", distance_delta=0.05)) == Skip(SkipReason.DISTANCE_EXCEEDED)
    assert isinstance(refine(p, far, cfg(strategy="point_distance", distance_delta=0.06)), Refined)


def test_box_suppress():
    box = PixelBox(2, 2, 6, 6)
    inside = np.zeros((8, 8))
    inside[3:5, 3:5] = 0.9
    out = refine(inside, BoxLabel(box), cfg(strategy="box_suppress"))
    np.testing.assert_array_equal(out.mask, inside > 0)
    outside = np.zeros((8, 8))
    outside[7, :] = 0.9
    assert not refine(outside, BoxLabel(box), cfg(strategy="box_suppress")).mask.any()
    straddle = np.zeros((8, 8))
    straddle[4, 0:8] = 0.9
    expected = np.zeros((8, 8), bool)
    for c in range(8):
        expected[4, c] = 2 <= c < 6
    np.testing.assert_array_equal(refine(straddle, BoxLabel(box), cfg(strategy="box_suppress")).mask, expected)


def test_avg_confidence():
    box = PixelBox(0, 0, 4, 4)
    p = np.zeros((6, 6))
    p[0:2, 0:2] = 0.9
    out = refine(p, BoxLabel(box), cfg(strategy="avg_confidence", conf_threshold=0.5))
    assert isinstance(out, Refined)
    p2 = np.zeros((6, 6))
    p2[5, 5] = 0.9
    assert refine(p2, BoxLabel(box), cfg(strategy="avg_confidence")) == Skip(SkipReason.CONFIDENCE_BELOW_THRESHOLD)
    p3 = np.zeros((6, 6))
    p3[0, 0], p3[1, 1], p3[2, 2] = 0.6, 0.8, 0.4  # 0.4 falls below the 0.5 binarize threshold
    p3[5, 5] = 0.99  # positive but outside the box
    c = cfg(strategy="avg_confidence", conf_threshold=0.75)
    assert refine(p3, BoxLabel(box), c) == Skip(SkipReason.CONFIDENCE_BELOW_THRESHOLD)
    assert isinstance(refine(p3, BoxLabel(box), cfg(strategy="avg_confidence", conf_threshold=0.7)), Refined)


def test_strategy_label_mismatch():
    with pytest.raises(ValueError):
        refine(np.zeros((4, 4)), BoxLabel(PixelBox(0, 0, 2, 2)), cfg(strategy="point_distance"))
    with pytest.raises(ValueError):
        refine(np.zeros((4, 4)), PointLabel(PixelPoint(0, 0)), cfg(strategy="box_suppress"))
    with pytest.raises(ValueError):
        RefinerConfig(strategy="magic")
    with pytest.raises(ValueError):
        RefinerConfig(tau=1.0)


prob_grids = arrays(float, st.tuples(st.integers(2, 14), st.integers(2, 14)), elements=st.floats(0, 1))
strategies = st.sampled_from(["aplr", "no_filtering", "point_distance", "box_suppress", "avg_confidence"])


@st.composite
def refine_cases(draw):
    p = draw(prob_grids)
    h, w = p.shape
    strategy = draw(strategies)
    if strategy in ("no_filtering", "point_distance") or (strategy == "aplr" and draw(st.booleans())):
        label = PointLabel(PixelPoint(draw(st.integers(0, h - 1)), draw(st.integers(0, w - 1))))
    else:
        r0, c0 = draw(st.integers(0, h - 1)), draw(st.integers(0, w - 1))
        label = BoxLabel(PixelBox(r0, c0, draw(st.integers(r0 + 1, h)), draw(st.integers(c0 + 1, w))))
    c = cfg(strategy=strategy, tau=draw(st.floats(0.05, 0.95)), binarize_threshold=draw(st.floats(0.05, 0.95)))
    return p, label, c


@given(refine_cases())
@settings(max_examples=300)
def test_refined_is_subset_of_binarized_and_deterministic(case):
    p, label, c = case
    out = refine(p, label, c)
    again = refine(p, label, c)
    assert type(out) is type(again)
    if isinstance(out, Refined):
        assert out.mask.shape == p.shape
        assert not (out.mask & ~(p >= c.binarize_threshold)).any()
        np.testing.assert_array_equal(out.mask, again.mask)
    else:
        assert out == again


@given(prob_grids, st.data())
@settings(max_examples=200)
def test_point_refinement_is_one_component_holding_the_point(p, data):
    h, w = p.shape
    pt = PixelPoint(data.draw(st.integers(0, h - 1)), data.draw(st.integers(0, w - 1)))
    out = refine(p, PointLabel(pt), CFG)
    if isinstance(out, Refined):
        assert out.mask[pt.row, pt.col]
        assert any(np.array_equal(out.mask, comp) for comp in components(p >= 0.5))


@given(prob_grids, st.data())
@settings(max_examples=200)
def test_box_refinement_components_touch_box(p, data):
    h, w = p.shape
    r0, c0 = data.draw(st.integers(0, h - 1)), data.draw(st.integers(0, w - 1))
    box = PixelBox(r0, c0, data.draw(st.integers(r0 + 1, h)), data.draw(st.integers(c0 + 1, w)))
    out = refine(p, BoxLabel(box), cfg(tau=0.1))
    if isinstance(out, Refined):
        inside = box.indicator(p.shape)
        for comp in components(p >= 0.5):
            touches = (comp & inside).any()
            kept = (comp & out.mask).any()
            assert touches == kept
