import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from protolabel.cst import (
    CstConfig,
    FeatureVector,
    ProposalPair,
    box_contrast_loss,
    css_weight,
    feature_contrast_loss,
    pairs_from_json,
    weighted_detection_loss,
)
from protolabel.errors import ConfigError, DataValidityError, NumericDomainError, UndefinedStatisticError
from protolabel.geometry import Box3D

CFG = CstConfig()
unit = st.floats(0.0, 1.0)
CUBE = Box3D(0, 0, 0, 1, 1, 1)


class TestWeight:
    @pytest.mark.parametrize("s, expected", [(0.3, 0.0), (0.55, 0.5), (0.9, 1.0), (0.4, 0.0), (0.7, 1.0)])
    def test_examples(self, s, expected):
        assert css_weight(s, CFG) == pytest.approx(expected, abs=1e-12)

    @given(unit, unit)
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert css_weight(lo, CFG) <= css_weight(hi, CFG)

    @given(unit)
    def test_flat_ends(self, s):
        w = css_weight(s, CFG)
        assert 0.0 <= w <= 1.0
        if s <= 0.4:
            assert w == 0.0
        if s >= 0.7:
            assert w == 1.0

    @pytest.mark.parametrize("knot", [0.4, 0.7])
    def test_continuous_at_knots(self, knot):
        eps = 1e-9
        assert abs(css_weight(knot + eps, CFG) - css_weight(knot - eps, CFG)) < 1e-8

    def test_bad_thresholds(self):
        with pytest.raises(ConfigError):
            CstConfig(0.7, 0.4)


def pair(weight=1.0, loss_pro=0.0, loss_det=0.0, det=CUBE, proto=CUBE, f_det=(1.0, 0.0), f_proto=(1.0, 0.0)):
    return ProposalPair(det, proto, f_det, f_proto, weight, loss_pro, loss_det)


class TestDetectionLoss:
    def test_all_suppressed(self):
        assert weighted_detection_loss([pair(0.0, 3.0, 4.0), pair(0.0, 1.0, 1.0)]) == 0.0

    def test_single(self):
        assert weighted_detection_loss([pair(1.0, 0.3, 0.7)]) == pytest.approx(1.0, abs=1e-12)

    def test_two_pairs(self):
        assert weighted_detection_loss([pair(1.0, 1, 1), pair(0.5, 2, 2)]) == pytest.approx(2.0, abs=1e-12)

    def test_empty(self):
        with pytest.raises(UndefinedStatisticError):
            weighted_detection_loss([])


class TestFeatureLoss:
    def test_aligned(self):
        assert feature_contrast_loss([pair()]) == pytest.approx(-1.0, abs=1e-12)

    def test_orthogonal(self):
        assert feature_contrast_loss([pair(f_proto=(0.0, 2.0))]) == pytest.approx(0.0, abs=1e-12)

    def test_opposite_half_weight(self):
        assert feature_contrast_loss([pair(0.5, f_det=(1.0, 2.0), f_proto=(-2.0, -4.0))]) == pytest.approx(0.5, abs=1e-9)

    def test_zero_norm(self):
        with pytest.raises(NumericDomainError):
            feature_contrast_loss([pair(f_det=(0.0, 0.0))])

    def test_dimension_mismatch(self):
        with pytest.raises(DataValidityError):
            pair(f_det=(1.0, 0.0, 0.0))

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), unit)
    def test_self_pair(self, v, w):
        if np.linalg.norm(v) < 1e-3:
            return
        assert feature_contrast_loss([pair(w, f_det=v, f_proto=v)]) == pytest.approx(-w, abs=1e-12)


class TestBoxLoss:
    def test_identical(self):
        b = Box3D(1, 2, 0.5, 4, 2, 1.5, 0.3)
        assert box_contrast_loss([pair(det=b, proto=b)]) == 0.0

    def test_half_turn_square(self):
        a = Box3D(1, 2, 0.5, 2, 2, 1.5, 0.3)
        b = Box3D(1, 2, 0.5, 2, 2, 1.5, 0.3 + math.pi)
        assert box_contrast_loss([pair(det=a, proto=b)]) == pytest.approx(0.0, abs=1e-9)

    def test_unit_cubes_offset(self):
        moved = Box3D(0.5, 0, 0, 1, 1, 1)
        assert box_contrast_loss([pair(det=CUBE, proto=moved)]) == pytest.approx(7 / 6, abs=1e-9)

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-4, 4), unit)
    def test_non_negative(self, dx, dy, da, w):
        b = Box3D(dx, dy, 0, 2, 1, 1, da)
        assert box_contrast_loss([pair(w, det=CUBE, proto=b)]) >= 0.0


@given(st.lists(st.tuples(unit, st.floats(0, 5), st.floats(-2, 2), st.floats(-3, 3)), min_size=1, max_size=8), unit)
def test_losses_linear_in_weight(rows, c):
    base = [
        pair(w, loss, loss / 2, proto=Box3D(dx, 0, 0, 1.5, 1, 1, da), f_det=(1.0, dx), f_proto=(da, 1.0))
        for w, loss, dx, da in rows
    ]
    scaled = [
        ProposalPair(p.det_box, p.proto_box, p.det_feat, p.proto_feat, p.weight * c, p.loss_pro, p.loss_det)
        for p in base
    ]
    for fn in (weighted_detection_loss, feature_contrast_loss, box_contrast_loss):
        assert fn(scaled) == pytest.approx(c * fn(base), abs=1e-12)


def test_pairs_from_json():
    doc = {
        "pairs": [
            {"det_box": [0, 0, 0, 1, 1, 1, 0], "proto_box": {"x": 0.5, "y": 0, "z": 0, "l": 1, "w": 1, "h": 1}, "weight": 1}
        ]
    }
    (p,) = pairs_from_json(doc)
    assert p.proto_box.x == 0.5 and p.det_feat is None
    assert box_contrast_loss([p]) == pytest.approx(7 / 6, abs=1e-9)


def test_feature_vector_rejects_nan():
    with pytest.raises(DataValidityError):
        FeatureVector([1.0, float("nan")])
