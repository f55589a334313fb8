import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protolabel.errors import ConfigError
from protolabel.geometry import Box3D
from protolabel.scene_io import ClassId, Label
from protolabel.css import (
    DEFAULT_TEMPLATES,
    CssConfig,
    TemplateBox,
    css_components,
    css_score,
    distance_score,
    mlo_score,
    score_labels,
    ss_score,
)

CFG = CssConfig()
VEHICLE = DEFAULT_TEMPLATES[ClassId.VEHICLE]
dims = st.floats(0.1, 10.0)


def grid_points(box, r):
    """One point at the centre of every cell of an r x r footprint grid (alpha = 0 box)."""
    u = (np.arange(r) + 0.5) / r - 0.5
    gx, gy = np.meshgrid(u * box.l + box.x, u * box.w + box.y)
    return np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, box.z)])


class TestDistance:
    def test_origin_scores_one(self):
        assert distance_score(Box3D(0, 0, 0, 1, 1, 1), CFG) == 1.0

    def test_range_max_scores_zero(self):
        assert distance_score(Box3D(80.0, 0, 0, 1, 1, 1), CFG) == 0.0
        assert distance_score(Box3D(0, 120.0, 0, 1, 1, 1), CFG) == 0.0

    def test_halfway(self):
        # 3-4-5 triangle scaled to 40 m keeps the 3D norm explicit
        assert distance_score(Box3D(24.0, 32.0, 0, 1, 1, 1), CFG) == pytest.approx(0.5, abs=1e-9)

    @given(st.floats(0, 200), st.floats(0, 200), st.floats(-math.pi, math.pi))
    def test_non_increasing_in_distance(self, d1, d2, theta):
        near, far = sorted((d1, d2))
        a = Box3D(near * math.cos(theta), near * math.sin(theta), 0, 1, 1, 1)
        b = Box3D(far * math.cos(theta), far * math.sin(theta), 0, 1, 1, 1)
        assert distance_score(a, CFG) >= distance_score(b, CFG)


class TestMlo:
    def test_every_cell_filled(self):
        box = Box3D(3, -2, 0.5, 4, 2, 1.5)
        pts = grid_points(box, 12)  # 12 is a common multiple of 2, 4 and 6
        assert mlo_score(box, pts, CFG) == 1.0

    def test_no_points(self):
        assert mlo_score(Box3D(0, 0, 0, 1, 1, 1), np.zeros((0, 4)), CFG) == 0.0

    def test_two_of_four_cells(self):
        cfg = CssConfig(mlo_resolutions=(2,))
        box = Box3D(0, 0, 0, 4, 2, 1)
        pts = [[-1.0, -0.5, 0.0], [-1.2, -0.4, 0.1], [1.0, -0.5, 0.0]]
        assert mlo_score(box, pts, cfg) == 0.5

    def test_outside_points_ignored(self):
        box = Box3D(0, 0, 0, 2, 2, 1)
        assert mlo_score(box, [[5.0, 5.0, 0.0]], CFG) == 0.0

    def test_rotated_box_uses_local_frame(self):
        box = Box3D(0, 0, 0, 4, 2, 1, math.pi / 2)
        local = grid_points(Box3D(0, 0, 0, 4, 2, 1), 12)
        world = local @ np.array([[0, 1, 0], [-1, 0, 0], [0, 0, 1.0]])  # rotate by +90 deg
        assert mlo_score(box, world, CFG) == 1.0

    @given(st.lists(st.tuples(st.floats(-2, 2), st.floats(-1, 1)), min_size=1, max_size=30), st.integers(1, 10))
    @settings(max_examples=100)
    def test_adding_points_never_lowers(self, xy, k):
        box = Box3D(0, 0, 0, 4, 2, 1, 0.3)
        pts = np.array([[x, y, 0.0] for x, y in xy])
        assert mlo_score(box, pts[: min(k, len(pts))], CFG) <= mlo_score(box, pts, CFG)


def kl_reference(b, a):
    qb = np.array(b) / sum(b)
    qa = np.array(a) / sum(a)
    return float(np.sum(qb * np.log(qb / qa)))


class TestSizeSimilarity:
    def test_vehicle_template_value(self):
        assert (VEHICLE.l, VEHICLE.w, VEHICLE.h) == (5.06, 1.86, 1.49)

    @pytest.mark.parametrize("c", [0.25, 1.0, 3.7, 1e3])
    def test_proportional_to_template(self, c):
        box = Box3D(0, 0, 0, 5.06 * c, 1.86 * c, 1.49 * c)
        assert ss_score(box, VEHICLE, CFG) == 1.0

    def test_tall_thin_box_truncated(self):
        assert kl_reference((1, 1, 8), (5.06, 1.86, 1.49)) >= 0.05
        assert ss_score(Box3D(0, 0, 0, 1, 1, 8), VEHICLE, CFG) == 0.0

    def test_small_divergence_is_linear(self):
        b = (4.8, 1.9, 1.55)
        kl = kl_reference(b, (5.06, 1.86, 1.49))
        assert 0 < kl < 0.05
        assert ss_score(Box3D(0, 0, 0, *b), VEHICLE, CFG) == pytest.approx(1 - kl / 0.05, abs=1e-12)

    @given(dims, dims, dims, st.floats(0.01, 100))
    def test_scale_invariant(self, l, w, h, c):
        base = ss_score(Box3D(0, 0, 0, l, w, h), VEHICLE, CFG)
        scaled = ss_score(Box3D(0, 0, 0, l * c, w * c, h * c), VEHICLE, CFG)
        assert scaled == pytest.approx(base, abs=1e-9)
        assert 0.0 <= base <= 1.0

    def test_power_of_two_scale_exact(self):
        box = Box3D(0, 0, 0, 4.7, 1.8, 1.52)
        assert ss_score(box, VEHICLE, CFG) == ss_score(Box3D(0, 0, 0, 9.4, 3.6, 3.04), VEHICLE, CFG)


class TestCombination:
    def test_all_ones(self):
        box = Box3D(0, 0, 0, 5.06, 1.86, 1.49)
        pts = grid_points(box, 12)
        assert css_score(box, pts, ClassId.VEHICLE, CFG) == pytest.approx(1.0, abs=1e-12)

    def test_arithmetic_mean(self):
        # distance 0.6 at 32 m, full occupancy 1.0 would give 0.8667; use a 3-of-4 coarse fill instead
        cfg = CssConfig(mlo_resolutions=(2,))
        box = Box3D(32.0, 0, 0, 5.06, 1.86, 1.49)
        pts = np.array([[31.0, -0.5, 0], [31.0, 0.5, 0], [33.0, 0.5, 0]])
        psi = css_components(box, pts, ClassId.VEHICLE, cfg)
        assert psi == pytest.approx((0.6, 0.75, 1.0), abs=1e-12)
        assert css_score(box, pts, ClassId.VEHICLE, cfg) == pytest.approx((0.6 + 0.75 + 1.0) / 3, abs=1e-12)

    def test_spec_mean_example(self):
        assert sum(w * p for w, p in zip(CFG.weights, (0.6, 0.9, 1.0))) == pytest.approx(0.8333, abs=1e-4)

    def test_missing_template_is_config_error(self):
        with pytest.raises(ConfigError):
            css_score(Box3D(0, 0, 0, 1, 1, 1), [], ClassId.DISCARD_SMALL, CFG)

    def test_score_labels_zero_for_untemplated(self):
        lab = Label(Box3D(0, 0, 0, 0.2, 0.2, 0.2), ClassId.DISCARD_SMALL, 0, 0)
        assert score_labels([lab], [np.zeros((0, 4))], CFG)[0].css == 0.0

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 0.5))
    def test_monotone_in_each_component(self, a, b, c, bump):
        w = CFG.weights
        base = w[0] * a + w[1] * b + w[2] * c
        for i in range(3):
            psi = [a, b, c]
            psi[i] = min(1.0, psi[i] + bump)
            assert sum(wi * p for wi, p in zip(w, psi)) >= base - 1e-15

    @given(
        st.floats(-90, 90), st.floats(-90, 90), dims, dims, dims, st.floats(-4, 4),
        st.sampled_from([ClassId.VEHICLE, ClassId.PEDESTRIAN, ClassId.CYCLIST]),
    )
    @settings(max_examples=100)
    def test_score_in_unit_interval(self, x, y, l, w, h, a, cls):
        box = Box3D(x, y, 0, l, w, h, a)
        pts = np.random.default_rng(0).uniform(-1, 1, (20, 3)) * [l, w, h] + [x, y, 0]
        assert 0.0 <= css_score(box, pts, cls, CFG) <= 1.0


@pytest.mark.parametrize(
    "bad",
    [{"range_max": 0}, {"mlo_resolutions": []}, {"weights": (0.5, 0.5, 0.5)}, {"kl_truncation": 0}],
)
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        CssConfig(**bad)


def test_template_must_be_positive():
    with pytest.raises(ConfigError):
        TemplateBox(1.0, 0.0, 1.0)
