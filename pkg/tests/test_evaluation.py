import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ap_r40_curve, best_assignment
from protolabel.errors import UndefinedStatisticError
from protolabel.evaluation import (
    MatchResult,
    angle_error,
    average_precision,
    bev_iou,
    error_stats,
    evaluate,
    match_greedy,
    recall_precision,
    spearman,
)
from protolabel.geometry import Box3D
from protolabel.scene_io import ClassId, Label


def lab(x, y=0.0, css=None, frame=0, l=4.0, w=2.0, h=1.5, alpha=0.0, cls=ClassId.VEHICLE):
    return Label(Box3D(x, y, h / 2, l, w, h, alpha), cls, 0, frame, css)


class TestMatching:
    def test_identical_pair(self):
        m = match_greedy([lab(0)], [lab(0)], 0.5)
        assert m.pairs == [(0, 0, 1.0)]

    def test_no_predictions(self):
        m = match_greedy([], [lab(0), lab(10)], 0.5)
        assert m.pairs == [] and m.unmatched_gts == [0, 1]

    def test_crafted_case_matches_exhaustive_oracle(self):
        gts = [lab(0.0), lab(10.0)]
        preds = [lab(0.5, css=0.7), lab(0.2, css=0.9), lab(10.3, css=0.8)]
        m = match_greedy(preds, gts, 0.3)
        iou = np.array([[bev_iou(p.box, g.box) for g in gts] for p in preds])
        assert sorted((p, g) for p, g, _ in m.pairs) == best_assignment(iou, 0.3)
        assert m.unmatched_preds == [0]

    def test_other_frames_never_match(self):
        m = match_greedy([lab(0, frame=1)], [lab(0, frame=0)], 0.1)
        assert m.pairs == []

    def test_explicit_keys(self):
        m = match_greedy([lab(0)], [lab(0)], 0.1, pred_keys=[("a", 0)], gt_keys=[("b", 0)])
        assert m.pairs == []

    @given(
        st.lists(st.tuples(st.floats(-5, 5), st.floats(0, 1)), max_size=6),
        st.lists(st.floats(-5, 5), max_size=6),
        st.floats(0.05, 0.9),
    )
    @settings(max_examples=100)
    def test_pairs_are_one_to_one_and_above_threshold(self, preds, gts, t):
        p = [lab(x, css=s) for x, s in preds]
        g = [lab(x) for x in gts]
        m = match_greedy(p, g, t)
        assert len({a for a, _, _ in m.pairs}) == len(m.pairs) == len({b for _, b, _ in m.pairs})
        assert all(v >= t for _, _, v in m.pairs)
        assert len(m.pairs) + len(m.unmatched_gts) == len(g)


class TestRecallPrecision:
    def test_perfect(self):
        m = match_greedy([lab(0), lab(10)], [lab(0), lab(10)], 0.5)
        assert recall_precision(m, 2, 2) == (1.0, 1.0)

    def test_no_predictions(self):
        assert recall_precision(MatchResult(), 0, 3) == (0.0, 0.0)

    def test_three_of_five(self):
        m = MatchResult([(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)], [3], [3, 4])
        assert recall_precision(m, 4, 5) == (0.6, 0.75)

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
    def test_recall_monotone_in_threshold(self, xs, t1, t2):
        preds = [lab(x, css=0.5) for x in xs]
        gts = [lab(float(k) * 2.5) for k in range(4)]
        lo, hi = sorted((t1, t2))
        r_lo = recall_precision(match_greedy(preds, gts, lo), len(preds), len(gts))[0]
        r_hi = recall_precision(match_greedy(preds, gts, hi), len(preds), len(gts))[0]
        assert r_hi <= r_lo


class TestAveragePrecision:
    def test_single_correct(self):
        assert average_precision([lab(0, css=0.9)], [lab(0)], 0.5) == 1.0

    def test_all_false(self):
        assert average_precision([lab(50, css=0.9), lab(80, css=0.3)], [lab(0)], 0.5) == 0.0

    def test_ten_predictions_five_gts(self):
        gts = [lab(20.0 * k) for k in range(5)]
        # (x, score); x on a gt is a hit, x = 200+ is a miss, the 0.05 duplicate of gt 0 is a miss too
        rows = [(0.0, 0.95), (300, 0.9), (20.0, 0.85), (0.05, 0.8), (400, 0.7),
                (40.0, 0.6), (500, 0.5), (600, 0.4), (60.0, 0.3), (700, 0.2)]
        preds = [lab(x, css=s) for x, s in rows]
        flags = [1, 0, 1, 0, 0, 1, 0, 0, 1, 0]
        expected = ap_r40_curve(flags, 5)
        assert average_precision(preds, gts, 0.5) == pytest.approx(expected, abs=1e-9)
        # hits at ranks 1, 3, 6, 9: eight R40 points each at precision 1, 2/3, 1/2, 4/9
        assert expected == pytest.approx(47 / 90, abs=1e-12)

    @given(st.lists(st.tuples(st.floats(-3, 30), st.floats(0.01, 1)), min_size=1, max_size=10))
    @settings(max_examples=100)
    def test_invariant_under_monotone_rescoring(self, rows):
        gts = [lab(8.0 * k) for k in range(4)]
        preds = [lab(x) for x, _ in rows]
        s = [v for _, v in rows]
        base = average_precision(preds, gts, 0.5, scores=s)
        warped = [math.log(v) * 3.0 - 7.0 for v in s]
        assert average_precision(preds, gts, 0.5, scores=warped) == base
        assert 0.0 <= base <= 1.0

    def test_matches_oracle_on_random_rankings(self):
        rng = np.random.default_rng(3)
        gts = [lab(20.0 * k) for k in range(6)]
        for _ in range(50):
            hit = rng.random(12) < 0.5
            targets = rng.permutation(6)
            xs, flags, used = [], [], 0
            for h in hit:
                if h and used < 6:
                    xs.append(20.0 * targets[used])
                    used += 1
                    flags.append(1)
                else:
                    xs.append(1000.0 + 10 * len(xs))
                    flags.append(0)
            scores = np.sort(rng.random(len(xs)))[::-1]
            preds = [lab(x, css=float(s)) for x, s in zip(xs, scores)]
            assert average_precision(preds, gts, 0.5) == pytest.approx(ap_r40_curve(flags, 6), abs=1e-9)


class TestErrors:
    def test_identical(self):
        m = match_greedy([lab(0)], [lab(0)], 0.5)
        assert error_stats(m, [lab(0)], [lab(0)]) == (0.0, 0.0, 0.0)

    def test_arithmetic(self):
        p, g = lab(0.5, l=4.3), lab(0.0)
        m = MatchResult([(0, 0, 0.8)])
        size, pos, ang = error_stats(m, [p], [g])
        assert size == pytest.approx(0.1, abs=1e-12)
        assert pos == pytest.approx(0.5, abs=1e-12)
        assert ang == 0.0

    def test_half_turn_folds(self):
        assert angle_error(0.2, 0.2 + math.pi) == pytest.approx(0.0, abs=1e-12)
        assert angle_error(0.0, math.pi / 2) == pytest.approx(math.pi / 2, abs=1e-12)

    def test_no_matches(self):
        with pytest.raises(UndefinedStatisticError):
            error_stats(MatchResult(), [], [])

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(1, 5), st.floats(-4, 4), st.floats(-4, 4))
    def test_symmetric(self, dx, dy, l, a, b):
        p, g = lab(dx, dy, l=l, alpha=a), lab(0.0, alpha=b)
        m = MatchResult([(0, 0, 0.5)])
        assert error_stats(m, [p], [g]) == pytest.approx(error_stats(m, [g], [p]), abs=1e-12)


def test_evaluate_report():
    gts = [lab(0), lab(20), lab(40, cls=ClassId.PEDESTRIAN, l=0.8, w=0.7, h=1.7)]
    preds = [lab(0.1, css=0.9), lab(20.0, l=4.5, css=0.8), lab(80, css=0.7)]
    rep = evaluate(preds, gts, (0.7, 0.3), per_class=True)
    assert rep.thresholds == [0.3, 0.7]
    assert rep.recall[0.3] == pytest.approx(2 / 3)
    assert rep.precision[0.3] == pytest.approx(2 / 3)
    assert set(rep.ap) == {"all", "Vehicle", "Pedestrian"}
    assert rep.ap["Pedestrian"][0.3] == 0.0
    assert rep.mae["size"] == pytest.approx(0.5 / 6)
    d = rep.to_dict()
    assert d["recall"]["0.3"] == rep.recall[0.3]
    assert [r["iou"] for r in rep.csv_rows("x")] == ["0.3", "0.7"]


def test_spearman_constant_input():
    assert spearman([1, 1, 1], [0.1, 0.5, 0.9]) == 0.0
    assert spearman([1, 2, 3], [0.1, 0.5, 0.9]) == pytest.approx(1.0)
