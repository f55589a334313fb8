"""Label-quality metrics against ground truth: matching, recall/precision, AP and MAEs.

Predictions and ground truths only match within the same frame. Frames are
identified by a key, by default ``label.frame_index``; pass explicit keys
(for example ``(sequence_id, frame_index)``) when pooling sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .errors import UndefinedStatisticError
from .geometry import bev_iou, iou_3d

R40 = np.linspace(1.0 / 40.0, 1.0, 40)


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (pred index, gt index, iou)
    unmatched_preds: list = field(default_factory=list)
    unmatched_gts: list = field(default_factory=list)


def _iou_fn(mode: str):
    if mode not in ("bev", "3d"):
        raise ValueError(f"mode must be 'bev' or '3d', got {mode!r}")
    return iou_3d if mode == "3d" else bev_iou


def _keys(labels, keys):
    return [lab.frame_index for lab in labels] if keys is None else list(keys)


def _score(lab) -> float:
    return 0.0 if lab.css is None else float(lab.css)


def _greedy(order, preds, gts, iou_min, mode, pred_keys, gt_keys):
    iou = _iou_fn(mode)
    by_key = {}
    for gi, k in enumerate(_keys(gts, gt_keys)):
        by_key.setdefault(k, []).append(gi)
    pk = _keys(preds, pred_keys)
    taken = set()
    result = []  # (pred index, gt index or None, iou)
    for pi in order:
        best, best_iou = None, -1.0
        for gi in by_key.get(pk[pi], ()):
            if gi in taken:
                continue
            v = iou(preds[pi].box, gts[gi].box)
            if v >= iou_min and v > best_iou:
                best, best_iou = gi, v
        if best is not None and best_iou > 0.0:
            taken.add(best)
            result.append((pi, best, best_iou))
        else:
            result.append((pi, None, 0.0))
    return result


def match_greedy(preds, gts, iou_min: float, mode: str = "bev", pred_keys=None, gt_keys=None) -> MatchResult:
    """Greedy matching in descending css order (unscored counts as 0, ties by index).

    Each prediction takes the free ground truth of highest IoU (lowest index
    on ties) if that IoU is at least ``iou_min``.
    """
    order = sorted(range(len(preds)), key=lambda i: (-_score(preds[i]), i))
    res = _greedy(order, preds, gts, iou_min, mode, pred_keys, gt_keys)
    pairs = [(pi, gi, v) for pi, gi, v in res if gi is not None]
    matched_p = {p for p, _, _ in pairs}
    matched_g = {g for _, g, _ in pairs}
    return MatchResult(
        pairs,
        [i for i in range(len(preds)) if i not in matched_p],
        [i for i in range(len(gts)) if i not in matched_g],
    )


def recall_precision(match: MatchResult, preds_count: int, gts_count: int) -> tuple:
    m = len(match.pairs)
    recall = m / gts_count if gts_count else 0.0
    precision = m / preds_count if preds_count else 0.0
    return recall, precision


def average_precision(preds, gts, iou_min: float, mode: str = "bev", scores=None, pred_keys=None, gt_keys=None) -> float:
    """40-point interpolated AP.

    Args:
        preds: predicted labels.
        gts: ground-truth labels.
        iou_min: true-positive threshold.
        mode: ``"bev"`` or ``"3d"``.
        scores: ranking scores; defaults to each label's css.

    Predictions are ranked by score (ties by index) and matched greedily in
    that order. The interpolated precision at recall ``r`` is the best
    precision at any recall ``>= r``; AP averages it over ``r = 1/40 .. 1``.
    """
    if len(gts) == 0:
        return 0.0
    s = [_score(p) for p in preds] if scores is None else [float(v) for v in scores]
    order = sorted(range(len(preds)), key=lambda i: (-s[i], i))
    res = _greedy(order, preds, gts, iou_min, mode, pred_keys, gt_keys)
    tp = np.array([gi is not None for _, gi, _ in res], dtype=np.float64)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(tp) + 1)
    # suffix maximum of precision
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in R40:
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        total += float(envelope[idx]) if idx < len(envelope) else 0.0
    return total / len(R40)


def angle_error(a: float, b: float) -> float:
    d = abs(math.remainder(a - b, math.pi))
    return min(d, math.pi - d)


def error_stats(match: MatchResult, preds, gts) -> tuple:
    """``(size, position, angle)`` mean absolute errors over matched pairs.

    Raises:
        UndefinedStatisticError: nothing is matched.
    """
    if not match.pairs:
        raise UndefinedStatisticError("no matched pairs to compute errors over")
    size, pos, ang = [], [], []
    for pi, gi, _ in match.pairs:
        p, g = preds[pi].box, gts[gi].box
        size.append((abs(p.l - g.l) + abs(p.w - g.w) + abs(p.h - g.h)) / 3.0)
        pos.append(math.dist((p.x, p.y, p.z), (g.x, g.y, g.z)))
        ang.append(angle_error(p.alpha, g.alpha))
    n = len(match.pairs)
    return math.fsum(size) / n, math.fsum(pos) / n, math.fsum(ang) / n


def best_iou(preds, gts, mode: str = "bev", pred_keys=None, gt_keys=None) -> np.ndarray:
    """For each prediction, its highest IoU with any ground truth of the same frame."""
    iou = _iou_fn(mode)
    by_key = {}
    for gi, k in enumerate(_keys(gts, gt_keys)):
        by_key.setdefault(k, []).append(gts[gi].box)
    out = np.zeros(len(preds))
    for i, (p, k) in enumerate(zip(preds, _keys(preds, pred_keys))):
        out[i] = max((iou(p.box, g) for g in by_key.get(k, ())), default=0.0)
    return out


def spearman(x, y) -> float:
    """Spearman rank correlation; 0 when either input is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    return float(spearmanr(x, y).statistic)


@dataclass
class MetricsReport:
    thresholds: list
    recall: dict  # threshold -> recall
    precision: dict
    ap: dict  # class name -> {threshold: AP}
    mae: dict  # size/position/angle at the lowest threshold; None when nothing matched
    counts: dict

    def to_dict(self) -> dict:
        def fmt(t):
            return f"{t:g}"

        return {
            "thresholds": [float(t) for t in self.thresholds],
            "recall": {fmt(t): v for t, v in self.recall.items()},
            "precision": {fmt(t): v for t, v in self.precision.items()},
            "ap": {c: {fmt(t): v for t, v in d.items()} for c, d in self.ap.items()},
            "mae": dict(self.mae),
            "counts": dict(self.counts),
        }

    def csv_rows(self, prefix: str = "") -> list:
        rows = []
        for t in self.thresholds:
            row = {"stage": prefix, "iou": f"{t:g}", "recall": self.recall[t], "precision": self.precision[t]}
            for c, d in sorted(self.ap.items()):
                row[f"ap_{c}"] = d[t]
            rows.append(row)
        return rows


def evaluate(preds, gts, thresholds=(0.3, 0.5, 0.7), mode: str = "bev", per_class: bool = False, pred_keys=None, gt_keys=None) -> MetricsReport:
    """Recall, precision and AP at each threshold, plus MAEs at the lowest threshold.

    Class-agnostic unless ``per_class`` is set, in which case AP is also
    reported per ground-truth class.
    """
    thresholds = sorted(float(t) for t in thresholds)
    pk, gk = _keys(preds, pred_keys), _keys(gts, gt_keys)
    recall, precision, ap = {}, {}, {"all": {}}
    mae = {"size": None, "position": None, "angle": None}
    for t in thresholds:
        m = match_greedy(preds, gts, t, mode, pk, gk)
        recall[t], precision[t] = recall_precision(m, len(preds), len(gts))
        ap["all"][t] = average_precision(preds, gts, t, mode, None, pk, gk)
        if t == thresholds[0] and m.pairs:
            mae["size"], mae["position"], mae["angle"] = error_stats(m, preds, gts)
    if per_class:
        for cls in sorted({g.beta.value for g in gts}):
            pi = [i for i, p in enumerate(preds) if p.beta.value == cls]
            gi = [i for i, g in enumerate(gts) if g.beta.value == cls]
            ap[cls] = {
                t: average_precision(
                    [preds[i] for i in pi], [gts[i] for i in gi], t, mode, None, [pk[i] for i in pi], [gk[i] for i in gi]
                )
                for t in thresholds
            }
    return MetricsReport(thresholds, recall, precision, ap, mae, {"predictions": len(preds), "ground_truth": len(gts)})
