"""Score-weighted self-training losses, evaluated on plain arrays.

The detector that would produce features and per-proposal losses is out of
scope; these functions only combine the quantities it would supply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataValidityError, NumericDomainError, UndefinedStatisticError
from .geometry import Box3D, iou_3d


@dataclass(frozen=True)
class CstConfig:
    s_low: float = 0.4
    s_high: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.s_low < self.s_high <= 1.0:
            raise ConfigError(f"need 0 <= s_low < s_high <= 1, got {self.s_low}, {self.s_high}")

    @classmethod
    def from_dict(cls, d: dict) -> "CstConfig":
        unknown = set(d) - {"s_low", "s_high"}
        if unknown:
            raise ConfigError(f"unknown cst config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"s_low": self.s_low, "s_high": self.s_high}


class FeatureVector:
    """Finite real vector with its Euclidean norm computed once."""

    __slots__ = ("values", "norm")

    def __init__(self, values):
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise DataValidityError("feature vector has non-finite entries")
        v.setflags(write=False)
        self.values = v
        self.norm = float(np.linalg.norm(v))

    def __len__(self):
        return len(self.values)


@dataclass
class ProposalPair:
    """A detection proposal matched to its prototype counterpart."""

    det_box: Box3D
    proto_box: Box3D
    det_feat: FeatureVector = None
    proto_feat: FeatureVector = None
    weight: float = 1.0
    loss_pro: float = 0.0
    loss_det: float = 0.0

    def __post_init__(self):
        for name in ("det_feat", "proto_feat"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, FeatureVector):
                setattr(self, name, FeatureVector(v))
        if self.det_feat is not None and self.proto_feat is not None and len(self.det_feat) != len(self.proto_feat):
            raise DataValidityError("feature dimensions differ")
        if not 0.0 <= self.weight <= 1.0:
            raise DataValidityError(f"weight must lie in [0, 1], got {self.weight}")
        if self.loss_pro < 0 or self.loss_det < 0:
            raise DataValidityError("detection losses must be non-negative")


def css_weight(s: float, config: CstConfig = CstConfig()) -> float:
    """Piecewise-linear weight: 0 up to ``s_low``, 1 from ``s_high``, linear between."""
    if s <= config.s_low:
        return 0.0
    if s >= config.s_high:
        return 1.0
    return (s - config.s_low) / (config.s_high - config.s_low)


def _need(pairs):
    if len(pairs) == 0:
        raise UndefinedStatisticError("mean over an empty proposal list")


def weighted_detection_loss(pairs) -> float:
    _need(pairs)
    return math.fsum(p.weight * (p.loss_pro + p.loss_det) for p in pairs) / len(pairs)


def feature_contrast_loss(pairs) -> float:
    """Negative weighted mean cosine similarity between detection and prototype features."""
    _need(pairs)
    terms = []
    for p in pairs:
        if p.det_feat is None or p.proto_feat is None:
            raise DataValidityError("feature_contrast_loss needs features on every pair")
        if p.det_feat.norm == 0.0 or p.proto_feat.norm == 0.0:
            raise NumericDomainError("cosine similarity of a zero-norm feature")
        cos = float(p.det_feat.values @ p.proto_feat.values) / (p.det_feat.norm * p.proto_feat.norm)
        terms.append(p.weight * min(1.0, max(-1.0, cos)))
    return -math.fsum(terms) / len(pairs)


def box_contrast_loss(pairs) -> float:
    """Weighted mean of ``1 - IoU3D + center distance + |sin(yaw difference)|``."""
    _need(pairs)
    terms = []
    for p in pairs:
        a, b = p.det_box, p.proto_box
        dist = math.dist((a.x, a.y, a.z), (b.x, b.y, b.z))
        term = 1.0 - iou_3d(a, b) + dist + abs(math.sin(a.alpha - b.alpha))
        terms.append(p.weight * term)
    return math.fsum(terms) / len(pairs)


def _box(d) -> Box3D:
    if isinstance(d, dict):
        return Box3D(**d)
    return Box3D(*d)


def pairs_from_json(doc) -> list:
    """Parse ``{"pairs": [{"det_box": [...7], "proto_box": [...], "det_feat": [...], ...}]}``."""
    rows = doc["pairs"] if isinstance(doc, dict) else doc
    out = []
    for r in rows:
        out.append(
            ProposalPair(
                _box(r["det_box"]),
                _box(r["proto_box"]),
                r.get("det_feat"),
                r.get("proto_feat"),
                float(r.get("weight", 1.0)),
                float(r.get("loss_pro", 0.0)),
                float(r.get("loss_det", 0.0)),
            )
        )
    return out
