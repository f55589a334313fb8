"""Completeness and size-similarity (CSS) quality score for pseudo-labels.

The score is a weighted sum of three parts, each in ``[0, 1]``:

* distance: ``1 - clamp(|center| / range_max, 0, 1)``,
* multi-level occupancy (MLO): the mean fraction of occupied cells when the
  box footprint is split into ``r x r`` grids for each resolution ``r``,
* size similarity: one minus the KL divergence between the box's and the
  class template's normalized ``(l, w, h)``, truncated at ``kl_truncation``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import Box3D, to_box_frame
from .scene_io import ClassId


@dataclass(frozen=True)
class TemplateBox:
    l: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) and v > 0 for v in (self.l, self.w, self.h)):
            raise ConfigError(f"template dimensions must be positive, got {(self.l, self.w, self.h)}")


DEFAULT_TEMPLATES = {
    ClassId.VEHICLE: TemplateBox(5.06, 1.86, 1.49),
    ClassId.PEDESTRIAN: TemplateBox(1.0, 1.0, 2.0),
    ClassId.CYCLIST: TemplateBox(1.9, 0.85, 1.8),
}


@dataclass
class CssConfig:
    range_max: float = 80.0
    mlo_resolutions: tuple = (2, 4, 6)
    weights: tuple = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    kl_truncation: float = 0.05
    templates: dict = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))

    def __post_init__(self):
        self.mlo_resolutions = tuple(int(r) for r in self.mlo_resolutions)
        self.weights = tuple(float(w) for w in self.weights)
        self.templates = {
            ClassId.parse(k): v if isinstance(v, TemplateBox) else TemplateBox(*v) for k, v in self.templates.items()
        }
        self.validate()

    def validate(self):
        if not self.range_max > 0:
            raise ConfigError("css.range_max must be positive")
        if not self.mlo_resolutions or min(self.mlo_resolutions) < 1:
            raise ConfigError("css.mlo_resolutions must be a non-empty list of integers >= 1")
        if len(self.weights) != 3 or min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError("css.weights must be three non-negative numbers summing to 1")
        if not self.kl_truncation > 0:
            raise ConfigError("css.kl_truncation must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "CssConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown css config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "range_max": self.range_max,
            "mlo_resolutions": list(self.mlo_resolutions),
            "weights": list(self.weights),
            "kl_truncation": self.kl_truncation,
            "templates": {k.value: [t.l, t.w, t.h] for k, t in self.templates.items()},
        }


def distance_score(box: Box3D, config: CssConfig) -> float:
    d = math.sqrt(box.x * box.x + box.y * box.y + box.z * box.z)
    return 1.0 - min(max(d / config.range_max, 0.0), 1.0)


def mlo_score(box: Box3D, points, config: CssConfig) -> float:
    """Mean occupied-cell fraction of the footprint over all grid resolutions.

    Points outside the footprint do not occupy any cell.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    local = to_box_frame(pts.reshape(-1, pts.shape[-1])[:, :3], box)
    # normalized footprint coordinates in [0, 1]
    u = local[:, 0] / box.l + 0.5
    v = local[:, 1] / box.w + 0.5
    inside = (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (v <= 1.0)
    u, v = u[inside], v[inside]
    total = 0.0
    for r in config.mlo_resolutions:
        iu = np.minimum((u * r).astype(np.int64), r - 1)
        iv = np.minimum((v * r).astype(np.int64), r - 1)
        occupied = len(np.unique(iu * r + iv))
        total += occupied / (r * r)
    return total / len(config.mlo_resolutions)


def size_kl(l: float, w: float, h: float, template: TemplateBox) -> float:
    """KL divergence (natural log) between normalized box and template dimensions."""
    sb = l + w + h
    sa = template.l + template.w + template.h
    kl = 0.0
    for b, a in ((l, template.l), (w, template.w), (h, template.h)):
        qb, qa = b / sb, a / sa
        kl += qb * math.log(qb / qa)
    return kl


def ss_score(box: Box3D, template: TemplateBox, config: CssConfig) -> float:
    """Size similarity. Depends only on the box proportions.

    Boxes proportional to the template score exactly 1; any KL at or above
    the truncation scores exactly 0.
    """
    l, w, h = box.l, box.w, box.h
    # proportional up to float rounding of the scaled sizes -> zero divergence;
    # the log terms would otherwise leave a residue of a few ulps
    if math.isclose(l * template.w, w * template.l, rel_tol=1e-12) and math.isclose(
        l * template.h, h * template.l, rel_tol=1e-12
    ):
        return 1.0
    kl = size_kl(l, w, h, template)
    t = config.kl_truncation
    if kl >= t:
        return 0.0
    return 1.0 - max(kl, 0.0) / t


def _template(cls, config: CssConfig) -> TemplateBox:
    try:
        return config.templates[ClassId.parse(cls)]
    except (KeyError, ValueError):
        raise ConfigError(f"no size template for class {cls!r}") from None


def css_components(box: Box3D, points, cls, config: CssConfig) -> tuple:
    """``(distance, mlo, size)`` sub-scores."""
    template = _template(cls, config)
    return distance_score(box, config), mlo_score(box, points, config), ss_score(box, template, config)


def css_score(box: Box3D, points, cls, config: CssConfig) -> float:
    psi = css_components(box, points, cls, config)
    return float(sum(w * p for w, p in zip(config.weights, psi)))


def score_labels(labels, clouds, config: CssConfig) -> list:
    """Attach a css score to each label (labels whose class has no template get 0)."""
    out = []
    for lab, pts in zip(labels, clouds):
        if lab.beta in config.templates:
            out.append(lab.with_css(css_score(lab.box, pts, lab.beta, config)))
        else:
            out.append(lab.with_css(0.0))
    return out
