"""Prototype-constrained box refinement.

Each label borrows the size of the prototype with the closest height, then
is slid so that its sensor-facing faces sit on the boundary of the densest
part of its cluster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import Box3D, normalize_angle
from .mfc import fit_yaw

FLAG_REFINED = "refined"
FLAG_NO_PROTO = "no_prototype"
FLAG_FEW_POINTS = "few_points"
FLAG_SHIFT_REJECTED = "shift_rejected"


@dataclass
class CbrConfig:
    bins_per_meter: float = 4.0
    min_points_for_relocalization: int = 5
    class_restricted: bool = True
    yaw_step_deg: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.bins_per_meter > 0:
            raise ConfigError("cbr.bins_per_meter must be positive")
        if self.min_points_for_relocalization < 1:
            raise ConfigError("cbr.min_points_for_relocalization must be >= 1")
        if not self.yaw_step_deg > 0:
            raise ConfigError("cbr.yaw_step_deg must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "CbrConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown cbr config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "bins_per_meter": self.bins_per_meter,
            "min_points_for_relocalization": self.min_points_for_relocalization,
            "class_restricted": self.class_restricted,
            "yaw_step_deg": self.yaw_step_deg,
        }


def associate_cproto(label, protos, class_restricted: bool = True):
    """Index of the prototype whose height is closest to the label's.

    With ``class_restricted`` only prototypes of the label's class compete,
    and ``None`` is returned when there are none. Ties go to the lowest index.

    Raises:
        ConfigError: ``protos`` is empty.
    """
    if len(protos) == 0:
        raise ConfigError("prototype set is empty")
    best, best_d = None, math.inf
    for k, p in enumerate(protos):
        if class_restricted and p.cls != label.beta:
            continue
        d = abs(label.box.h - p.box.h)
        if d < best_d:
            best, best_d = k, d
    return best


def resize_to_cproto(label, proto):
    return label.with_box(label.box.with_size(proto.box.l, proto.box.w, proto.box.h))


def _snap_alpha(theta: float, alpha: float) -> float:
    """Of ``theta + k*pi/2``, the one closest to ``alpha`` (lowest ``k`` on ties)."""
    best, best_d = alpha, math.inf
    for k in range(4):
        cand = normalize_angle(theta + k * 0.5 * math.pi)
        d = abs(normalize_angle(cand - alpha))
        if d < best_d:
            best, best_d = cand, d
    return best


def _face_coordinate(coord, bins, side: int) -> float:
    """Extremal coordinate of the densest bin's contiguous run toward ``side``.

    ``bins`` are integer bin ids of ``coord``. The densest bin is the one
    with most points (lowest id on ties). From there the walk continues
    toward ``side`` while the next bin is occupied; the extremal point of
    the last bin reached is returned.
    """
    ids, counts = np.unique(bins, return_counts=True)
    b = int(ids[int(np.argmax(counts))])
    occupied = set(int(i) for i in ids)
    while b + side in occupied:
        b += side
    in_bin = coord[bins == b]
    return float(in_bin.min() if side < 0 else in_bin.max())


def relocalize(label, cluster_points, config: CbrConfig, return_flag: bool = False):
    """Re-orient the box to the cluster and slide it onto the densest boundary.

    The yaw is re-fitted with the box-fitting criterion and snapped to the
    nearest of its quarter-turn equivalents. In that rotated frame, for each
    horizontal axis the face pointing at the sensor (origin of the label's
    frame) is moved onto the extremal point found by :func:`_face_coordinate`.
    Bins are anchored at the frame origin, not at the box, so running the
    step again on its own output changes nothing.

    The box is left as is when the cluster has fewer than
    ``min_points_for_relocalization`` points, or when the move would exceed
    half the box's BEV diagonal.
    """
    box = label.box
    pts = np.asarray(cluster_points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < config.min_points_for_relocalization:
        return (label, FLAG_FEW_POINTS) if return_flag else label
    xy = pts[:, :2]
    alpha = _snap_alpha(fit_yaw(xy, config.yaw_step_deg), box.alpha)
    c, s = math.cos(alpha), math.sin(alpha)
    u = c * xy[:, 0] + s * xy[:, 1]
    v = -s * xy[:, 0] + c * xy[:, 1]
    cu_old = c * box.x + s * box.y
    cv_old = -s * box.x + c * box.y
    centers = []
    for coord, extent in ((u, box.l), (v, box.w)):
        bins = np.floor(coord * config.bins_per_meter).astype(np.int64)
        # the face toward the sensor: opposite the side the cluster lies on
        side = -1 if coord.mean() >= 0.0 else 1
        face = _face_coordinate(coord, bins, side)
        centers.append(face - side * 0.5 * extent)
    cu, cv = centers
    if math.hypot(cu - cu_old, cv - cv_old) > 0.5 * math.hypot(box.l, box.w):
        return (label, FLAG_SHIFT_REJECTED) if return_flag else label
    new = Box3D(c * cu - s * cv, s * cu + c * cv, box.z, box.l, box.w, box.h, alpha)
    out = label.with_box(new)
    return (out, FLAG_REFINED) if return_flag else out


def refine_labels(labels, clouds, protos, config: CbrConfig, return_flags: bool = False):
    """Associate, resize and relocalize every label.

    Labels with no usable prototype pass through unchanged and are flagged
    ``no_prototype``. Applying the function to its own output (with the same
    prototypes and clouds) returns that output unchanged.
    """
    out, flags = [], []
    for lab, pts in zip(labels, clouds):
        k = associate_cproto(lab, protos, config.class_restricted) if len(protos) else None
        if k is None:
            out.append(lab)
            flags.append(FLAG_NO_PROTO)
            continue
        resized = resize_to_cproto(lab, protos[k])
        moved, flag = relocalize(resized, pts, config, return_flag=True)
        out.append(moved)
        flags.append(flag)
    return (out, flags) if return_flags else out
