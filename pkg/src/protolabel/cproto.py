"""Commonsense prototypes: one dense, size-averaged object per high-quality track."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataValidityError, ParseError
from .geometry import Box3D, normalize_angle, to_box_frame
from .scene_io import ClassId, load_json, dump_json, read_points, write_points

log = logging.getLogger(__name__)

TRIM_MARGIN = 0.3
INDEX_FILE = "index.json"


@dataclass
class CProtoConfig:
    eta: float = 0.8
    trim_margin: float = TRIM_MARGIN
    # minimum center travel (m) over a track for it to count as moving
    moving_min_displacement: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"cproto.eta must lie in [0, 1], got {self.eta}")
        if self.trim_margin < 0 or self.moving_min_displacement < 0:
            raise ConfigError("cproto margins must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "CProtoConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown cproto config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"eta": self.eta, "trim_margin": self.trim_margin, "moving_min_displacement": self.moving_min_displacement}


@dataclass(eq=False)
class CProto:
    """Prototype in its own frame: box centered at the origin with zero yaw."""

    box: Box3D
    points: np.ndarray
    source_tau: int
    cls: ClassId
    source_sequence: str = ""
    source_frames: tuple = field(default_factory=tuple)

    def __post_init__(self):
        b = self.box
        if (b.x, b.y, b.z, b.alpha) != (0.0, 0.0, 0.0, 0.0):
            raise DataValidityError("prototype box must be centered at the origin with alpha = 0")

    @property
    def size(self) -> tuple:
        return (self.box.l, self.box.w, self.box.h)


def _mean(values) -> float:
    # fsum is exact before the division, so the mean does not depend on order
    return math.fsum(values) / len(values)


def _heading_flip(selected, clouds_local, poses, config) -> bool:
    """Decide whether the shared local +x should point the other way.

    Movers follow their travel direction; otherwise +x points at the half
    holding more points.
    """
    if poses is not None:
        first, last = selected[0], selected[-1]
        p0 = poses.get(first.frame_index)
        p1 = poses.get(last.frame_index)
        if p0 is not None and p1 is not None:
            c0 = p0.rotation @ first.box.center + p0.translation
            c1 = p1.rotation @ last.box.center + p1.translation
            d = c1[:2] - c0[:2]
            if math.hypot(d[0], d[1]) >= config.moving_min_displacement:
                yaw = selected[0].box.alpha + p0.yaw
                return d[0] * math.cos(yaw) + d[1] * math.sin(yaw) < 0.0
    pts = np.vstack(clouds_local) if clouds_local else np.zeros((0, 4))
    front = int(np.count_nonzero(pts[:, 0] > 0.0))
    back = int(np.count_nonzero(pts[:, 0] < 0.0))
    return back > front


def build_cproto_set(labels, clouds, config: CProtoConfig, poses: Optional[dict] = None, sequence_id: str = "") -> list:
    """Build one prototype per track that has at least one label with ``css >= eta``.

    Args:
        labels: scored labels of one sequence.
        clouds: cluster points of each label, in the label's frame.
        config: prototype settings.
        poses: optional ``{frame_index: Pose}`` used to compare headings
            across frames and to detect moving tracks.
        sequence_id: recorded on each prototype.

    The box size is the mean of the selected labels' sizes. Points are the
    selected labels' clusters moved into each label's box frame, flipped so
    all contributions share one heading, then trimmed to the averaged box
    grown by ``trim_margin``.
    """
    if len(labels) != len(clouds):
        raise DataValidityError("labels and clouds must have the same length")
    by_tau = {}
    for lab, pts in zip(labels, clouds):
        if lab.css is None:
            raise DataValidityError("build_cproto_set needs scored labels")
        by_tau.setdefault(lab.tau, []).append((lab, pts))
    protos, skipped = [], 0
    for tau in sorted(by_tau):
        chosen = sorted(((l, p) for l, p in by_tau[tau] if l.css >= config.eta), key=lambda lp: lp[0].frame_index)
        if not chosen:
            skipped += 1
            continue
        selected = [l for l, _ in chosen]

        def global_yaw(lab):
            pose = None if poses is None else poses.get(lab.frame_index)
            return lab.box.alpha + (pose.yaw if pose is not None else 0.0)

        ref = global_yaw(selected[0])
        local = []
        for lab, pts in chosen:
            pts = np.asarray(pts, dtype=np.float64).reshape(len(pts), -1)
            if pts.shape[1] == 3:
                pts = np.column_stack([pts, np.zeros(len(pts))])
            loc = to_box_frame(pts, lab.box)
            # contributions whose yaw points the other way get turned around
            if abs(normalize_angle(global_yaw(lab) - ref)) > 0.5 * math.pi:
                loc[:, :2] *= -1.0
            local.append(loc)
        if _heading_flip(selected, local, poses, config):
            for loc in local:
                loc[:, :2] *= -1.0
        l = _mean([b.box.l for b in selected])
        w = _mean([b.box.w for b in selected])
        h = _mean([b.box.h for b in selected])
        pts = np.vstack(local)
        m = config.trim_margin
        keep = (np.abs(pts[:, 0]) <= 0.5 * l + m) & (np.abs(pts[:, 1]) <= 0.5 * w + m) & (np.abs(pts[:, 2]) <= 0.5 * h + m)
        pts = pts[keep].astype(np.float32).astype(np.float64)
        cls = selected[0].beta
        protos.append(
            CProto(
                Box3D(0.0, 0.0, 0.0, l, w, h, 0.0),
                pts,
                tau,
                cls,
                sequence_id,
                tuple(b.frame_index for b in selected),
            )
        )
    if skipped:
        log.info("cproto: %d tracks without a label at css >= %.2f", skipped, config.eta)
    return protos


def write_cproto_set(protos, directory) -> Path:
    """Write ``index.json`` plus one point file per prototype; stale point files are removed."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("proto_*.bin"):
        old.unlink()
    entries = []
    for k, p in enumerate(protos):
        name = f"proto_{k:06d}.bin"
        write_points(p.points, d / name)
        entries.append(
            {
                "class": p.cls.value,
                "size": [p.box.l, p.box.w, p.box.h],
                "source_tau": p.source_tau,
                "source_sequence": p.source_sequence,
                "source_frames": list(p.source_frames),
                "points": name,
                "count": int(len(p.points)),
            }
        )
    dump_json({"format": "protolabel.cprotos", "version": 1, "protos": entries}, d / INDEX_FILE)
    return d


def read_cproto_set(directory) -> list:
    d = Path(directory)
    index = load_json(d / INDEX_FILE)
    out = []
    try:
        entries = index["protos"]
        for e in entries:
            l, w, h = (float(v) for v in e["size"])
            pts = read_points(d / e["points"], context="prototype points")
            if len(pts) != int(e["count"]):
                raise ParseError(f"prototype point count mismatch for {e['points']}", d / INDEX_FILE)
            out.append(
                CProto(
                    Box3D(0.0, 0.0, 0.0, l, w, h, 0.0),
                    pts,
                    int(e["source_tau"]),
                    ClassId.parse(e["class"]),
                    str(e.get("source_sequence", "")),
                    tuple(int(f) for f in e.get("source_frames", ())),
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed prototype index: {exc}", d / INDEX_FILE) from None
    return out
