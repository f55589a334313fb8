"""Deterministic synthetic LiDAR sequences with exact ground truth.

Objects are cuboids standing on the ground. Each frame samples points on
the faces visible from the sensor with a density of
``point_density_at_10m * (10 / d)**2 * cos(incidence)``, removes samples
whose line of sight is blocked by another cuboid (when ``occlusion`` is on),
adds Gaussian noise and expresses everything in the ego frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DataValidityError
from .geometry import Box3D, Pose, bev_iou, to_box_frame, yaw_matrix
from .mfc import DEFAULT_CLASS_TABLE, class_range_is_classifiable
from .scene_io import ClassId, Frame, Label, Sequence

log = logging.getLogger(__name__)

FOREGROUND = (ClassId.VEHICLE, ClassId.PEDESTRIAN, ClassId.CYCLIST)

DEFAULT_SIZE_RANGES = {
    # (l range, w range, h range) in meters
    "Vehicle": ((4.3, 4.9), (1.78, 1.95), (1.45, 1.65)),
    "Pedestrian": ((0.7, 1.0), (0.55, 0.9), (1.6, 1.9)),
    "Cyclist": ((1.6, 1.9), (0.55, 0.8), (1.5, 1.9)),
}
DEFAULT_SPEED_RANGES = {
    "Vehicle": (8.0, 15.0),
    "Pedestrian": (0.8, 1.8),
    "Cyclist": (3.0, 6.0),
}
GROUND_MIN_RANGE = 2.0
CELL = 0.5  # face stratification step for point sampling, meters


@dataclass
class ObjectSpec:
    """An explicitly placed object; position and yaw refer to frame 0 (global)."""

    cls: str
    x: float
    y: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    speed: float = 0.0
    intensity: float = 0.5


@dataclass
class SynthConfig:
    seed: int = 0
    num_frames: int = 11
    frame_dt: float = 0.1
    ego_speed: float = 10.0
    object_counts: dict = field(default_factory=lambda: {"Vehicle": 8, "Pedestrian": 4, "Cyclist": 2})
    size_ranges: dict = field(default_factory=lambda: {k: v for k, v in DEFAULT_SIZE_RANGES.items()})
    speed_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SPEED_RANGES))
    moving_fraction: float = 0.3
    point_density_at_10m: float = 50.0
    ground_density_at_10m: float = 1.0
    range_max: float = 80.0
    occlusion: bool = True
    noise_sigma: float = 0.02
    sensor_height: float = 1.8
    ground_slope_deg: float = 0.0
    placement_range: tuple = (5.0, 60.0)
    objects: Optional[list] = None

    def __post_init__(self):
        self.object_counts = {str(k): int(v) for k, v in self.object_counts.items()}
        self.size_ranges = {
            str(k): tuple(tuple(float(x) for x in r) for r in v) for k, v in self.size_ranges.items()
        }
        self.speed_ranges = {str(k): tuple(float(x) for x in v) for k, v in self.speed_ranges.items()}
        self.placement_range = tuple(float(x) for x in self.placement_range)
        if self.objects is not None:
            self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        self.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataValidityError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        def bad(msg):
            raise DataValidityError(f"invalid synth config: {msg}")

        if self.num_frames < 1:
            bad("num_frames must be >= 1")
        if self.frame_dt <= 0:
            bad("frame_dt must be positive")
        if self.point_density_at_10m <= 0 or self.ground_density_at_10m <= 0:
            bad("densities must be positive")
        if not 0.0 <= self.moving_fraction <= 1.0:
            bad("moving_fraction must lie in [0, 1]")
        if self.range_max <= GROUND_MIN_RANGE:
            bad("range_max too small")
        if self.noise_sigma < 0:
            bad("noise_sigma must be non-negative")
        lo, hi = self.placement_range
        if not 0 < lo <= hi:
            bad("placement_range must be 0 < lo <= hi")
        for name, count in self.object_counts.items():
            if count < 0:
                bad(f"negative object count for {name}")
            if count == 0:
                continue
            cls = ClassId.parse(name)
            if cls not in FOREGROUND:
                bad(f"only foreground classes can be synthesized, got {name}")
            if name not in self.size_ranges:
                bad(f"no size range for {name}")
            ranges = self.size_ranges[name]
            if any(r[0] <= 0 or r[1] < r[0] for r in ranges):
                bad(f"size ranges for {name} must be positive intervals")
            if not class_range_is_classifiable(cls, ranges, DEFAULT_CLASS_TABLE):
                bad(f"{name} size range is not classified back to {name} by the class thresholds")
        for spec in self.objects or []:
            if min(spec.l, spec.w, spec.h) <= 0:
                bad("explicit object sizes must be positive")
            ClassId.parse(spec.cls)


@dataclass(frozen=True)
class GTObject:
    box: Box3D  # ego frame of the frame it belongs to
    cls: ClassId
    object_id: int
    is_moving: bool


@dataclass
class GroundTruth:
    frames: list  # per frame: list of GTObject
    point_ids: list  # per frame: (N,) object id of each point, -1 for ground

    def labels(self, frame_indices=None) -> list:
        """Ground truth as Label records (tau = object id)."""
        out = []
        for k, objs in enumerate(self.frames):
            fi = k if frame_indices is None else frame_indices[k]
            for o in objs:
                out.append(Label(o.box, o.cls, o.object_id, fi, None))
        return out

    def point_counts(self) -> dict:
        """Total number of points per object id over the whole sequence."""
        counts = {}
        for ids in self.point_ids:
            oid, n = np.unique(ids[ids >= 0], return_counts=True)
            for i, c in zip(oid.tolist(), n.tolist()):
                counts[i] = counts.get(i, 0) + c
        return counts

    def visible_labels(self, min_points: int = 1, frame_indices=None) -> list:
        """Ground-truth labels of objects hit by at least ``min_points`` points over the sequence."""
        counts = self.point_counts()
        return [lab for lab in self.labels(frame_indices) if counts.get(lab.tau, 0) >= min_points]


@dataclass
class _Obj:
    oid: int
    cls: ClassId
    x: float
    y: float
    l: float
    w: float
    h: float
    yaw: float
    speed: float
    intensity: float

    def box_at(self, t: float, ground) -> Box3D:
        cx = self.x + self.speed * t * math.cos(self.yaw)
        cy = self.y + self.speed * t * math.sin(self.yaw)
        return Box3D(cx, cy, ground(cx, cy) + 0.5 * self.h, self.l, self.w, self.h, self.yaw)


def generate_scene(config: SynthConfig):
    """Build a sequence and its ground truth; a pure function of ``config``.

    Returns:
        ``(Sequence, GroundTruth)``. Frame ``k`` uses the random substream
        ``(seed, 1, k)``, so frames could be produced independently.
    """
    config.validate()
    slope = math.tan(math.radians(config.ground_slope_deg))

    def ground(x, y):
        return slope * x

    times = [k * config.frame_dt for k in range(config.num_frames)]
    ego_xy = [(config.ego_speed * t, 0.0) for t in times]
    objects = _layout(config, times, ego_xy, ground)

    frames, gt_frames, gt_ids = [], [], []
    for k, t in enumerate(times):
        ex, ey = ego_xy[k]
        pose = Pose(np.eye(3), np.array([ex, ey, ground(ex, ey)]))
        boxes = [o.box_at(t, ground) for o in objects]
        pts, ids = _render_frame(config, k, pose, objects, boxes, ground)
        frames.append(Frame(k, t, pose, pts))
        inv_r = pose.rotation.T
        gts = []
        for o, b in zip(objects, boxes):
            c = inv_r @ (b.center - pose.translation)
            eb = Box3D(c[0], c[1], c[2], b.l, b.w, b.h, b.alpha - pose.yaw)
            gts.append(GTObject(eb, o.cls, o.oid, o.speed > 0))
        gt_frames.append(gts)
        gt_ids.append(ids)
    seq = Sequence(f"synth-{config.seed}", frames)
    return seq, GroundTruth(gt_frames, gt_ids)


def _layout(config, times, ego_xy, ground) -> list:
    if config.objects is not None:
        return [
            _Obj(i, ClassId.parse(s.cls), s.x, s.y, s.l, s.w, s.h, s.yaw, s.speed, s.intensity)
            for i, s in enumerate(config.objects)
        ]
    rng = np.random.default_rng([config.seed, 0])
    placed = []
    lo, hi = config.placement_range
    ex_min = min(x for x, _ in ego_xy) - 6.0
    ex_max = max(x for x, _ in ego_xy) + 6.0
    oid = 0
    for cls in FOREGROUND:
        name = cls.value
        for _ in range(config.object_counts.get(name, 0)):
            (l0, l1), (w0, w1), (h0, h1) = config.size_ranges[name]
            l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
            yaw = rng.uniform(-math.pi, math.pi)
            moving = rng.random() < config.moving_fraction
            speed = rng.uniform(*config.speed_ranges[name]) if moving else 0.0
            intensity = rng.uniform(0.3, 0.9)
            for _attempt in range(200):
                r = rng.uniform(lo, hi)
                phi = rng.uniform(-math.pi, math.pi)
                cand = _Obj(oid, cls, r * math.cos(phi), r * math.sin(phi), l, w, h, yaw, speed, intensity)
                if _placement_ok(cand, placed, times, ex_min, ex_max, ground):
                    placed.append(cand)
                    oid += 1
                    break
            else:
                log.warning("could not place a %s without overlap; skipped", name)
    return placed


def _placement_ok(cand, placed, times, ex_min, ex_max, ground) -> bool:
    for t in times:
        b = cand.box_at(t, ground)
        pad = Box3D(b.x, b.y, b.z, b.l + 1.0, b.w + 1.0, b.h, b.alpha)
        # keep the ego corridor clear
        reach = 0.5 * math.hypot(b.l, b.w)
        if abs(b.y) < 2.5 + reach and ex_min - reach < b.x < ex_max + reach:
            return False
        for other in placed:
            ob = other.box_at(t, ground)
            if bev_iou(pad, Box3D(ob.x, ob.y, ob.z, ob.l + 1.0, ob.w + 1.0, ob.h, ob.alpha)) > 0.0:
                return False
    return True


def _face_specs(box: Box3D):
    """Yield ``(center, normal, u_axis, v_axis, u_len, v_len)`` for the five non-bottom faces."""
    rot = yaw_matrix(box.alpha)
    ex, ey, ez = rot[:, 0], rot[:, 1], rot[:, 2]
    c = box.center
    hl, hw, hh = 0.5 * box.l, 0.5 * box.w, 0.5 * box.h
    yield c + hl * ex, ex, ey, ez, box.w, box.h
    yield c - hl * ex, -ex, ey, ez, box.w, box.h
    yield c + hw * ey, ey, ex, ez, box.l, box.h
    yield c - hw * ey, -ey, ex, ez, box.l, box.h
    yield c + hh * ez, ez, ex, ey, box.l, box.w


def _sample_faces(config, rng, sensor, box: Box3D) -> np.ndarray:
    chunks = []
    for center, normal, u, v, ul, vl in _face_specs(box):
        if np.dot(sensor - center, normal) <= 0.0:
            continue
        nu = max(1, int(math.ceil(ul / CELL)))
        nv = max(1, int(math.ceil(vl / CELL)))
        du, dv = ul / nu, vl / nv
        iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
        cu = (iu.ravel() + 0.5) * du - 0.5 * ul
        cv = (iv.ravel() + 0.5) * dv - 0.5 * vl
        cells = center + cu[:, None] * u + cv[:, None] * v
        to_sensor = sensor - cells
        dist = np.linalg.norm(to_sensor, axis=1)
        cos_inc = np.clip(to_sensor @ normal / dist, 0.0, 1.0)
        dens = config.point_density_at_10m * (10.0 / np.maximum(dist, 1.0)) ** 2 * cos_inc
        counts = rng.poisson(dens * du * dv)
        total = int(counts.sum())
        if total == 0:
            continue
        owner = np.repeat(np.arange(len(cells)), counts)
        ou = cu[owner] + (rng.random(total) - 0.5) * du
        ov = cv[owner] + (rng.random(total) - 0.5) * dv
        chunks.append(center + ou[:, None] * u + ov[:, None] * v)
    if not chunks:
        return np.zeros((0, 3))
    return np.vstack(chunks)


def segment_hits_box(origin, targets, box: Box3D, eps: float = 1e-9) -> np.ndarray:
    """For each segment ``origin -> target``, does it pass through ``box`` before the target?"""
    if len(targets) == 0:
        return np.zeros(0, dtype=bool)
    o = to_box_frame(np.asarray(origin, dtype=np.float64)[None, :], box)[0]
    p = to_box_frame(targets, box)
    d = p - o
    half = np.array([box.l, box.w, box.h]) * 0.5
    t_lo = np.full(len(p), -np.inf)
    t_hi = np.full(len(p), np.inf)
    for ax in range(3):
        da = d[:, ax]
        par = np.abs(da) < 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[ax] - o[ax]) / da
            t2 = (half[ax] - o[ax]) / da
        lo = np.where(par, np.where(abs(o[ax]) <= half[ax], -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(par, np.where(abs(o[ax]) <= half[ax], np.inf, -np.inf), np.maximum(t1, t2))
        t_lo = np.maximum(t_lo, lo)
        t_hi = np.minimum(t_hi, hi)
    return (t_hi >= t_lo) & (t_lo < 1.0 - eps) & (t_hi > 0.0)


def _render_frame(config, k, pose, objects, boxes, ground):
    rng = np.random.default_rng([config.seed, 1, k])
    sensor = pose.translation + np.array([0.0, 0.0, config.sensor_height])

    parts, ids, inten = [], [], []
    for obj, box in zip(objects, boxes):
        pts = _sample_faces(config, rng, sensor, box)
        if len(pts) and config.noise_sigma > 0:
            pts = pts + rng.normal(0.0, config.noise_sigma, size=pts.shape)
        # keep every attributed point inside its ground-truth box
        local = to_box_frame(pts, box)
        half = np.array([box.l, box.w, box.h]) * 0.5 - 1e-4
        local = np.clip(local, -half, half)
        pts = local @ yaw_matrix(box.alpha).T + box.center
        parts.append(pts)
        ids.append(np.full(len(pts), obj.oid))
        inten.append(np.full(len(pts), obj.intensity))

    # ground: radial density ~ 1/r^2 around the sensor
    rmin, rmax = GROUND_MIN_RANGE, config.range_max
    expected = config.ground_density_at_10m * 100.0 * 2.0 * math.pi * math.log(rmax / rmin)
    n = int(rng.poisson(expected))
    r = rmin * (rmax / rmin) ** rng.random(n)
    phi = rng.uniform(-math.pi, math.pi, n)
    gx = sensor[0] + r * np.cos(phi)
    gy = sensor[1] + r * np.sin(phi)
    gz = ground(gx, gy) + (rng.normal(0.0, config.noise_sigma, n) if config.noise_sigma > 0 else 0.0)
    gpts = np.column_stack([gx, gy, gz])
    keep = np.ones(n, dtype=bool)
    for box in boxes:
        local = to_box_frame(gpts, box)
        keep &= ~((np.abs(local[:, 0]) <= 0.5 * box.l) & (np.abs(local[:, 1]) <= 0.5 * box.w))
    parts.append(gpts[keep])
    ids.append(np.full(int(keep.sum()), -1))
    inten.append(np.full(int(keep.sum()), 0.2))

    pts = np.vstack(parts) if parts else np.zeros((0, 3))
    oid = np.concatenate(ids).astype(np.int64)
    intensity = np.concatenate(inten)

    if config.occlusion and len(pts):
        visible = np.ones(len(pts), dtype=bool)
        for obj, box in zip(objects, boxes):
            others = oid != obj.oid
            hit = segment_hits_box(sensor, pts[others], box)
            idx = np.flatnonzero(others)
            visible[idx[hit]] = False
        pts, oid, intensity = pts[visible], oid[visible], intensity[visible]

    in_range = np.linalg.norm(pts - sensor, axis=1) <= config.range_max
    pts, oid, intensity = pts[in_range], oid[in_range], intensity[in_range]

    ego = (pts - pose.translation) @ pose.rotation
    cloud = np.column_stack([ego, intensity]).astype(np.float32).astype(np.float64)
    return cloud, oid
