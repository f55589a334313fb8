"""Multi-frame clustering: initial pseudo-labels from a point-cloud sequence.

Stages, applied per center frame: persistence scoring and motion-artifact
removal over a ``2n+1`` frame window, ground removal, DBSCAN, oriented box
fitting and size-based classification. Boxes from all center frames are
then tracked in the global frame and their sizes smoothed per track.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ConfigError, DataValidityError
from .geometry import (
    Box3D,
    bev_iou,
    compose_poses,
    invert_pose,
    iou_3d,
    to_box_frame,
    transform_box,
    transform_points,
)
from .scene_io import ClassId, Label, Sequence

log = logging.getLogger(__name__)

NOISE = -1
INF = math.inf


@dataclass(frozen=True)
class ClassRule:
    """Half-open intervals ``(lo, hi]`` on height, width and length."""

    cls: ClassId
    h: tuple = (-INF, INF)
    w: tuple = (-INF, INF)
    l: tuple = (-INF, INF)

    def matches(self, l: float, w: float, h: float) -> bool:
        return self.h[0] < h <= self.h[1] and self.w[0] < w <= self.w[1] and self.l[0] < l <= self.l[1]


_DISCARD_SMALL = ClassRule(ClassId.DISCARD_SMALL, h=(-INF, 0.8))
_VEHICLE = ClassRule(ClassId.VEHICLE, h=(1.0, 3.0), w=(0.5, 3.0), l=(0.5, 8.0))
_PEDESTRIAN = ClassRule(ClassId.PEDESTRIAN, h=(0.8, 2.3), w=(0.2, 1.0), l=(0.2, 1.0))
_CYCLIST = ClassRule(ClassId.CYCLIST, h=(1.4, 2.0), w=(0.5, 1.0), l=(1.0, 2.5))

# Evaluated top to bottom; anything unmatched is DiscardLarge. The narrow
# classes come before Vehicle, whose interval contains both of them.
DEFAULT_CLASS_TABLE = (_DISCARD_SMALL, _PEDESTRIAN, _CYCLIST, _VEHICLE)
# The same rules with Vehicle second. Under this order Cyclist can never match.
VEHICLE_FIRST_CLASS_TABLE = (_DISCARD_SMALL, _VEHICLE, _PEDESTRIAN, _CYCLIST)


def class_table_from_dict(rows) -> tuple:
    """Parse ``[{"cls": "Vehicle", "h": [lo, hi], "w": [...], "l": [...]}, ...]``.

    ``null`` bounds mean unbounded.
    """

    def iv(v):
        if v is None:
            return (-INF, INF)
        lo, hi = v
        return (-INF if lo is None else float(lo), INF if hi is None else float(hi))

    return tuple(
        ClassRule(ClassId.parse(r["cls"]), iv(r.get("h")), iv(r.get("w")), iv(r.get("l"))) for r in rows
    )


def class_table_to_dict(table) -> list:
    def iv(v):
        return [None if not math.isfinite(v[0]) else v[0], None if not math.isfinite(v[1]) else v[1]]

    return [{"cls": r.cls.value, "h": iv(r.h), "w": iv(r.w), "l": iv(r.l)} for r in table]


def classify_box(box: Box3D, thresholds=DEFAULT_CLASS_TABLE) -> ClassId:
    """First matching rule wins; boxes matching no rule are DiscardLarge."""
    for rule in thresholds:
        if rule.matches(box.l, box.w, box.h):
            return rule.cls
    return ClassId.DISCARD_LARGE


def class_range_is_classifiable(cls: ClassId, ranges, thresholds=DEFAULT_CLASS_TABLE) -> bool:
    """True if every size in the closed box ``ranges = ((l0,l1),(w0,w1),(h0,h1))`` classifies as ``cls``."""
    (l0, l1), (w0, w1), (h0, h1) = ranges
    box = {"l": (l0, l1), "w": (w0, w1), "h": (h0, h1)}
    for rule in thresholds:
        inside = all(getattr(rule, k)[0] < box[k][0] and box[k][1] <= getattr(rule, k)[1] for k in "lwh")
        if rule.cls == cls:
            return inside
        disjoint = any(box[k][1] <= getattr(rule, k)[0] or box[k][0] > getattr(rule, k)[1] for k in "lwh")
        if not disjoint:
            return False
    return cls == ClassId.DISCARD_LARGE


@dataclass
class MfcConfig:
    n: int = 5
    ppscore_radius: float = 0.5
    ppscore_threshold: float = 0.5
    ground_inlier_dist: float = 0.06
    ground_tile: float = 20.0
    ground_iterations: int = 200
    ground_max_tilt_deg: float = 15.0
    # plane hypotheses are drawn only from points within this height of the
    # mean of the lowest ``ground_seed_count`` points
    ground_seed_band: float = 0.5
    ground_seed_count: int = 20
    # planes are scored on the lowest point of each BEV cell of this size
    ground_cell: float = 0.5
    dbscan_eps: float = 0.7
    dbscan_min_pts: int = 5
    min_cluster_points: int = 5
    min_box_extent: float = 0.1
    yaw_step_deg: float = 0.5
    class_thresholds: tuple = DEFAULT_CLASS_TABLE
    track_iou_min: float = 0.1
    track_max_age: int = 2
    track_iou_mode: str = "bev"
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.class_thresholds, tuple) or (
            self.class_thresholds and not isinstance(self.class_thresholds[0], ClassRule)
        ):
            self.class_thresholds = class_table_from_dict(self.class_thresholds)
        self.validate()

    def validate(self):
        if self.n < 0:
            raise ConfigError("mfc.n must be >= 0")
        if self.dbscan_eps <= 0 or self.ppscore_radius <= 0:
            raise ConfigError("mfc.dbscan_eps and mfc.ppscore_radius must be positive")
        if self.dbscan_min_pts < 1 or self.min_cluster_points < 1:
            raise ConfigError("mfc.dbscan_min_pts and mfc.min_cluster_points must be >= 1")
        if not 0.0 <= self.ppscore_threshold <= 1.0 or not 0.0 <= self.track_iou_min <= 1.0:
            raise ConfigError("mfc thresholds must lie in [0, 1]")
        if self.ground_inlier_dist <= 0 or self.ground_tile <= 0 or self.ground_iterations < 1:
            raise ConfigError("invalid ground-removal parameters")
        if self.ground_seed_band <= 0 or self.ground_seed_count < 1 or self.ground_cell <= 0:
            raise ConfigError("invalid ground-removal parameters")
        if self.track_iou_mode not in ("bev", "3d"):
            raise ConfigError("mfc.track_iou_mode must be 'bev' or '3d'")
        if self.min_box_extent <= 0 or self.yaw_step_deg <= 0:
            raise ConfigError("mfc.min_box_extent and mfc.yaw_step_deg must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "MfcConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown mfc config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_thresholds"] = class_table_to_dict(self.class_thresholds)
        return d


@dataclass
class AggregatedCloud:
    points: np.ndarray  # (N, 4) in the center frame's ego coordinates
    source_frame: np.ndarray  # (N,) frame index each point came from
    center: int = 0
    status: str = "ok"

    def subset(self, mask) -> "AggregatedCloud":
        return AggregatedCloud(self.points[mask], self.source_frame[mask], self.center, self.status)

    def __len__(self):
        return len(self.points)


@dataclass
class Track:
    tau: int
    beta: ClassId
    boxes: list = field(default_factory=list)  # (frame_index, Box3D), strictly increasing frames
    detections: list = field(default_factory=list)  # (frame_index, index into that frame's input)
    det_classes: list = field(default_factory=list)

    def __len__(self):
        return len(self.boxes)


# -- persistence ----------------------------------------------------------------


def frame_window(sequence: Sequence, center: int, n: int) -> list:
    """Positions of the frames in ``[center - n, center + n]``, shrunk at the sequence edges."""
    c = sequence.position_of(center)
    return list(range(max(0, c - n), min(len(sequence) - 1, c + n) + 1))


class PersistenceIndex:
    """Caches, for every frame pair, which points of one have a neighbor in the other.

    Built once per sequence so that scoring many center frames does not
    repeat the nearest-neighbor queries.
    """

    def __init__(self, sequence: Sequence, radius: float):
        self.sequence = sequence
        self.radius = radius
        self._global = [transform_points(f.points, f.pose)[:, :3] for f in sequence.frames]
        self._trees = [cKDTree(p) if len(p) else None for p in self._global]
        self._cache = {}

    def has_neighbor(self, i: int, j: int) -> np.ndarray:
        """Boolean mask over points of frame position ``i``: any point of ``j`` within radius."""
        if i == j:
            return np.ones(len(self._global[i]), dtype=bool)
        key = (i, j)
        if key not in self._cache:
            pts = self._global[i]
            tree = self._trees[j]
            if tree is None or len(pts) == 0:
                mask = np.zeros(len(pts), dtype=bool)
            else:
                d, _ = tree.query(pts, k=1, distance_upper_bound=self.radius)
                mask = np.isfinite(d)
            self._cache[key] = mask
        return self._cache[key]

    def scores(self, center: int, n: int) -> dict:
        window = frame_window(self.sequence, center, n)
        out = {}
        for i in window:
            count = np.zeros(len(self._global[i]))
            for j in window:
                count += self.has_neighbor(i, j)
            out[self.sequence.frames[i].index] = count / len(window)
        return out


def compute_ppscore(sequence: Sequence, center: int, n: int, radius: float, index=None) -> dict:
    """Persistence score of every point in the window around ``center``.

    A point's score is the fraction of window frames (its own included) that
    hold at least one point within ``radius`` of it in the global frame.
    At sequence edges the window shrinks and the fraction uses the actual
    window size.

    Returns:
        ``{frame_index: (N,) scores}`` for every frame in the window.
    """
    if index is None or index.radius != radius or index.sequence is not sequence:
        index = PersistenceIndex(sequence, radius)
    return index.scores(center, n)


def remove_motion_artifacts(sequence: Sequence, center: int, config: MfcConfig, index=None) -> AggregatedCloud:
    """Aggregate the window into the center frame, dropping non-persistent points of other frames.

    Every point of the center frame is kept. Output coordinates are rounded
    to float32 precision so they survive the on-disk point format unchanged.
    """
    scores = compute_ppscore(sequence, center, config.n, config.ppscore_radius, index)
    c_pos = sequence.position_of(center)
    to_center = invert_pose(sequence.frames[c_pos].pose)
    chunks, sources = [], []
    for pos in frame_window(sequence, center, config.n):
        frame = sequence.frames[pos]
        if pos == c_pos:
            pts = frame.points
        else:
            keep = scores[frame.index] >= config.ppscore_threshold
            pts = transform_points(frame.points[keep], compose_poses(to_center, frame.pose))
        chunks.append(pts)
        sources.append(np.full(len(pts), frame.index, dtype=np.int64))
    points = np.vstack(chunks).astype(np.float32).astype(np.float64)
    return AggregatedCloud(points, np.concatenate(sources), center)


# -- ground -----------------------------------------------------------------------


def _fit_plane_lsq(pts):
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    normal = vt[-1]
    if normal[2] < 0:
        normal = -normal
    return normal, -float(normal @ c)


def _lowest_per_cell(pts, cell: float):
    """Lowest point of every occupied ``cell`` x ``cell`` BEV cell.

    Every patch of ground then carries one vote however densely it was hit,
    so nearby objects cannot outvote the sparse ground around them.
    """
    keys = np.floor(pts[:, :2] / cell).astype(np.int64)
    order = np.lexsort((pts[:, 2], keys[:, 1], keys[:, 0]))
    k = keys[order]
    first = np.ones(len(k), dtype=bool)
    first[1:] = np.any(k[1:] != k[:-1], axis=1)
    return pts[order[first]]


def _ransac_plane(pts, config: MfcConfig, rng, max_score_pts: int = 1500):
    """Best near-horizontal plane ``(normal, d)`` or None."""
    low = _lowest_per_cell(pts, config.ground_cell)
    n = len(low)
    if n < 3:
        return None
    score_pts = low if n <= max_score_pts else low[rng.choice(n, max_score_pts, replace=False)]
    # Hypotheses come from the lowest points only. A dense flat roof close to
    # the sensor can outnumber the ground in a tile and would win otherwise.
    k = min(config.ground_seed_count, n)
    floor = float(np.partition(low[:, 2], k - 1)[:k].mean())
    seeds = low[low[:, 2] <= floor + config.ground_seed_band]
    if len(seeds) < 3:
        return None
    idx = rng.integers(0, len(seeds), size=(config.ground_iterations, 3))
    a, b, c = seeds[idx[:, 0]], seeds[idx[:, 1]], seeds[idx[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    valid = norms > 1e-9
    normals[valid] /= norms[valid, None]
    normals[normals[:, 2] < 0] *= -1.0
    valid &= normals[:, 2] >= math.cos(math.radians(config.ground_max_tilt_deg))
    if not valid.any():
        return None
    normals, a = normals[valid], a[valid]
    d = -np.einsum("ij,ij->i", normals, a)
    dist = np.abs(score_pts @ normals.T + d)
    counts = (dist <= config.ground_inlier_dist).sum(axis=0)
    best = int(np.argmax(counts))
    normal, off = normals[best], d[best]
    # per-cell minima sit at the bottom of the noise band; the refit on all
    # points near the plane removes that offset
    inliers = np.abs(pts @ normal + off) <= config.ground_inlier_dist
    if inliers.sum() >= 3:
        refit = _fit_plane_lsq(pts[inliers])
        if refit[0][2] >= math.cos(math.radians(config.ground_max_tilt_deg)):
            return refit
    return normal, off


def ground_mask(points, config: MfcConfig) -> np.ndarray:
    """Boolean mask of ground points, from per-tile RANSAC planes.

    Tiles with too few points fall back to a plane fitted on the whole cloud.
    """
    pts = np.asarray(points)[:, :3]
    mask = np.zeros(len(pts), dtype=bool)
    if len(pts) < 3:
        return mask
    global_plane = _ransac_plane(pts, config, np.random.default_rng([config.seed, 0]))
    tiles = np.floor(pts[:, :2] / config.ground_tile).astype(np.int64)
    keys, inverse = np.unique(tiles, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    offset = 1 << 30
    for t, (tx, ty) in enumerate(keys):
        sel = np.flatnonzero(inverse == t)
        tile_pts = pts[sel]
        plane = None
        if len(sel) >= 10:
            rng = np.random.default_rng([config.seed, 1, int(tx) + offset, int(ty) + offset])
            plane = _ransac_plane(tile_pts, config, rng)
        if plane is None:
            plane = global_plane
        if plane is None:
            continue
        normal, off = plane
        mask[sel] = np.abs(tile_pts @ normal + off) <= config.ground_inlier_dist
    return mask


def remove_ground(cloud: AggregatedCloud, config: MfcConfig) -> AggregatedCloud:
    """Drop ground points. Clouds with fewer than 3 points come back unchanged with status ``"too-few-points"``."""
    if len(cloud) < 3:
        log.warning("ground removal skipped: only %d points", len(cloud))
        out = cloud.subset(np.ones(len(cloud), dtype=bool))
        out.status = "too-few-points"
        return out
    return cloud.subset(~ground_mask(cloud.points, config))


# -- clustering ---------------------------------------------------------------------


def cluster_dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN on 3D Euclidean distance.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Clusters are connected components of core points; a
    border point joins the cluster of its lowest-index core neighbor.
    Cluster ids are numbered by their lowest point index, so the result
    does not depend on visiting order.

    Returns:
        ``(N,)`` int array, ``-1`` for noise.
    """
    if eps <= 0 or min_pts < 1:
        raise ConfigError("dbscan needs eps > 0 and min_pts >= 1")
    pts = np.asarray(points, dtype=np.float64)[:, :3] if len(points) else np.zeros((0, 3))
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    pairs = cKDTree(pts).query_pairs(eps, output_type="ndarray")
    deg = np.ones(n, dtype=np.int64)
    np.add.at(deg, pairs[:, 0], 1)
    np.add.at(deg, pairs[:, 1], 1)
    core = deg >= min_pts
    if not core.any():
        return labels
    both = pairs[core[pairs[:, 0]] & core[pairs[:, 1]]]
    graph = coo_matrix((np.ones(len(both)), (both[:, 0], both[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    core_idx = np.flatnonzero(core)
    # renumber components by their lowest core index
    first = {}
    for i in core_idx:
        first.setdefault(comp[i], len(first))
    labels[core_idx] = [first[comp[i]] for i in core_idx]
    # border points: lowest-index core neighbor wins
    best = np.full(n, n, dtype=np.int64)
    for a, b in ((0, 1), (1, 0)):
        src, dst = pairs[:, a], pairs[:, b]
        sel = core[dst] & ~core[src]
        np.minimum.at(best, src[sel], dst[sel])
    border = (~core) & (best < n)
    labels[border] = labels[best[border]]
    return labels


# -- box fitting -----------------------------------------------------------------------


def fit_yaw(xy, step_deg: float = 0.5) -> float:
    """Yaw in ``[0, pi/2)`` whose bounding rectangle minimizes the summed point-to-nearest-edge distance."""
    pts = np.asarray(xy, dtype=np.float64)
    pts = pts - pts.mean(axis=0)
    thetas = np.deg2rad(np.arange(0.0, 90.0, step_deg))
    c, s = np.cos(thetas)[:, None], np.sin(thetas)[:, None]
    u = c * pts[:, 0] + s * pts[:, 1]
    v = -s * pts[:, 0] + c * pts[:, 1]
    du = np.minimum(u - u.min(axis=1, keepdims=True), u.max(axis=1, keepdims=True) - u)
    dv = np.minimum(v - v.min(axis=1, keepdims=True), v.max(axis=1, keepdims=True) - v)
    cost = np.minimum(du, dv).sum(axis=1)
    return float(thetas[int(np.argmin(cost))])


def fit_box(cluster, min_points: int = 1, step_deg: float = 0.5, min_extent: float = 0.1) -> Box3D:
    """Oriented box enclosing ``cluster``.

    The vertical extent is ``[min z, max z]``. The heading comes from an
    exhaustive yaw search (see :func:`fit_yaw`); ``l`` is the longer BEV side
    and ``alpha`` lies in ``[-pi/2, pi/2)``. Extents below ``min_extent`` are
    widened symmetrically.
    """
    pts = np.asarray(cluster, dtype=np.float64)
    if len(pts) < max(1, min_points):
        raise DataValidityError(f"cluster has {len(pts)} points, need at least {min_points}")
    xy = pts[:, :2]
    mean = xy.mean(axis=0)
    theta = fit_yaw(xy, step_deg) if len(pts) > 1 else 0.0
    c, s = math.cos(theta), math.sin(theta)
    rel = xy - mean
    u = c * rel[:, 0] + s * rel[:, 1]
    v = -s * rel[:, 0] + c * rel[:, 1]
    e1, e2 = float(u.max() - u.min()), float(v.max() - v.min())
    uc, vc = 0.5 * (u.max() + u.min()), 0.5 * (v.max() + v.min())
    cx = mean[0] + c * uc - s * vc
    cy = mean[1] + s * uc + c * vc
    zmin, zmax = float(pts[:, 2].min()), float(pts[:, 2].max())
    if e1 >= e2:
        alpha, l, w = theta, e1, e2
    else:
        alpha, l, w = theta - 0.5 * math.pi, e2, e1
    h = zmax - zmin
    return Box3D(
        cx,
        cy,
        0.5 * (zmin + zmax),
        max(l, min_extent),
        max(w, min_extent),
        max(h, min_extent),
        alpha,
    )


# -- tracking ------------------------------------------------------------------------------


def _predict(track: Track, frame_index: int) -> Box3D:
    f1, b1 = track.boxes[-1]
    if len(track.boxes) < 2:
        return b1
    f0, b0 = track.boxes[-2]
    gap = frame_index - f1
    vx = (b1.x - b0.x) / (f1 - f0)
    vy = (b1.y - b0.y) / (f1 - f0)
    return b1.with_center(b1.x + vx * gap, b1.y + vy * gap, b1.z)


def _majority_class(classes) -> ClassId:
    fg = [c for c in classes if c.is_foreground]
    if not fg:
        return classes[0]
    counts = {}
    for c in fg:
        counts[c] = counts.get(c, 0) + 1
    top = max(counts.values())
    return next(c for c in fg if counts[c] == top)


def track_boxes(per_frame_boxes, iou_min: float = 0.1, max_age: int = 2, mode: str = "bev") -> list:
    """Greedy IoU tracking with constant-velocity prediction.

    Args:
        per_frame_boxes: ``[(frame_index, [(Box3D, ClassId), ...]), ...]`` in
            ascending frame order, all in one common coordinate frame.
        iou_min: association gate.
        max_age: frames a track may go unmatched before it ends.
        mode: ``"bev"`` or ``"3d"`` IoU.

    DiscardSmall detections may extend an existing track but never start
    one; unmatched DiscardSmall detections are dropped. A track's class is
    the majority foreground class of its members.
    """
    iou = iou_3d if mode == "3d" else bev_iou
    tracks, active = [], []
    last_frame = None
    for frame_index, dets in per_frame_boxes:
        if last_frame is not None and frame_index <= last_frame:
            raise DataValidityError("frames must be in strictly increasing order")
        last_frame = frame_index
        active = [t for t in active if frame_index - t.boxes[-1][0] <= max_age + 1]
        cands = []
        for ti, trk in enumerate(active):
            pred = _predict(trk, frame_index)
            for di, (box, _cls) in enumerate(dets):
                score = iou(pred, box)
                if score >= iou_min and score > 0.0:
                    cands.append((-score, ti, di))
        cands.sort()
        used_t, used_d = set(), set()
        for _neg, ti, di in cands:
            if ti in used_t or di in used_d:
                continue
            used_t.add(ti)
            used_d.add(di)
            trk = active[ti]
            box, cls = dets[di]
            trk.boxes.append((frame_index, box))
            trk.detections.append((frame_index, di))
            trk.det_classes.append(cls)
        for di, (box, cls) in enumerate(dets):
            if di in used_d or not cls.is_foreground:
                continue
            trk = Track(len(tracks), cls, [(frame_index, box)], [(frame_index, di)], [cls])
            tracks.append(trk)
            active.append(trk)
    for trk in tracks:
        trk.beta = _majority_class(trk.det_classes)
    return tracks


def _lower_median(values) -> float:
    s = sorted(values)
    return s[(len(s) - 1) // 2]


def smooth_tracks(tracks, viewpoints: Optional[dict] = None) -> list:
    """Give every box of a track the track's element-wise median size.

    Resizing keeps the bottom face fixed and, along length and width, the
    face nearest the sensor (``viewpoints[frame_index]``, a point in the
    track frame): the observed points lie on the sensor-facing surfaces.
    Without a viewpoint the horizontal resize is symmetric.

    Returns:
        One :class:`Label` per (track, frame), ordered by track then frame.
    """
    labels = []
    for trk in tracks:
        ls = _lower_median([b.l for _, b in trk.boxes])
        ws = _lower_median([b.w for _, b in trk.boxes])
        hs = _lower_median([b.h for _, b in trk.boxes])
        for frame_index, box in trk.boxes:
            vp = None if viewpoints is None else viewpoints.get(frame_index)
            labels.append(Label(resize_anchored(box, ls, ws, hs, vp), trk.beta, trk.tau, frame_index))
    return labels


def resize_anchored(box: Box3D, l: float, w: float, h: float, viewpoint=None) -> Box3D:
    du = dv = 0.0
    if viewpoint is not None:
        o = to_box_frame(np.asarray(viewpoint, dtype=np.float64)[None, :3], box)[0]
        if abs(o[0]) > 0.5 * box.l:
            du = math.copysign(0.5 * (box.l - l), o[0])
        if abs(o[1]) > 0.5 * box.w:
            dv = math.copysign(0.5 * (box.w - w), o[1])
    c, s = math.cos(box.alpha), math.sin(box.alpha)
    return Box3D(
        box.x + c * du - s * dv,
        box.y + s * du + c * dv,
        box.z + 0.5 * (h - box.h),
        l,
        w,
        h,
        box.alpha,
    )


# -- end to end ------------------------------------------------------------------------------


@dataclass
class MfcResult:
    labels: list  # Label, ego frame of label.frame_index
    clusters: list  # (N, 4) cluster points per label, same frame as the label
    stats: dict


def detect_frame(sequence: Sequence, center: int, config: MfcConfig, index=None, stats=None):
    """Boxes, classes and cluster points for one center frame (center-frame ego coordinates)."""
    stats = stats if stats is not None else {}
    agg = remove_motion_artifacts(sequence, center, config, index)
    stats["aggregated_points"] = stats.get("aggregated_points", 0) + len(agg)
    fg = remove_ground(agg, config)
    ids = cluster_dbscan(fg.points, config.dbscan_eps, config.dbscan_min_pts)
    dets = []
    if len(ids) == 0:
        return dets
    order = np.argsort(ids, kind="stable")
    bounds = np.flatnonzero(np.diff(ids[order])) + 1
    for group in np.split(order, bounds):
        if ids[group[0]] == NOISE:
            continue
        pts = fg.points[group]
        if len(pts) < config.min_cluster_points:
            stats["rejected_clusters"] = stats.get("rejected_clusters", 0) + 1
            continue
        box = fit_box(pts, config.min_cluster_points, config.yaw_step_deg, config.min_box_extent)
        cls = classify_box(box, config.class_thresholds)
        if cls == ClassId.DISCARD_LARGE:
            stats["discard_large"] = stats.get("discard_large", 0) + 1
            continue
        dets.append((box, cls, pts))
    return dets


def run_mfc(sequence: Sequence, config: MfcConfig) -> MfcResult:
    """Full multi-frame clustering on one sequence, keeping each label's cluster points."""
    stats = {"frames": len(sequence)}
    index = PersistenceIndex(sequence, config.ppscore_radius)
    per_frame, clouds, viewpoints = [], {}, {}
    for frame in sequence.frames:
        dets = detect_frame(sequence, frame.index, config, index, stats)
        per_frame.append((frame.index, [(transform_box(b, frame.pose), c) for b, c, _ in dets]))
        clouds[frame.index] = [p for _, _, p in dets]
        viewpoints[frame.index] = frame.pose.translation
    stats["detections"] = sum(len(d) for _, d in per_frame)
    tracks = track_boxes(per_frame, config.track_iou_min, config.track_max_age, config.track_iou_mode)
    stats["tracks"] = len(tracks)
    smoothed = smooth_tracks(tracks, viewpoints)
    det_of = {}
    for trk in tracks:
        for (fi, di) in trk.detections:
            det_of[(trk.tau, fi)] = di
    poses = {f.index: f.pose for f in sequence.frames}
    labels, cluster_pts = [], []
    for lab in smoothed:
        to_ego = invert_pose(poses[lab.frame_index])
        labels.append(lab.with_box(transform_box(lab.box, to_ego)))
        cluster_pts.append(clouds[lab.frame_index][det_of[(lab.tau, lab.frame_index)]])
    order = sorted(range(len(labels)), key=lambda i: (labels[i].frame_index, labels[i].tau))
    labels = [labels[i] for i in order]
    cluster_pts = [cluster_pts[i] for i in order]
    stats["labels"] = len(labels)
    return MfcResult(labels, cluster_pts, stats)


def generate_initial_labels(sequence: Sequence, config: MfcConfig) -> list:
    """Initial pseudo-labels for every frame of ``sequence``."""
    return run_mfc(sequence, config).labels
