"""Rigid transforms, oriented 3D boxes and rotated IoU.

Conventions: right-handed frame, z up, yaw measured from +x toward +y.
Point clouds are ``(N, 3)`` or ``(N, 4)`` float arrays; the optional fourth
column is intensity and is carried through every transform untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataValidityError

ORTHO_TOL = 1e-9
# intersections smaller than this are clipping noise
AREA_EPS = 1e-12


def normalize_angle(angle: float) -> float:
    """Wrap an angle into ``[-pi, pi)``; angles already in range come back unchanged."""
    if -math.pi <= angle < math.pi:
        return float(angle)
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a < 0.0:
        a += 2.0 * math.pi
    a -= math.pi
    # fmod can land exactly on +pi after the shift for tiny negative inputs
    if a >= math.pi:
        a -= 2.0 * math.pi
    return a


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p -> R p + t`` (ego-to-global for frames)."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tol: float = ORTHO_TOL

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise DataValidityError(f"pose needs a 3x3 rotation and 3-vector, got {r.shape}, {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise DataValidityError("pose contains non-finite values")
        ortho_err = np.abs(r.T @ r - np.eye(3)).max()
        det_err = abs(np.linalg.det(r) - 1.0)
        if ortho_err > self.tol or det_err > self.tol:
            raise DataValidityError(
                f"rotation is not a proper orthonormal matrix (|RtR-I|={ortho_err:.3g}, |det-1|={det_err:.3g})"
            )
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(yaw_matrix(yaw), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        """Build from a 3x4 ``[R|t]`` or 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self):
        return f"Pose(yaw={self.yaw:.6f}, translation={self.translation.tolist()})"


def compose_poses(a: Pose, b: Pose) -> Pose:
    """Return ``a * b`` (apply ``b`` first, then ``a``)."""
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    return Pose(r, t, tol=max(a.tol, b.tol, 1e-8))


def invert_pose(pose: Pose) -> Pose:
    rt = pose.rotation.T
    return Pose(rt, -rt @ pose.translation, tol=pose.tol)


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise DataValidityError(f"points must be an (N, 3+) array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts[:, :3])):
        raise DataValidityError("point cloud contains non-finite coordinates")
    return pts


def transform_points(points, pose: Pose) -> np.ndarray:
    """Apply ``pose`` to each point; extra columns (intensity) are copied.

    Raises:
        DataValidityError: a coordinate is NaN or infinite.
    """
    pts = _check_points(points)
    out = pts.copy()
    out[:, :3] = pts[:, :3] @ pose.rotation.T + pose.translation
    return out


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box. ``(x, y, z)`` is the box center, ``alpha`` the yaw."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    alpha: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.l, self.w, self.h, self.alpha)
        if not all(math.isfinite(v) for v in vals):
            raise DataValidityError(f"box has non-finite fields: {vals}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise DataValidityError(f"box dimensions must be positive, got l={self.l}, w={self.w}, h={self.h}")
        for name in ("x", "y", "z", "l", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "alpha", normalize_angle(float(self.alpha)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def z_min(self) -> float:
        return self.z - 0.5 * self.h

    @property
    def z_max(self) -> float:
        return self.z + 0.5 * self.h

    def with_size(self, l, w, h) -> "Box3D":
        return replace(self, l=l, w=w, h=h)

    def with_center(self, x, y, z) -> "Box3D":
        return replace(self, x=x, y=y, z=z)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.alpha])


def transform_box(box: Box3D, pose: Pose) -> Box3D:
    """Move a box by a (yaw-dominant) rigid transform."""
    c = pose.rotation @ box.center + pose.translation
    return Box3D(c[0], c[1], c[2], box.l, box.w, box.h, box.alpha + pose.yaw)


def box_corners(box: Box3D) -> np.ndarray:
    """Return the 8 corners as an ``(8, 3)`` array.

    Order: bottom face counter-clockwise starting at the ``(+l/2, +w/2)``
    corner, then the top face in the same order.
    """
    hl, hw, hh = 0.5 * box.l, 0.5 * box.w, 0.5 * box.h
    local = np.array(
        [
            [hl, hw, -hh],
            [-hl, hw, -hh],
            [-hl, -hw, -hh],
            [hl, -hw, -hh],
            [hl, hw, hh],
            [-hl, hw, hh],
            [-hl, -hw, hh],
            [hl, -hw, hh],
        ]
    )
    return local @ yaw_matrix(box.alpha).T + box.center


def bev_polygon(box: Box3D) -> np.ndarray:
    """Counter-clockwise ``(4, 2)`` footprint."""
    return box_corners(box)[:4, :2]


def to_box_frame(points, box: Box3D) -> np.ndarray:
    """Express ``(N, 3+)`` points in the box-local frame (center origin, alpha = 0)."""
    pts = np.asarray(points, dtype=np.float64)
    out = pts.copy()
    d = pts[:, :3] - box.center
    c, s = math.cos(box.alpha), math.sin(box.alpha)
    out[:, 0] = c * d[:, 0] + s * d[:, 1]
    out[:, 1] = -s * d[:, 0] + c * d[:, 1]
    out[:, 2] = d[:, 2]
    return out


def points_in_box(points, box: Box3D, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside ``box`` grown by ``margin`` on every face."""
    local = to_box_frame(np.asarray(points)[:, :3], box)
    half = np.array([box.l, box.w, box.h]) * 0.5 + margin
    return np.all(np.abs(local[:, :3]) <= half, axis=1)


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject, clipper):
    """Sutherland-Hodgman: clip polygon ``subject`` by convex CCW ``clipper``."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = output
        output = []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0.0:
                if s_prev < 0.0:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0.0:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return output


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _ordered(a: Box3D, b: Box3D):
    # canonical argument order makes the float result exactly symmetric
    return (a, b) if astuple_key(a) <= astuple_key(b) else (b, a)


def astuple_key(box: Box3D):
    return (box.x, box.y, box.z, box.l, box.w, box.h, box.alpha)


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    a, b = _ordered(a, b)
    # circumscribed circles disjoint -> no overlap
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.x - b.x, a.y - b.y) >= ra + rb:
        return 0.0
    if (a.x, a.y, a.l, a.w, a.alpha) == (b.x, b.y, b.l, b.w, b.alpha):
        return a.l * a.w
    inter = clip_convex(bev_polygon(a), bev_polygon(b))
    area = polygon_area(inter) if len(inter) >= 3 else 0.0
    return area if area > AREA_EPS else 0.0


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated IoU of the two footprints."""
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return min(1.0, max(0.0, inter / union))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: BEV intersection area times vertical overlap."""
    dz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(1.0, max(0.0, inter / union))


def pairwise_iou(boxes_a, boxes_b, mode: str = "bev") -> np.ndarray:
    fn = iou_3d if mode == "3d" else bev_iou
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out
