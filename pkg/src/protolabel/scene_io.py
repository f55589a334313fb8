"""Sequences, labels and their on-disk formats.

Sequence layout::

    <dir>/manifest.json      {"sequence_id": ..., "frames": [{"index", "timestamp",
                              "pose": [12 floats, row-major 3x4], "points": "<rel path>"}]}
    <dir>/frames/000000.bin  little-endian float32 (x, y, z, intensity) records

Label files are JSON Lines. The first line is a header object; each further
line holds one label with keys ``frame, x, y, z, l, w, h, alpha, beta, tau, css``.

Writers are not safe against concurrent writes to the same path; callers
must serialize those. Readers are reentrant.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataValidityError, MissingFileError, ParseError
from .geometry import Box3D, Pose

log = logging.getLogger(__name__)

POINT_DTYPE = np.dtype("<f4")
RECORD_BYTES = 4 * POINT_DTYPE.itemsize
LABEL_HEADER = {"format": "protolabel.labels", "version": 1}
LABEL_KEYS = ("frame", "x", "y", "z", "l", "w", "h", "alpha", "beta", "tau", "css")

# drift above this is repaired on read, above the hard limit it is an error
POSE_REPAIR_TOL = 1e-6
POSE_REJECT_TOL = 1e-3


class ClassId(str, enum.Enum):
    DISCARD_SMALL = "DiscardSmall"
    VEHICLE = "Vehicle"
    PEDESTRIAN = "Pedestrian"
    CYCLIST = "Cyclist"
    DISCARD_LARGE = "DiscardLarge"

    @property
    def is_foreground(self) -> bool:
        return self in (ClassId.VEHICLE, ClassId.PEDESTRIAN, ClassId.CYCLIST)

    @classmethod
    def parse(cls, value) -> "ClassId":
        if isinstance(value, ClassId):
            return value
        try:
            return cls(value)
        except ValueError:
            for member in cls:
                if member.name == str(value).upper():
                    return member
            raise

    def __str__(self):
        return self.value


@dataclass(eq=False)
class Frame:
    index: int
    timestamp: float
    pose: Pose
    points: np.ndarray  # (N, 4) ego-frame x, y, z, intensity

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise DataValidityError(f"frame {self.index}: points must be (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataValidityError(f"frame {self.index}: non-finite point values")
        self.points = pts


@dataclass(eq=False)
class Sequence:
    id: str
    frames: list

    def __post_init__(self):
        if not self.frames:
            raise DataValidityError(f"sequence {self.id!r} has no frames")
        idx = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise DataValidityError(f"sequence {self.id!r}: frame indices must be strictly increasing")
        ts = [f.timestamp for f in self.frames]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise DataValidityError(f"sequence {self.id!r}: timestamps must be non-decreasing")

    def __len__(self):
        return len(self.frames)

    def position_of(self, frame_index: int) -> int:
        for i, f in enumerate(self.frames):
            if f.index == frame_index:
                return i
        raise KeyError(frame_index)


@dataclass(frozen=True)
class Label:
    """A pseudo-label: box, class identity, track identity and CSS score."""

    box: Box3D
    beta: ClassId
    tau: int
    frame_index: int
    css: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "beta", ClassId.parse(self.beta))
        if self.tau < 0:
            raise DataValidityError(f"track identity must be non-negative, got {self.tau}")
        if self.css is not None:
            if not (0.0 <= self.css <= 1.0):
                raise DataValidityError(f"css score must lie in [0, 1], got {self.css}")
            object.__setattr__(self, "css", float(self.css))

    def with_box(self, box: Box3D) -> "Label":
        return replace(self, box=box)

    def with_css(self, css: Optional[float]) -> "Label":
        return replace(self, css=css)


# -- points -------------------------------------------------------------------


def write_points(points, path) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        pts = pts.reshape(0, 4)
    if pts.shape[1] == 3:
        pts = np.hstack([pts, np.zeros((len(pts), 1))])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pts.astype(POINT_DTYPE).tofile(path)


def read_points(path, context: str = "") -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path, context)
    raw = path.read_bytes()
    usable = len(raw) - len(raw) % RECORD_BYTES
    if usable != len(raw):
        raise ParseError("truncated point record", path=path, offset=usable)
    pts = np.frombuffer(raw, dtype=POINT_DTYPE).reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
        raise ParseError("non-finite point value", path=path, offset=bad * RECORD_BYTES)
    return pts


# -- sequences ------------------------------------------------------------------


def _pose_to_list(pose: Pose):
    return [float(v) for v in np.hstack([pose.rotation, pose.translation[:, None]]).reshape(-1)]


def _pose_from_list(values, where: str) -> Pose:
    if not isinstance(values, list) or len(values) != 12:
        raise DataValidityError(f"{where}: pose must be 12 floats")
    m = np.asarray(values, dtype=np.float64).reshape(3, 4)
    if not np.all(np.isfinite(m)):
        raise DataValidityError(f"{where}: pose has non-finite entries")
    r = m[:, :3]
    err = max(np.abs(r.T @ r - np.eye(3)).max(), abs(np.linalg.det(r) - 1.0))
    if err > POSE_REJECT_TOL:
        raise DataValidityError(f"{where}: rotation not orthonormal (error {err:.3g})")
    if err > POSE_REPAIR_TOL:
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        log.info("re-orthonormalized pose at %s (drift %.3g)", where, err)
    return Pose(r, m[:, 3], tol=max(POSE_REPAIR_TOL, 1e-9))


def load_json(path) -> object:
    """Parse a UTF-8 JSON file; errors carry the path and byte offset."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("invalid UTF-8", path=path, offset=exc.start) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed JSON: {exc.msg}", path=path, offset=offset) from None


def write_sequence(sequence: Sequence, directory) -> Path:
    """Write ``sequence`` below ``directory``; returns the manifest path."""
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for frame in sequence.frames:
        rel = f"frames/{frame.index:06d}.bin"
        write_points(frame.points, directory / rel)
        entries.append(
            {
                "index": int(frame.index),
                "timestamp": float(frame.timestamp),
                "pose": _pose_to_list(frame.pose),
                "points": rel,
            }
        )
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"sequence_id": sequence.id, "frames": entries}, indent=1) + "\n")
    return manifest


def read_sequence(path) -> Sequence:
    """Load a sequence from a manifest file or the directory holding one.

    Raises:
        MissingFileError: manifest or a referenced point file is absent.
        ParseError: malformed JSON or truncated point file.
        DataValidityError: empty frame list or a pose far from orthonormal.
    """
    path = Path(path)
    manifest = path / "manifest.json" if path.is_dir() else path
    if not manifest.is_file():
        raise MissingFileError(manifest)
    doc = load_json(manifest)
    if not isinstance(doc, dict) or "frames" not in doc:
        raise ParseError("manifest lacks a 'frames' list", path=manifest, offset=0)
    seq_id = str(doc.get("sequence_id", manifest.parent.name))
    records = doc["frames"]
    if not isinstance(records, list) or not records:
        raise DataValidityError(f"{manifest}: sequence must contain at least one frame")
    frames = []
    for k, rec in enumerate(records):
        where = f"{manifest} frame #{k}"
        try:
            index = int(rec["index"])
            timestamp = float(rec["timestamp"])
            rel = rec["points"]
            pose_vals = rec["pose"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad frame record #{k}: {exc}", path=manifest) from None
        pose = _pose_from_list(pose_vals, where)
        pts = read_points(manifest.parent / rel, context=str(manifest))
        frames.append(Frame(index, timestamp, pose, pts))
    frames.sort(key=lambda f: f.index)
    return Sequence(seq_id, frames)


# -- labels ---------------------------------------------------------------------


def label_to_record(label: Label) -> dict:
    b = label.box
    return {
        "frame": int(label.frame_index),
        "x": b.x,
        "y": b.y,
        "z": b.z,
        "l": b.l,
        "w": b.w,
        "h": b.h,
        "alpha": b.alpha,
        "beta": label.beta.value,
        "tau": int(label.tau),
        "css": label.css,
    }


def label_from_record(rec: dict) -> Label:
    box = Box3D(rec["x"], rec["y"], rec["z"], rec["l"], rec["w"], rec["h"], rec["alpha"])
    return Label(box, ClassId.parse(rec["beta"]), int(rec["tau"]), int(rec["frame"]), rec.get("css"))


def write_labels(labels, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps(LABEL_HEADER) + "\n")
            for lab in labels:
                fh.write(json.dumps(label_to_record(lab)) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write labels to {path}: {exc}") from exc


def read_labels(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    raw = path.read_bytes()
    labels = []
    offset = 0
    for lineno, line in enumerate(raw.split(b"\n")):
        start = offset
        offset += len(line) + 1
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ParseError(f"line {lineno + 1}: {exc}", path=path, offset=start) from None
        if lineno == 0 and isinstance(rec, dict) and rec.get("format") == LABEL_HEADER["format"]:
            continue
        try:
            labels.append(label_from_record(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"line {lineno + 1}: bad label record ({exc})", path=path, offset=start) from None
    return labels


# -- per-label cluster points -----------------------------------------------------


def write_clusters(clouds, directory) -> None:
    """One point file per label, named by the label's position in its file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob("*.bin"):
        stale.unlink()
    for i, pts in enumerate(clouds):
        write_points(pts, directory / f"{i:06d}.bin")


def read_clusters(directory, count: int) -> list:
    directory = Path(directory)
    return [read_points(directory / f"{i:06d}.bin", context=str(directory)) for i in range(count)]


def dump_json(obj, path) -> None:
    """Deterministic JSON (sorted keys, fixed separators) for reports."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
