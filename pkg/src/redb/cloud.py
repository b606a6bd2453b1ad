"""Point-cloud and label storage plus the copy-paste operators.

Clouds are (n, 4) float32 arrays of x, y, z, intensity, the same layout as
the on-disk binary format (little-endian float32 records, no header).
Banked objects keep their interior points in the box local frame as
float64, which makes rescaling and re-pasting independent of the pose the
object was cropped at; pasting casts back to float32.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import Box3D, points_in_box_mask, points_in_footprint_mask
from .util import fmt_float

log = logging.getLogger(__name__)

RECORD_FIELDS = 4
RECORD_BYTES = 4 * RECORD_FIELDS
POINT_DTYPE = np.dtype("<f4")

PROVENANCE_SOURCE_GT = "source-gt"
PROVENANCE_TARGET_PSEUDO = "target-pseudo"

# Default enlargement of a footprint when clearing background points under a
# pasted object, so objects do not float on residual ground returns.
REMOVAL_MARGIN = 0.1


def empty_cloud() -> np.ndarray:
    return np.zeros((0, RECORD_FIELDS), dtype=POINT_DTYPE)


def as_cloud(points) -> np.ndarray:
    """Coerce to an (n, 4) float32 cloud, validating shape and finiteness."""
    pts = np.asarray(points, dtype=POINT_DTYPE)
    if pts.size == 0:
        return empty_cloud()
    if pts.ndim != 2 or pts.shape[1] != RECORD_FIELDS:
        raise ValueError(f"expected (n, 4) points, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("cloud contains non-finite values")
    return pts


def read_points(path) -> np.ndarray:
    """Read a raw little-endian float32 x/y/z/intensity file."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: truncated point file ({len(raw)} bytes is not a multiple of {RECORD_BYTES})"
        )
    pts = np.frombuffer(raw, dtype=POINT_DTYPE).reshape(-1, RECORD_FIELDS).copy()
    if pts.size and not np.isfinite(pts).all():
        raise ValueError(f"{path}: point file contains NaN/Inf payload")
    return pts


def write_points(points, path) -> None:
    pts = as_cloud(points)
    Path(path).write_bytes(np.ascontiguousarray(pts, dtype=POINT_DTYPE).tobytes())


@dataclass
class LabelSet:
    """The labeled (or pseudo-labeled) boxes of one frame."""

    frame_id: str
    boxes: list[Box3D]

    def __len__(self) -> int:
        return len(self.boxes)


def read_labels(path, frame_id: str | None = None) -> LabelSet:
    """Parse a text label file: `class_id cx cy cz w l h yaw [score]` per line."""
    path = Path(path)
    boxes = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (8, 9):
            raise ValueError(f"{path}:{lineno}: expected 8 or 9 fields, got {len(parts)}")
        class_id = int(parts[0])
        cx, cy, cz, w, l, h, yaw = (float(p) for p in parts[1:8])
        score = float(parts[8]) if len(parts) == 9 else None
        boxes.append(Box3D(cx, cy, cz, w, l, h, yaw, class_id, score))
    return LabelSet(frame_id if frame_id is not None else path.stem, boxes)


def write_labels(labels: LabelSet, path) -> None:
    lines = []
    for b in labels.boxes:
        fields = [str(b.class_id)] + [fmt_float(v) for v in (b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw)]
        if b.score is not None:
            fields.append(fmt_float(b.score))
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


@dataclass(frozen=True)
class ManifestEntry:
    frame_id: str
    points_path: Path
    labels_path: Path | None = None


@dataclass
class FrameManifest:
    """Index of frames: id, points file, optional labels file."""

    entries: list[ManifestEntry]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.frame_id in seen:
                raise ValueError(f"duplicate frame_id in manifest: {e.frame_id}")
            seen.add(e.frame_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def frame_ids(self) -> list[str]:
        return [e.frame_id for e in self.entries]

    def labeled(self) -> bool:
        return all(e.labels_path is not None for e in self.entries)


def read_manifest(path) -> FrameManifest:
    """Read a TSV manifest; relative paths resolve against the manifest dir."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
            raise ValueError(f"{path}:{lineno}: expected frame_id<TAB>points[<TAB>labels]")

        def resolve(p: str) -> Path:
            return Path(p) if Path(p).is_absolute() else base / p

        labels_path = resolve(parts[2]) if len(parts) == 3 and parts[2] else None
        entries.append(ManifestEntry(parts[0], resolve(parts[1]), labels_path))
    return FrameManifest(entries)


def write_manifest(manifest: FrameManifest, path) -> None:
    """Write a TSV manifest, using paths relative to it where possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    lines = []
    for e in manifest.entries:
        cols = [e.frame_id, rel(e.points_path)]
        if e.labels_path is not None:
            cols.append(rel(e.labels_path))
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


@dataclass
class ObjectBankEntry:
    """A cropped object: world-pose box plus its interior points (local frame)."""

    box: Box3D
    points: np.ndarray
    provenance: str
    origin_frame: str
    obc: int | None = None

    def __post_init__(self):
        if self.provenance not in (PROVENANCE_SOURCE_GT, PROVENANCE_TARGET_PSEUDO):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, RECORD_FIELDS))
        if pts.ndim != 2 or pts.shape[1] != RECORD_FIELDS:
            raise ValueError(f"entry points must be (n, 4), got {pts.shape}")
        self.points = pts

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


def _rotation(yaw: float) -> tuple[float, float]:
    return math.cos(yaw), math.sin(yaw)


def world_to_local(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Express (n, 4) world points in the box frame (float64)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, RECORD_FIELDS).copy()
    c, s = _rotation(box.yaw)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    pts[:, 0] = c * dx + s * dy
    pts[:, 1] = -s * dx + c * dy
    pts[:, 2] -= box.cz
    return pts


def local_to_world(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Inverse of world_to_local (float64)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, RECORD_FIELDS).copy()
    c, s = _rotation(box.yaw)
    x = pts[:, 0].copy()
    y = pts[:, 1].copy()
    pts[:, 0] = c * x - s * y + box.cx
    pts[:, 1] = s * x + c * y + box.cy
    pts[:, 2] += box.cz
    return pts


def crop_object_points(cloud: np.ndarray, box: Box3D) -> np.ndarray:
    """Interior points of a box, order-preserving, in the box local frame."""
    pts = as_cloud(cloud)
    mask = points_in_box_mask(pts, box)
    return world_to_local(pts[mask], box)


def crop_entry(cloud: np.ndarray, box: Box3D, provenance: str, origin_frame: str) -> ObjectBankEntry:
    """Crop a box from a frame into a bank entry."""
    return ObjectBankEntry(box, crop_object_points(cloud, box), provenance, origin_frame)


def remove_points_in_boxes(cloud: np.ndarray, boxes, margin: float = REMOVAL_MARGIN) -> np.ndarray:
    """Drop every point whose BEV projection falls in any box footprint
    (enlarged by `margin`), regardless of height. Order-preserving and
    idempotent."""
    pts = as_cloud(cloud)
    if pts.shape[0] == 0 or len(boxes) == 0:
        return pts.copy()
    drop = np.zeros(pts.shape[0], dtype=bool)
    for box in boxes:
        drop |= points_in_footprint_mask(pts, box, margin=margin)
    return pts[~drop]


def paste(cloud: np.ndarray, entries) -> np.ndarray:
    """Concatenate each entry's points, moved to its box world pose.

    Callers are responsible for the entries' footprints being pairwise
    disjoint in the target frame.
    """
    pts = as_cloud(cloud)
    chunks = [pts]
    for entry in entries:
        if entry.num_points:
            chunks.append(local_to_world(entry.points, entry.box).astype(POINT_DTYPE))
    return np.concatenate(chunks, axis=0)


def ros_scale(entry: ObjectBankEntry, factor: float) -> ObjectBankEntry:
    """Uniformly rescale an object: box dims and local point coordinates by
    `factor`; pose and intensity unchanged."""
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    box = entry.box
    scaled_box = Box3D(box.cx, box.cy, box.cz, box.w * factor, box.l * factor,
                       box.h * factor, box.yaw, box.class_id, box.score)
    pts = entry.points.copy()
    pts[:, :3] *= factor
    return ObjectBankEntry(scaled_box, pts, entry.provenance, entry.origin_frame, entry.obc)
