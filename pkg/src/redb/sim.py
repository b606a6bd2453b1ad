"""Desk-scale synthetic test bed: two-domain scene generator, mock detector,
and pseudo-label scoring.

The generator builds flat-ground scenes of boxy objects plus loose clutter,
with per-domain knobs for object sizes, point density, and beam thinning so
that a source/target pair exhibits both object shift and environmental
shift. The mock detector is an honest point-cloud algorithm (grid
clustering, PCA box fit) rather than a ground-truth echo, so copy-pasted
objects re-cluster in a clean scene while clutter-born false positives do
not; domain-conditioned noise and a per-train shrink factor emulate a
detector improving as self-training proceeds.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .cloud import (
    FrameManifest,
    LabelSet,
    ManifestEntry,
    read_manifest,
    write_labels,
    write_manifest,
    write_points,
)
from .geom import Box3D, bev_iou, iou_3d, nms, points_in_box_mask
from .proto import InferenceResult, InProcessDetector
from .util import derive_rng, parse_kv_file, parse_list

log = logging.getLogger(__name__)

# Default three-class universe: car, pedestrian, cyclist (w, l, h meters).
DEFAULT_CLASS_DIMS = ((1.8, 4.5, 1.6), (0.6, 0.6, 1.7), (0.6, 1.8, 1.7))
DEFAULT_CLASS_STDS = ((0.12, 0.35, 0.1), (0.05, 0.05, 0.12), (0.06, 0.15, 0.12))

CLUTTER_ZMAX = 1.5
MIN_DIM = 0.1


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one synthetic domain."""

    name: str
    frames: int
    class_mix: tuple = (10.0, 3.0, 2.0)
    size_means: tuple = DEFAULT_CLASS_DIMS
    size_stds: tuple = DEFAULT_CLASS_STDS
    density: float = 60.0
    beam_subsample: float = 1.0
    half_extent: float = 40.0
    clutter_rate: float = 300.0
    objects_per_frame: tuple = (2, 6)
    rng_seed: int = 0

    def __post_init__(self):
        if self.frames < 0:
            raise ValueError("frames must be non-negative")
        if len(self.class_mix) != len(self.size_means) or len(self.class_mix) != len(self.size_stds):
            raise ValueError("class_mix and size distributions must agree on class count")
        if any(r <= 0 for r in self.class_mix):
            raise ValueError("class mix ratios must be positive")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if not 0.0 < self.beam_subsample <= 1.0:
            raise ValueError("beam_subsample must be in (0, 1]")
        if self.clutter_rate < 0:
            raise ValueError("clutter_rate must be non-negative")

    @property
    def num_classes(self) -> int:
        return len(self.class_mix)


def _sample_object(spec: DomainSpec, rng: np.random.Generator, placed) -> Box3D | None:
    """Draw one object box that does not crowd already-placed ones."""
    probs = np.asarray(spec.class_mix, dtype=np.float64)
    probs = probs / probs.sum()
    class_id = int(rng.choice(len(probs), p=probs)) + 1
    mean = spec.size_means[class_id - 1]
    std = spec.size_stds[class_id - 1]
    for _ in range(50):
        w, l, h = (max(0.2, float(rng.normal(m, s))) for m, s in zip(mean, std))
        reach = spec.half_extent - max(w, l)
        cx = float(rng.uniform(-reach, reach))
        cy = float(rng.uniform(-reach, reach))
        yaw = float(rng.uniform(-math.pi, math.pi))
        box = Box3D(cx, cy, h / 2.0, w, l, h, yaw, class_id)
        padded = Box3D(cx, cy, h / 2.0, w + 1.2, l + 1.2, h, yaw, class_id)
        if all(bev_iou(padded, Box3D(o.cx, o.cy, o.cz, o.w + 1.2, o.l + 1.2, o.h, o.yaw)) == 0.0
               for o in placed):
            return box
    return None


def _object_points(box: Box3D, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    n = int(rng.poisson(spec.density * box.footprint_area))
    if n == 0:
        return np.zeros((0, 4), dtype=np.float32)
    local = np.empty((n, 4))
    local[:, 0] = rng.uniform(-box.w / 2, box.w / 2, n)
    local[:, 1] = rng.uniform(-box.l / 2, box.l / 2, n)
    local[:, 2] = rng.uniform(-box.h / 2, box.h / 2, n)
    local[:, 3] = rng.random(n)
    if spec.beam_subsample < 1.0:
        local = local[rng.random(n) < spec.beam_subsample]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = local.copy()
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.cx
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.cy
    world[:, 2] = local[:, 2] + box.cz
    return world.astype(np.float32)


def generate_frame(spec: DomainSpec, index: int) -> tuple[str, np.ndarray, LabelSet]:
    """Synthesize one frame: (frame_id, points, ground-truth labels)."""
    rng = derive_rng(spec.rng_seed, "gen", index)
    frame_id = f"{spec.name}_{index:04d}"
    boxes: list[Box3D] = []
    lo, hi = spec.objects_per_frame
    n_obj = int(rng.integers(lo, hi + 1))
    for _ in range(n_obj):
        box = _sample_object(spec, rng, boxes)
        if box is not None:
            boxes.append(box)
    n_clutter = int(rng.poisson(spec.clutter_rate))
    clutter = np.empty((n_clutter, 4))
    clutter[:, 0] = rng.uniform(-spec.half_extent, spec.half_extent, n_clutter)
    clutter[:, 1] = rng.uniform(-spec.half_extent, spec.half_extent, n_clutter)
    clutter[:, 2] = rng.uniform(0.0, CLUTTER_ZMAX, n_clutter)
    clutter[:, 3] = rng.random(n_clutter)
    chunks = [clutter.astype(np.float32)]
    chunks.extend(_object_points(b, spec, rng) for b in boxes)
    points = np.concatenate(chunks, axis=0)
    return frame_id, points, LabelSet(frame_id, boxes)


def generate_domain(spec: DomainSpec, out_dir) -> FrameManifest:
    """Write a full synthetic domain (points, exact labels, manifest)."""
    out_dir = Path(out_dir)
    (out_dir / "points").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(spec.frames):
        frame_id, points, labels = generate_frame(spec, i)
        points_path = out_dir / "points" / f"{frame_id}.bin"
        labels_path = out_dir / "labels" / f"{frame_id}.txt"
        write_points(points, points_path)
        write_labels(labels, labels_path)
        entries.append(ManifestEntry(frame_id, points_path, labels_path))
    manifest = FrameManifest(entries)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


@dataclass(frozen=True)
class NoiseParams:
    """Detection corruption level for one domain."""

    center_std: float = 0.0
    size_std: float = 0.0
    yaw_std: float = 0.0
    miss_prob: float = 0.0
    fp_rate: float = 0.0

    def __post_init__(self):
        if min(self.center_std, self.size_std, self.yaw_std) < 0:
            raise ValueError("noise stds must be non-negative")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ValueError("miss_prob must be in [0, 1]")
        if self.fp_rate < 0:
            raise ValueError("fp_rate must be non-negative")

    def scaled(self, factor: float) -> "NoiseParams":
        return NoiseParams(self.center_std * factor, self.size_std * factor,
                           self.yaw_std * factor, self.miss_prob * factor,
                           self.fp_rate * factor)


@dataclass(frozen=True)
class MockDetectorSpec:
    """Behavior of the built-in mock detector."""

    source_noise: NoiseParams = NoiseParams(0.02, 0.02, 0.01, 0.0, 0.0)
    target_noise: NoiseParams = NoiseParams(0.15, 0.1, 0.06, 0.1, 0.8)
    target_prefix: str = "target"
    class_dims: tuple = DEFAULT_CLASS_DIMS
    cell_size: float = 0.5
    min_cluster_points: int = 5
    dup_base: float = 2.0
    dup_area_coef: float = 1.0
    dup_range_coef: float = 0.05
    train_shrink: float = 0.7
    nms_iou: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_shrink <= 1.0:
            raise ValueError("train_shrink must be in (0, 1]")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.min_cluster_points < 1:
            raise ValueError("min_cluster_points must be at least 1")

    @property
    def num_classes(self) -> int:
        return len(self.class_dims)


def _grid_clusters(points: np.ndarray, cell_size: float, min_points: int):
    """Connected components of occupied BEV grid cells (8-neighborhood).

    Returns (clusters, loose): per-cluster point index arrays, and the
    indices of points in no accepted cluster.
    """
    n = points.shape[0]
    if n == 0:
        return [], np.zeros(0, dtype=np.int64)
    ix = np.floor(points[:, 0] / cell_size).astype(np.int64)
    iy = np.floor(points[:, 1] / cell_size).astype(np.int64)
    cells: dict[tuple[int, int], list[int]] = {}
    for i in range(n):
        cells.setdefault((int(ix[i]), int(iy[i])), []).append(i)
    visited = set()
    clusters = []
    loose = []
    for cell in sorted(cells):
        if cell in visited:
            continue
        component = []
        queue = deque([cell])
        visited.add(cell)
        while queue:
            cx, cy = queue.popleft()
            component.extend(cells[(cx, cy)])
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    nb = (cx + dx, cy + dy)
                    if nb not in visited and nb in cells:
                        visited.add(nb)
                        queue.append(nb)
        if len(component) >= min_points:
            clusters.append(np.asarray(sorted(component), dtype=np.int64))
        else:
            loose.extend(component)
    return clusters, np.asarray(sorted(loose), dtype=np.int64)


def _fit_cluster_box(pts: np.ndarray) -> tuple[float, ...]:
    """Oriented box (cx, cy, cz, w, l, h, yaw) around a point cluster.

    Yaw comes from 2D PCA with the major axis mapped to the box length, so
    it is only defined modulo pi; footprint IoU is invariant to that.
    """
    xy = pts[:, :2].astype(np.float64)
    centroid = xy.mean(axis=0)
    centered = xy - centroid
    cov = centered.T @ centered / max(1, xy.shape[0])
    eigvals, eigvecs = np.linalg.eigh(cov)
    major = eigvecs[:, int(np.argmax(eigvals))]
    yaw = math.atan2(major[1], major[0]) - math.pi / 2.0
    c, s = math.cos(yaw), math.sin(yaw)
    local_x = c * centered[:, 0] + s * centered[:, 1]
    local_y = -s * centered[:, 0] + c * centered[:, 1]
    w = max(MIN_DIM, float(local_x.max() - local_x.min()))
    l = max(MIN_DIM, float(local_y.max() - local_y.min()))
    mid_x = float(local_x.max() + local_x.min()) / 2.0
    mid_y = float(local_y.max() + local_y.min()) / 2.0
    cx = centroid[0] + c * mid_x - s * mid_y
    cy = centroid[1] + s * mid_x + c * mid_y
    z = pts[:, 2].astype(np.float64)
    h = max(MIN_DIM, float(z.max() - z.min()))
    cz = float(z.max() + z.min()) / 2.0
    return float(cx), float(cy), cz, w, l, h, yaw


class MockDetector:
    """Cluster-and-fit detector with domain-conditioned noise.

    Frames whose id starts with the spec's target prefix are detected with
    the (initially heavy) target-domain corruption; every train call
    shrinks that corruption by the spec's factor, emulating adaptation.
    Detection is a pure function of (spec seed, frame id, train count).
    """

    def __init__(self, spec: MockDetectorSpec):
        self.spec = spec
        self.train_count = 0

    def _noise_for(self, frame_id: str) -> NoiseParams:
        if frame_id.startswith(self.spec.target_prefix):
            return self.spec.target_noise.scaled(self.spec.train_shrink ** self.train_count)
        return self.spec.source_noise

    def _classify(self, w: float, l: float, h: float) -> int:
        dims = np.asarray(self.spec.class_dims, dtype=np.float64)
        dist = np.linalg.norm(dims - np.array([w, l, h]), axis=1)
        return int(np.argmin(dist)) + 1

    def _duplicate_lam(self, box: Box3D) -> float:
        rng_dist = math.hypot(box.cx, box.cy)
        return (self.spec.dup_base + self.spec.dup_area_coef * box.footprint_area
                + self.spec.dup_range_coef * rng_dist)

    def _jitter_duplicate(self, box: Box3D, rng: np.random.Generator) -> Box3D:
        # Jitter is clipped so a duplicate always stays far above the NMS and
        # OBC overlap thresholds with its survivor.
        score = max(0.05, box.score - float(rng.uniform(0.02, 0.15)))

        def clipped(std):
            return float(np.clip(rng.normal(0.0, std), -2.5 * std, 2.5 * std))

        return Box3D(
            box.cx + clipped(0.02 * box.w),
            box.cy + clipped(0.02 * box.l),
            box.cz + clipped(0.01 * box.h),
            max(MIN_DIM, box.w * (1.0 + clipped(0.025))),
            max(MIN_DIM, box.l * (1.0 + clipped(0.025))),
            max(MIN_DIM, box.h * (1.0 + clipped(0.02))),
            box.yaw + clipped(0.015),
            box.class_id, score,
        )

    def detect(self, frame_id: str, points: np.ndarray) -> InferenceResult:
        rng = derive_rng(self.spec.rng_seed, "detect", frame_id, self.train_count)
        noise = self._noise_for(frame_id)
        pts = np.asarray(points, dtype=np.float64)
        clusters, loose = _grid_clusters(pts, self.spec.cell_size, self.spec.min_cluster_points)

        detections: list[Box3D] = []
        for idx in clusters:
            cx, cy, cz, w, l, h, yaw = _fit_cluster_box(pts[idx])
            cx += float(rng.normal(0.0, noise.center_std)) if noise.center_std else 0.0
            cy += float(rng.normal(0.0, noise.center_std)) if noise.center_std else 0.0
            cz += float(rng.normal(0.0, noise.center_std / 2.0)) if noise.center_std else 0.0
            w = max(MIN_DIM, w + (float(rng.normal(0.0, noise.size_std)) if noise.size_std else 0.0))
            l = max(MIN_DIM, l + (float(rng.normal(0.0, noise.size_std)) if noise.size_std else 0.0))
            h = max(MIN_DIM, h + (float(rng.normal(0.0, noise.size_std)) if noise.size_std else 0.0))
            yaw += float(rng.normal(0.0, noise.yaw_std)) if noise.yaw_std else 0.0
            missed = bool(rng.random() < noise.miss_prob)
            score = 0.7 + 0.29 * float(rng.random())
            if missed:
                continue
            class_id = self._classify(w, l, h)
            detections.append(Box3D(cx, cy, cz, w, l, h, yaw, class_id, score))

        n_fp = int(rng.poisson(noise.fp_rate)) if noise.fp_rate > 0 else 0
        for _ in range(n_fp):
            if loose.size == 0:
                break
            anchor = pts[int(loose[int(rng.integers(loose.size))])]
            class_id = int(rng.integers(1, self.spec.num_classes + 1))
            mw, ml, mh = self.spec.class_dims[class_id - 1]
            w = max(MIN_DIM, mw * float(rng.uniform(0.85, 1.15)))
            l = max(MIN_DIM, ml * float(rng.uniform(0.85, 1.15)))
            h = max(MIN_DIM, mh * float(rng.uniform(0.85, 1.15)))
            yaw = float(rng.uniform(-math.pi, math.pi))
            score = 0.6 + 0.3 * float(rng.random())
            detections.append(Box3D(float(anchor[0]), float(anchor[1]), h / 2.0,
                                    w, l, h, yaw, class_id, score))

        prenms: list[Box3D] = []
        for det in detections:
            prenms.append(det)
            extra = int(rng.poisson(self._duplicate_lam(det)))
            prenms.extend(self._jitter_duplicate(det, rng) for _ in range(extra))
        kept, _ = nms(prenms, self.spec.nms_iou)
        postnms = [prenms[i] for i in kept]
        return InferenceResult(frame_id, postnms, prenms)

    def train(self, manifest_path) -> None:
        manifest = read_manifest(manifest_path)
        if len(manifest) == 0:
            raise ValueError("training manifest is empty")
        if not manifest.labeled():
            raise ValueError("training manifest has unlabeled frames")
        self.train_count += 1

    def handle(self) -> InProcessDetector:
        return InProcessDetector(self, prenms=True, train=True)


class EchoDetector:
    """Test fixture: re-emits every registered box whose footprint holds at
    least one scene point, with a fixed score. Pasting an object at its
    recorded pose therefore reproduces its box exactly."""

    def __init__(self, boxes, score: float = 0.95):
        self.boxes = list(boxes)
        self.score = score

    def detect(self, frame_id: str, points: np.ndarray) -> InferenceResult:
        found = [b.with_score(self.score) for b in self.boxes
                 if bool(points_in_box_mask(points, b).any())]
        return InferenceResult(frame_id, found, list(found))

    def handle(self) -> InProcessDetector:
        return InProcessDetector(self, prenms=True, train=False)


class NeverDetector:
    """Test fixture: detects nothing, ever."""

    def detect(self, frame_id: str, points: np.ndarray) -> InferenceResult:
        return InferenceResult(frame_id, [], [])

    def handle(self) -> InProcessDetector:
        return InProcessDetector(self, prenms=True, train=False)


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) else 0.0


@dataclass
class EvalReport:
    per_class: dict[int, ClassStats]

    @property
    def micro(self) -> ClassStats:
        total = ClassStats()
        for stats in self.per_class.values():
            total.tp += stats.tp
            total.fp += stats.fp
            total.fn += stats.fn
        return total


def evaluate(pred_by_frame: dict[str, LabelSet], truth_by_frame: dict[str, LabelSet],
             iou_thresh: float = 0.5, num_classes: int | None = None) -> EvalReport:
    """Greedy score-ordered one-to-one matching at iou_3d >= thresh, class-exact."""
    if set(pred_by_frame) != set(truth_by_frame):
        missing = set(pred_by_frame) ^ set(truth_by_frame)
        raise ValueError(f"frame id mismatch between predictions and truth: {sorted(missing)[:5]}")
    classes = set()
    for labels in truth_by_frame.values():
        classes.update(b.class_id for b in labels.boxes)
    for labels in pred_by_frame.values():
        classes.update(b.class_id for b in labels.boxes)
    if num_classes is not None:
        classes.update(range(1, num_classes + 1))
    report = EvalReport({c: ClassStats() for c in sorted(classes)})

    for frame_id, preds in pred_by_frame.items():
        truths = truth_by_frame[frame_id].boxes
        used = [False] * len(truths)
        order = sorted(range(len(preds.boxes)),
                       key=lambda i: (-(preds.boxes[i].score or 1.0), i))
        for i in order:
            pred = preds.boxes[i]
            best_j, best_iou = -1, 0.0
            for j, truth in enumerate(truths):
                if used[j] or truth.class_id != pred.class_id:
                    continue
                iou = iou_3d(pred, truth)
                if iou > best_iou:
                    best_j, best_iou = j, iou
            if best_j >= 0 and best_iou >= iou_thresh:
                used[best_j] = True
                report.per_class[pred.class_id].tp += 1
            else:
                report.per_class[pred.class_id].fp += 1
        for j, truth in enumerate(truths):
            if not used[j]:
                report.per_class[truth.class_id].fn += 1
    return report


def _parse_dims_list(value: str) -> tuple:
    dims = []
    for part in value.split(","):
        wlh = [float(x) for x in part.strip().split("x")]
        if len(wlh) != 3:
            raise ValueError(f"expected WxLxH, got {part.strip()!r}")
        dims.append(tuple(wlh))
    return tuple(dims)


def domain_spec_from_file(path) -> DomainSpec:
    kv = parse_kv_file(path)
    spec = DomainSpec(name=kv.get("name", "domain"), frames=int(kv.get("frames", "10")))
    updates = {}
    if "class_mix" in kv:
        updates["class_mix"] = tuple(parse_list(kv["class_mix"], float))
    if "size_means" in kv:
        updates["size_means"] = _parse_dims_list(kv["size_means"])
    if "size_stds" in kv:
        updates["size_stds"] = _parse_dims_list(kv["size_stds"])
    for key, cast in (("density", float), ("beam_subsample", float), ("half_extent", float),
                      ("clutter_rate", float)):
        if key in kv:
            updates[key] = cast(kv[key])
    if "objects_per_frame" in kv:
        lo, hi = parse_list(kv["objects_per_frame"], int)
        updates["objects_per_frame"] = (lo, hi)
    if "seed" in kv:
        updates["rng_seed"] = int(kv["seed"])
    return replace(spec, **updates)


def mock_detector_spec_from_file(path) -> MockDetectorSpec:
    kv = parse_kv_file(path)

    def noise(prefix: str, default: NoiseParams) -> NoiseParams:
        return NoiseParams(
            float(kv.get(f"{prefix}_center_std", default.center_std)),
            float(kv.get(f"{prefix}_size_std", default.size_std)),
            float(kv.get(f"{prefix}_yaw_std", default.yaw_std)),
            float(kv.get(f"{prefix}_miss_prob", default.miss_prob)),
            float(kv.get(f"{prefix}_fp_rate", default.fp_rate)),
        )

    base = MockDetectorSpec()
    updates = {
        "source_noise": noise("source", base.source_noise),
        "target_noise": noise("target", base.target_noise),
    }
    if "target_prefix" in kv:
        updates["target_prefix"] = kv["target_prefix"]
    if "class_dims" in kv:
        updates["class_dims"] = _parse_dims_list(kv["class_dims"])
    for key, cast in (("cell_size", float), ("min_cluster_points", int), ("dup_base", float),
                      ("dup_area_coef", float), ("dup_range_coef", float),
                      ("train_shrink", float), ("nms_iou", float)):
        if key in kv:
            updates[key] = cast(kv[key])
    if "seed" in kv:
        updates["rng_seed"] = int(kv["seed"])
    return replace(base, **updates)
