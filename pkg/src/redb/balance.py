"""Class-balanced augmentation: object pools, per-class sampling, injection.

Two pools feed each target frame: labeled source objects and the curated
reliable-diverse pseudo objects. Every frame draws the scheduled number of
objects per class, pastes them at their recorded world pose when the spot
is free, and the schedule shifts weight from source to target objects as
self-training rounds advance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import (
    PROVENANCE_SOURCE_GT,
    LabelSet,
    ObjectBankEntry,
    crop_entry,
    paste,
    read_labels,
    read_points,
    remove_points_in_boxes,
    ros_scale,
)
from .geom import bev_iou

log = logging.getLogger(__name__)

DEFAULT_ROS_RANGE = (0.75, 1.25)


@dataclass(frozen=True)
class RoundSchedule:
    """Per-class sampling counts for one labeling round."""

    s_r: int
    s_g: int
    s_delta: int
    round_index: int = 0

    def __post_init__(self):
        if self.s_r < 0 or self.s_g < 0 or self.s_delta < 0:
            raise ValueError("schedule counts must be non-negative")


def advance_schedule(s: RoundSchedule) -> RoundSchedule:
    """Shift one round: more pseudo objects, fewer source objects (never < 0)."""
    return RoundSchedule(s.s_r + s.s_delta, max(0, s.s_g - s.s_delta),
                         s.s_delta, s.round_index + 1)


@dataclass
class ObjectPool:
    """Bank entries grouped by class, all sharing one provenance."""

    by_class: dict[int, list[ObjectBankEntry]]
    provenance: str
    num_classes: int

    def __post_init__(self):
        for class_id, entries in self.by_class.items():
            if not 1 <= class_id <= self.num_classes:
                raise ValueError(f"class_id {class_id} outside 1..{self.num_classes}")
            for e in entries:
                if e.provenance != self.provenance:
                    raise ValueError(
                        f"pool provenance {self.provenance!r} but entry has {e.provenance!r}")

    @classmethod
    def from_entries(cls, entries, num_classes: int, provenance: str) -> "ObjectPool":
        by_class: dict[int, list[ObjectBankEntry]] = {c: [] for c in range(1, num_classes + 1)}
        for e in entries:
            by_class[e.box.class_id].append(e)
        return cls(by_class, provenance, num_classes)

    def entries(self, class_id: int) -> list[ObjectBankEntry]:
        return self.by_class.get(class_id, [])

    def size(self, class_id: int) -> int:
        return len(self.entries(class_id))

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.by_class.values())


def build_gt_pool(manifest, num_classes: int, *, drop_empty: bool = False) -> ObjectPool:
    """Crop every labeled source box into a bank entry, grouped by class.

    Unreadable frames are skipped with a warning; boxes containing zero
    points are kept unless drop_empty is set.
    """
    entries = []
    for entry in manifest:
        if entry.labels_path is None:
            raise ValueError(f"manifest entry {entry.frame_id} has no labels")
        try:
            points = read_points(entry.points_path)
            labels = read_labels(entry.labels_path, entry.frame_id)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable source frame %s: %s", entry.frame_id, exc)
            continue
        for box in labels.boxes:
            banked = crop_entry(points, box, PROVENANCE_SOURCE_GT, entry.frame_id)
            if drop_empty and banked.num_points == 0:
                continue
            entries.append(banked)
    return ObjectPool.from_entries(entries, num_classes, PROVENANCE_SOURCE_GT)


def sample_balanced(pool: ObjectPool, per_class: int, rng: np.random.Generator) -> list[ObjectBankEntry]:
    """Uniformly draw min(per_class, pool size) entries per class, without
    replacement, in ascending class order."""
    if per_class < 0:
        raise ValueError(f"per_class must be non-negative, got {per_class}")
    chosen: list[ObjectBankEntry] = []
    if per_class == 0:
        return chosen
    for class_id in range(1, pool.num_classes + 1):
        available = pool.entries(class_id)
        take = min(per_class, len(available))
        if take < per_class:
            log.debug("class %d pool has %d of %d requested entries",
                      class_id, len(available), per_class)
        if take == 0:
            continue
        idx = rng.choice(len(available), size=take, replace=False)
        chosen.extend(available[i] for i in sorted(int(i) for i in idx))
    return chosen


@dataclass
class InjectionResult:
    """Augmented frame plus an exact account of what was placed and why not."""

    points: np.ndarray
    labels: LabelSet
    placed: list[ObjectBankEntry] = field(default_factory=list)
    rejected: list[tuple[ObjectBankEntry, str]] = field(default_factory=list)

    def placed_count(self, class_id: int, provenance: str) -> int:
        return sum(1 for e in self.placed
                   if e.box.class_id == class_id and e.provenance == provenance)

    def rejected_count(self, class_id: int, provenance: str) -> int:
        return sum(1 for e, _ in self.rejected
                   if e.box.class_id == class_id and e.provenance == provenance)


def inject(points: np.ndarray, labels: LabelSet, red_entries, gt_entries,
           ros_range, rng: np.random.Generator) -> InjectionResult:
    """Paste sampled objects into a frame, collision-free.

    Source objects are rescaled first by a factor drawn uniformly from
    ros_range. A candidate is rejected when its footprint overlaps any box
    already in the frame (pre-existing labels or candidates placed before
    it), or when it originated in this very frame. Accepted objects clear
    the background under their footprint before their points are pasted,
    and their boxes are appended to the frame labels in placement order.
    """
    lo, hi = float(ros_range[0]), float(ros_range[1])
    if not (0 < lo <= hi):
        raise ValueError(f"bad ros_range {ros_range!r}")
    scaled_gt = [ros_scale(e, float(rng.uniform(lo, hi))) for e in gt_entries]

    occupied = list(labels.boxes)
    result = InjectionResult(points, LabelSet(labels.frame_id, list(labels.boxes)))
    accepted: list[ObjectBankEntry] = []
    for entry in list(red_entries) + scaled_gt:
        if entry.origin_frame == labels.frame_id:
            result.rejected.append((entry, "origin-frame"))
            continue
        if any(bev_iou(entry.box, other) > 0.0 for other in occupied):
            result.rejected.append((entry, "collision"))
            continue
        occupied.append(entry.box)
        accepted.append(entry)

    cleared = remove_points_in_boxes(points, [e.box for e in accepted])
    result.points = paste(cleared, accepted)
    result.labels.boxes.extend(e.box for e in accepted)
    result.placed = accepted
    return result
