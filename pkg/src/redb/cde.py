"""Cross-domain examination: re-detect pasted pseudo objects in source scenes.

A pseudo label earns trust by surviving transplantation: its object points
are copied into a randomly sampled source frame (background cleared under
the footprint first), the detector runs on that composite, and the label
is kept only when a same-class prediction overlaps it strongly enough.
Objects that collide with source annotations are deferred to other sampled
frames rather than silently dropped; objects that cannot be hosted
anywhere stay unexamined and are kept (configurable), since failing to
test a label is not evidence against it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import (
    LabelSet,
    ObjectBankEntry,
    paste,
    read_labels,
    read_points,
    remove_points_in_boxes,
    write_points,
)
from .geom import Box3D, bev_iou, iou_3d
from .proto import DetectorError, DetectorHandle, InferenceResult
from .util import derive_rng, fmt_float

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CdeConfig:
    """Examination thresholds and scene-building limits."""

    delta_cde: float = 0.6
    delta_pos: float = 0.6
    max_objects_per_scene: int = 16
    rng_seed: int = 0
    max_source_frames: int = 10
    keep_unexamined: bool = True
    iou_mode: str = "3d"

    def __post_init__(self):
        if not 0.0 < self.delta_cde <= 1.0:
            raise ValueError(f"delta_cde must be in (0, 1], got {self.delta_cde}")
        if not 0.0 <= self.delta_pos <= 1.0:
            raise ValueError(f"delta_pos must be in [0, 1], got {self.delta_pos}")
        if self.max_objects_per_scene < 1:
            raise ValueError("max_objects_per_scene must be at least 1")
        if self.max_source_frames < 1:
            raise ValueError("max_source_frames must be at least 1")
        if self.iou_mode not in ("bev", "3d"):
            raise ValueError(f"iou_mode must be 'bev' or '3d', got {self.iou_mode!r}")


@dataclass
class CdeVerdict:
    """Outcome of examining one pseudo box."""

    frame_id: str
    box_index: int
    class_id: int
    best_iou: float
    matched: bool
    kept: bool
    examined: bool


def build_examination_scene(source_points: np.ndarray, source_labels: LabelSet,
                            entries) -> tuple[np.ndarray, list[ObjectBankEntry], list[ObjectBankEntry]]:
    """Paste entries into a source frame at their recorded poses.

    An entry whose footprint overlaps a source ground-truth box or an
    already placed entry is returned in the deferred list instead of being
    placed; the source scene itself stays authentic. Returns
    (scene_points, placed, deferred).
    """
    placed: list[ObjectBankEntry] = []
    deferred: list[ObjectBankEntry] = []
    occupied: list[Box3D] = list(source_labels.boxes)
    for entry in entries:
        if any(bev_iou(entry.box, other) > 0.0 for other in occupied):
            deferred.append(entry)
            continue
        occupied.append(entry.box)
        placed.append(entry)
    if not placed:
        return source_points.copy(), [], deferred
    cleared = remove_points_in_boxes(source_points, [e.box for e in placed])
    return paste(cleared, placed), placed, deferred


def match(pseudo_box: Box3D, result: InferenceResult, delta_pos: float,
          iou_mode: str = "3d") -> tuple[Box3D | None, float]:
    """Best same-class confident prediction for a pseudo box.

    Maximizes IoU over post-NMS boxes scoring above delta_pos with the same
    class; ties break toward higher score, then lower index. Returns
    (None, 0.0) when nothing overlaps.
    """
    iou_fn = iou_3d if iou_mode == "3d" else bev_iou
    best: Box3D | None = None
    best_iou = 0.0
    best_score = -1.0
    for cand in result.postnms:
        if cand.score is None or cand.score <= delta_pos:
            continue
        if cand.class_id != pseudo_box.class_id:
            continue
        iou = iou_fn(cand, pseudo_box)
        if iou > best_iou or (iou == best_iou and best is not None and cand.score > best_score):
            if iou > 0.0:
                best, best_iou, best_score = cand, iou, cand.score
    return best, best_iou


@dataclass
class CdeOutcome:
    """Everything examine() produced: kept labels, verdicts, and counters."""

    kept_by_frame: dict[str, LabelSet]
    verdicts: list[CdeVerdict]
    scenes_inferred: int = 0
    failed_inferences: int = 0
    unexamined: int = 0


class _SourceFrames:
    """Lazy cache of source frames by manifest position."""

    def __init__(self, manifest):
        self.entries = list(manifest)
        if not self.entries:
            raise ValueError("source manifest is empty")
        for e in self.entries:
            if e.labels_path is None:
                raise ValueError(f"source frame {e.frame_id} has no labels")
        self._cache: dict[int, tuple[np.ndarray, LabelSet]] = {}

    def __len__(self):
        return len(self.entries)

    def get(self, index: int) -> tuple[np.ndarray, LabelSet]:
        if index not in self._cache:
            e = self.entries[index]
            self._cache[index] = (read_points(e.points_path),
                                  read_labels(e.labels_path, e.frame_id))
        return self._cache[index]


def examine(entries_by_frame: dict[str, list[ObjectBankEntry]], source_manifest,
            detector: DetectorHandle, cfg: CdeConfig,
            scene_dir=None) -> CdeOutcome:
    """Examine every pseudo-labeled object and keep the consistent ones.

    entries_by_frame maps each target frame to its confident pseudo boxes
    (cropped into bank entries, in label order). Source frames are sampled
    uniformly per target frame from a stream derived from cfg.rng_seed, so
    results do not depend on frame processing order. When scene_dir is
    given, every composite scene is also written there as a point file.
    """
    sources = _SourceFrames(source_manifest)
    if scene_dir is not None:
        scene_dir = Path(scene_dir)
        scene_dir.mkdir(parents=True, exist_ok=True)

    outcome = CdeOutcome({}, [])
    for frame_id, entries in entries_by_frame.items():
        rng = derive_rng(cfg.rng_seed, "cde", frame_id)
        pending: list[tuple[int, ObjectBankEntry]] = list(enumerate(entries))
        attempts = {i: 0 for i, _ in pending}
        results: dict[int, tuple[bool, float, bool]] = {}  # matched, iou, examined
        scene_counter = 0

        while pending:
            batch = pending[: cfg.max_objects_per_scene]
            src_points, src_labels = sources.get(int(rng.integers(len(sources))))
            scene, placed, _ = build_examination_scene(
                src_points, src_labels, [e for _, e in batch])
            placed_ids = {id(e) for e in placed}
            scene_id = f"cde_{frame_id}_{scene_counter}"
            scene_counter += 1

            if placed:
                points_path = None
                if scene_dir is not None:
                    points_path = scene_dir / f"{scene_id}.bin"
                    write_points(scene, points_path)
                outcome.scenes_inferred += 1
                try:
                    result = detector.infer(scene_id, scene, points_path=points_path)
                except DetectorError as exc:
                    outcome.failed_inferences += 1
                    log.warning("examination scene %s failed: %s", scene_id, exc)
                    # fail the round once failures dominate; a couple of
                    # transient errors just retry on other source frames
                    if outcome.failed_inferences >= 3 and \
                            outcome.failed_inferences * 2 > outcome.scenes_inferred:
                        raise
                    result = None
            else:
                result = None

            still_pending = []
            for i, entry in batch:
                if id(entry) in placed_ids and result is not None:
                    best, best_iou = match(entry.box, result, cfg.delta_pos, cfg.iou_mode)
                    results[i] = (best is not None, best_iou, True)
                else:
                    attempts[i] += 1
                    if attempts[i] >= cfg.max_source_frames:
                        results[i] = (False, 0.0, False)
                        outcome.unexamined += 1
                        log.warning("pseudo box %s[%d] could not be hosted in any "
                                    "sampled source frame", frame_id, i)
                    else:
                        still_pending.append((i, entry))
            pending = still_pending + pending[cfg.max_objects_per_scene:]

        kept_boxes = []
        for i, entry in enumerate(entries):
            matched, best_iou, examined = results[i]
            if examined:
                kept = matched and best_iou >= cfg.delta_cde
            else:
                kept = cfg.keep_unexamined
            outcome.verdicts.append(CdeVerdict(frame_id, i, entry.box.class_id,
                                               best_iou, matched, kept, examined))
            if kept:
                kept_boxes.append(entry.box)
        outcome.kept_by_frame[frame_id] = LabelSet(frame_id, kept_boxes)
    return outcome


def write_verdicts(path, verdicts) -> None:
    """One line per pseudo box: frame_id box_index class_id best_iou kept examined."""
    lines = ["# frame_id box_index class_id best_iou kept examined"]
    for v in verdicts:
        lines.append(f"{v.frame_id} {v.box_index} {v.class_id} "
                     f"{fmt_float(v.best_iou)} {int(v.kept)} {int(v.examined)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
