"""Alternating pseudo-labeling / self-training orchestration.

One run owns a pool of detector handles and an output directory. Labeling
happens at epoch 1 and at every epoch in the configured list; the first
round additionally passes every pseudo label through cross-domain
examination. Each round curates the reliable-diverse pool, injects
class-balanced objects into every target frame, writes the augmented
dataset, and hands it to the detector for one train call; the detector
adapter owns actual epoch iteration between rounds.

Everything derives from the master seed: per-frame streams are keyed by
(seed, purpose, round, frame id), so worker count and processing order
never change the outputs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import queue
import shlex
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cde as cde_mod
from .balance import (
    DEFAULT_ROS_RANGE,
    ObjectPool,
    RoundSchedule,
    advance_schedule,
    build_gt_pool,
    inject,
    sample_balanced,
)
from .cloud import (
    PROVENANCE_SOURCE_GT,
    PROVENANCE_TARGET_PSEUDO,
    FrameManifest,
    LabelSet,
    ManifestEntry,
    ObjectBankEntry,
    crop_entry,
    paste,
    read_labels,
    read_manifest,
    read_points,
    remove_points_in_boxes,
    ros_scale,
    write_labels,
    write_manifest,
    write_points,
)
from .obc import ObcConfig, count_obc, kde_fit, selection_weights, subset_size, \
    weighted_sample_without_replacement, write_obc_report
from .proto import DetectorHandle, SubprocessDetector, UnsupportedCommandError, \
    filter_confident
from .util import derive_rng, parse_bool, parse_kv_file, parse_list

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """Fatal pipeline failure (bad inputs or too many per-frame errors)."""


@dataclass(frozen=True)
class PipelineConfig:
    source_manifest: Path
    target_manifest: Path
    out_dir: Path
    detector_cmd: str = ""
    delta_pos: float = 0.6
    delta_cde: float = 0.6
    delta_obc: float = 0.3
    d: float = 5.0
    s_r: int = 5
    s_g: int = 10
    s_delta: int = 2
    ros_range: tuple = DEFAULT_ROS_RANGE
    total_epochs: int = 120
    label_epochs: tuple = (31, 61, 91)
    num_classes: int = 3
    pool_size: int = 1
    seed: int = 0
    timeout: float = 60.0
    bandwidth: float | str = "silverman"
    cde_max_objects_per_scene: int = 16
    cde_max_source_frames: int = 10
    cde_keep_unexamined: bool = True
    cde_iou_mode: str = "3d"
    obc_iou_mode: str = "bev"
    pretrain: bool = False
    drop_empty_gt: bool = False

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be at least 1")
        epochs = tuple(int(e) for e in self.label_epochs)
        if list(epochs) != sorted(set(epochs)):
            raise ValueError("label_epochs must be strictly ascending")
        for e in epochs:
            if not 2 <= e <= self.total_epochs:
                raise ValueError(f"label epoch {e} outside [2, {self.total_epochs}]")
        object.__setattr__(self, "label_epochs", epochs)
        if not 0.0 <= self.delta_pos <= 1.0:
            raise ValueError("delta_pos must be in [0, 1]")
        if not 0.0 < self.delta_cde <= 1.0:
            raise ValueError("delta_cde must be in (0, 1]")
        if not 0.0 < self.delta_obc < 1.0:
            raise ValueError("delta_obc must be in (0, 1)")
        if not self.d > 1.0:
            raise ValueError("d must exceed 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be at least 1")
        if self.pool_size < 1:
            raise ValueError("pool_size must be at least 1")
        object.__setattr__(self, "source_manifest", Path(self.source_manifest))
        object.__setattr__(self, "target_manifest", Path(self.target_manifest))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        object.__setattr__(self, "ros_range",
                           (float(self.ros_range[0]), float(self.ros_range[1])))

    @property
    def label_rounds(self) -> list[int]:
        """Epochs at which pseudo labels are (re)generated."""
        return [1] + list(self.label_epochs)


_CONFIG_KEYS = {
    "source_manifest": str, "target_manifest": str, "out_dir": str, "detector_cmd": str,
    "delta_pos": float, "delta_cde": float, "delta_obc": float, "d": float,
    "s_r": int, "s_g": int, "s_delta": int,
    "total_epochs": int, "num_classes": int, "pool_size": int, "seed": int,
    "timeout": float,
    "cde_max_objects_per_scene": int, "cde_max_source_frames": int,
    "cde_keep_unexamined": parse_bool, "cde_iou_mode": str, "obc_iou_mode": str,
    "pretrain": parse_bool, "drop_empty_gt": parse_bool,
}


def load_config(path, **overrides) -> PipelineConfig:
    """Build a config from a key=value file; keyword overrides win."""
    kv = parse_kv_file(path)
    base = Path(path).parent
    kwargs = {}
    for key, raw in kv.items():
        if key in ("source_manifest", "target_manifest", "out_dir"):
            p = Path(raw)
            kwargs[key] = p if p.is_absolute() else base / p
        elif key in _CONFIG_KEYS:
            kwargs[key] = _CONFIG_KEYS[key](raw)
        elif key == "label_epochs":
            kwargs[key] = tuple(parse_list(raw, int))
        elif key == "ros_range":
            lo, hi = parse_list(raw, float)
            kwargs[key] = (lo, hi)
        elif key == "bandwidth":
            kwargs[key] = raw if raw == "silverman" else float(raw)
        else:
            raise ValueError(f"unknown config key {key!r}")
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    for required in ("source_manifest", "target_manifest", "out_dir"):
        if required not in kwargs:
            raise ValueError(f"config is missing {required}")
    return PipelineConfig(**kwargs)


class EventLog:
    """Line-oriented run log: `timestamp level event key=value ...`."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")
        self._lock = threading.Lock()

    def emit(self, event: str, level: str = "INFO", **fields):
        parts = [time.strftime("%Y-%m-%dT%H:%M:%S"), level, event]
        for k, v in fields.items():
            text = str(v)
            if any(ch.isspace() for ch in text):
                text = json.dumps(text)
            parts.append(f"{k}={text}")
        line = " ".join(parts)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
        log.debug("%s", line)

    def close(self):
        with self._lock:
            self._fh.close()


@dataclass
class ClassRoundStats:
    gt_pool: int = 0
    red_pool: int = 0
    requested_red: int = 0
    placed_red: int = 0
    rejected_red: int = 0
    requested_gt: int = 0
    placed_gt: int = 0
    rejected_gt: int = 0


@dataclass
class RoundReport:
    round_index: int
    epoch: int
    raw_pseudo: int = 0
    cde_kept: int = 0
    obc_pool: int = 0
    red_size: int = 0
    failed_frames: int = 0
    per_class: dict[int, ClassRoundStats] = field(default_factory=dict)
    paths: dict[str, Path] = field(default_factory=dict)

    def validate(self, d: float):
        if self.cde_kept > self.raw_pseudo:
            raise PipelineError("kept pseudo labels exceed raw pseudo labels")
        if self.red_size != subset_size(self.obc_pool, d):
            raise PipelineError("reliable-diverse subset size does not match ceil(pool/d)")


def write_round_report(report: RoundReport, schedule: RoundSchedule, path) -> None:
    lines = [
        f"round {report.round_index} epoch {report.epoch}",
        f"raw_pseudo {report.raw_pseudo}",
        f"cde_kept {report.cde_kept}",
        f"obc_pool {report.obc_pool}",
        f"red_size {report.red_size}",
        f"failed_frames {report.failed_frames}",
        f"schedule s_r={schedule.s_r} s_g={schedule.s_g} s_delta={schedule.s_delta}",
    ]
    for class_id in sorted(report.per_class):
        s = report.per_class[class_id]
        lines.append(
            f"class {class_id}: gt_pool={s.gt_pool} red_pool={s.red_pool} "
            f"requested_red={s.requested_red} placed_red={s.placed_red} rejected_red={s.rejected_red} "
            f"requested_gt={s.requested_gt} placed_gt={s.placed_gt} rejected_gt={s.rejected_gt}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class _HandlePool:
    """Dispatches per-frame work across idle detector handles."""

    def __init__(self, handles):
        self.handles = list(handles)

    def map(self, items, fn):
        """fn(handle, item) for every item; returns {item_key: result or exception}.

        Items are (key, payload) pairs. With one handle this is a plain
        sequential loop; with more, a thread per handle drains a queue.
        """
        results: dict = {}
        if len(self.handles) == 1:
            for key, payload in items:
                try:
                    results[key] = fn(self.handles[0], payload)
                except Exception as exc:  # collected, caller decides
                    results[key] = exc
            return results

        work: queue.Queue = queue.Queue()
        for item in items:
            work.put(item)
        lock = threading.Lock()

        def worker(handle):
            while True:
                try:
                    key, payload = work.get_nowait()
                except queue.Empty:
                    return
                try:
                    value = fn(handle, payload)
                except Exception as exc:
                    value = exc
                with lock:
                    results[key] = value

        threads = [threading.Thread(target=worker, args=(h,)) for h in self.handles]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return results


@dataclass
class _FrameState:
    entry: ManifestEntry
    points: np.ndarray
    result: object = None  # InferenceResult or Exception
    confident: LabelSet | None = None
    kept_entries: list = field(default_factory=list)


class Pipeline:
    def __init__(self, config: PipelineConfig, detector_factory=None):
        self.config = config
        self._factory = detector_factory or self._default_factory
        self.events: EventLog | None = None
        self.handles: list[DetectorHandle] = []
        self._gt_pool: ObjectPool | None = None
        self._warned_no_prenms = False

    def _default_factory(self) -> DetectorHandle:
        if not self.config.detector_cmd:
            raise PipelineError("config has no detector_cmd and no factory was given")
        return SubprocessDetector(shlex.split(self.config.detector_cmd),
                                  timeout=self.config.timeout)

    # ---- stage 1 -----------------------------------------------------------

    def _pretrain(self, source: FrameManifest) -> None:
        """Emit a rescaled-objects copy of the source set and train once on it."""
        cfg = self.config
        out = cfg.out_dir / "pretrain"
        (out / "points").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
        rng = derive_rng(cfg.seed, "pretrain")
        entries = []
        for m in source:
            points = read_points(m.points_path)
            labels = _read_frame_labels(m)
            banked = [crop_entry(points, b, PROVENANCE_SOURCE_GT, m.frame_id) for b in labels.boxes]
            scaled = [ros_scale(e, float(rng.uniform(*cfg.ros_range))) for e in banked]
            cleared = remove_points_in_boxes(
                points, [e.box for e in banked] + [e.box for e in scaled])
            aug_points = paste(cleared, scaled)
            aug_labels = LabelSet(m.frame_id, [e.box for e in scaled])
            p_path = out / "points" / f"{m.frame_id}.bin"
            l_path = out / "labels" / f"{m.frame_id}.txt"
            write_points(aug_points, p_path)
            write_labels(aug_labels, l_path)
            entries.append(ManifestEntry(m.frame_id, p_path, l_path))
        manifest_path = out / "manifest.tsv"
        write_manifest(FrameManifest(entries), manifest_path)
        self._train_all(manifest_path, round_index=0)

    # ---- inference ---------------------------------------------------------

    def _infer_frames(self, frames: list[_FrameState]) -> int:
        """Run inference for every frame; returns the failure count."""
        pool = _HandlePool(self.handles)

        def task(handle, state: _FrameState):
            return handle.infer(state.entry.frame_id, state.points,
                                points_path=state.entry.points_path)

        results = pool.map([(s.entry.frame_id, s) for s in frames], task)
        failures = 0
        for state in frames:
            state.result = results[state.entry.frame_id]
            if isinstance(state.result, Exception):
                failures += 1
                self.events.emit("frame_failed", level="WARN",
                                 frame=state.entry.frame_id, error=type(state.result).__name__)
        return failures

    # ---- stage 2 -----------------------------------------------------------

    def generate_round(self, round_index: int, epoch: int, schedule: RoundSchedule,
                       target: FrameManifest) -> RoundReport:
        cfg = self.config
        round_dir = cfg.out_dir / f"round_{round_index}"
        (round_dir / "points").mkdir(parents=True, exist_ok=True)
        (round_dir / "labels").mkdir(parents=True, exist_ok=True)
        report = RoundReport(round_index, epoch)
        report.paths["dir"] = round_dir
        self.events.emit("round_start", round=round_index, epoch=epoch)

        frames = []
        for m in target:
            try:
                frames.append(_FrameState(m, read_points(m.points_path)))
            except (OSError, ValueError) as exc:
                raise PipelineError(f"unreadable target frame {m.frame_id}: {exc}") from exc

        failures = self._infer_frames(frames)
        if failures * 2 > len(frames):
            self.events.emit("round_aborted", level="ERROR", round=round_index,
                             failed=failures, total=len(frames))
            raise PipelineError(f"{failures}/{len(frames)} target inferences failed")
        ok_frames = [s for s in frames if not isinstance(s.result, Exception)]
        report.failed_frames = failures

        for state in ok_frames:
            state.confident = filter_confident(state.result, cfg.delta_pos)
            report.raw_pseudo += len(state.confident)

        # Reliability: examined once per run, in the first round only.
        if round_index == 1:
            entries_by_frame = {
                s.entry.frame_id: [crop_entry(s.points, b, PROVENANCE_TARGET_PSEUDO,
                                              s.entry.frame_id)
                                   for b in s.confident.boxes]
                for s in ok_frames
            }
            self.events.emit("cde_start", round=round_index,
                             boxes=sum(len(v) for v in entries_by_frame.values()))
            cde_cfg = cde_mod.CdeConfig(
                delta_cde=cfg.delta_cde, delta_pos=cfg.delta_pos,
                max_objects_per_scene=cfg.cde_max_objects_per_scene,
                rng_seed=cfg.seed, max_source_frames=cfg.cde_max_source_frames,
                keep_unexamined=cfg.cde_keep_unexamined, iou_mode=cfg.cde_iou_mode)
            outcome = cde_mod.examine(entries_by_frame, self._source_manifest,
                                      self.handles[0], cde_cfg,
                                      scene_dir=round_dir / "cde_scenes")
            verdict_path = round_dir / "cde_verdicts.txt"
            cde_mod.write_verdicts(verdict_path, outcome.verdicts)
            report.paths["cde_verdicts"] = verdict_path
            kept_map = {}
            for v in outcome.verdicts:
                kept_map.setdefault(v.frame_id, []).append(v.kept)
            for state in ok_frames:
                flags = kept_map.get(state.entry.frame_id, [])
                all_entries = entries_by_frame[state.entry.frame_id]
                state.kept_entries = [e for e, keep in zip(all_entries, flags) if keep]
                state.confident = outcome.kept_by_frame[state.entry.frame_id]
            self.events.emit("cde_done", round=round_index,
                             kept=sum(len(s.kept_entries) for s in ok_frames),
                             unexamined=outcome.unexamined,
                             scenes=outcome.scenes_inferred)
        else:
            for state in ok_frames:
                state.kept_entries = [
                    crop_entry(state.points, b, PROVENANCE_TARGET_PSEUDO, state.entry.frame_id)
                    for b in state.confident.boxes
                ]
        report.cde_kept = sum(len(s.kept_entries) for s in ok_frames)

        # Diversity: OBC per kept box, KDE over the pool, inverse-density draw.
        obc_cfg = ObcConfig(delta_obc=cfg.delta_obc, d=cfg.d, bandwidth=cfg.bandwidth,
                            rng_seed=cfg.seed, iou_mode=cfg.obc_iou_mode)
        pool_entries: list[ObjectBankEntry] = []
        obc_rows = []
        for state in ok_frames:
            prenms = state.result.prenms
            if not self.handles[0].prenms_capable or not prenms:
                if not self._warned_no_prenms:
                    self.events.emit("obc_uniform", level="WARN",
                                     reason="no prenms boxes from detector")
                    self._warned_no_prenms = True
                for e in state.kept_entries:
                    e.obc = 1
            else:
                for e in state.kept_entries:
                    e.obc = count_obc(e.box, prenms, obc_cfg.delta_obc, obc_cfg.iou_mode)
            pool_entries.extend(state.kept_entries)

        report.obc_pool = len(pool_entries)
        red_entries: list[ObjectBankEntry] = []
        chosen: set[int] = set()
        weights = np.zeros(0)
        if pool_entries:
            obcs = np.array([e.obc for e in pool_entries], dtype=np.float64)
            model = kde_fit(obcs, obc_cfg.bandwidth)
            weights = selection_weights(model, obcs)
            k = subset_size(len(pool_entries), obc_cfg.d)
            rng = derive_rng(obc_cfg.rng_seed, "downsample", round_index)
            chosen = set(weighted_sample_without_replacement(weights, k, rng).tolist())
            red_entries = [pool_entries[i] for i in sorted(chosen)]
        per_frame_index: dict[str, int] = {}
        hist: dict[int, int] = {}
        for i, e in enumerate(pool_entries):
            j = per_frame_index.get(e.origin_frame, 0)
            per_frame_index[e.origin_frame] = j + 1
            hist[e.obc] = hist.get(e.obc, 0) + 1
            obc_rows.append((e.origin_frame, j, e.obc, float(weights[i]), i in chosen))
        obc_path = round_dir / "obc.txt"
        write_obc_report(obc_path, obc_rows, hist)
        report.paths["obc"] = obc_path
        report.red_size = len(red_entries)
        self.events.emit("obc_done", round=round_index, pool=len(pool_entries),
                         red=len(red_entries))

        # Balance: per-frame class-balanced injection from both pools.
        red_pool = ObjectPool.from_entries(red_entries, cfg.num_classes,
                                           PROVENANCE_TARGET_PSEUDO)
        gt_pool = self._get_gt_pool()
        for c in range(1, cfg.num_classes + 1):
            report.per_class[c] = ClassRoundStats(gt_pool=gt_pool.size(c),
                                                  red_pool=red_pool.size(c))

        manifest_entries = []
        for state in ok_frames:
            fid = state.entry.frame_id
            rng = derive_rng(cfg.seed, "inject", round_index, fid)
            red_sel = sample_balanced(red_pool, schedule.s_r, rng)
            gt_sel = sample_balanced(gt_pool, schedule.s_g, rng)
            outcome = inject(state.points, state.confident, red_sel, gt_sel,
                             cfg.ros_range, rng)
            for c in range(1, cfg.num_classes + 1):
                stats = report.per_class[c]
                stats.requested_red += min(schedule.s_r, red_pool.size(c))
                stats.requested_gt += min(schedule.s_g, gt_pool.size(c))
                stats.placed_red += outcome.placed_count(c, PROVENANCE_TARGET_PSEUDO)
                stats.placed_gt += outcome.placed_count(c, PROVENANCE_SOURCE_GT)
                stats.rejected_red += outcome.rejected_count(c, PROVENANCE_TARGET_PSEUDO)
                stats.rejected_gt += outcome.rejected_count(c, PROVENANCE_SOURCE_GT)
            p_path = round_dir / "points" / f"{fid}.bin"
            l_path = round_dir / "labels" / f"{fid}.txt"
            write_points(outcome.points, p_path)
            write_labels(outcome.labels, l_path)
            manifest_entries.append(ManifestEntry(fid, p_path, l_path))

        manifest_path = round_dir / "manifest.tsv"
        write_manifest(FrameManifest(manifest_entries), manifest_path)
        report.paths["manifest"] = manifest_path
        report_path = round_dir / "report.txt"
        write_round_report(report, schedule, report_path)
        report.paths["report"] = report_path
        report.validate(cfg.d)
        self.events.emit("round_done", round=round_index, epoch=epoch,
                         raw=report.raw_pseudo, kept=report.cde_kept,
                         red=report.red_size)
        return report

    # ---- stage 3 -----------------------------------------------------------

    def _train_all(self, manifest_path, round_index: int) -> None:
        manifest = read_manifest(manifest_path)
        if len(manifest) == 0:
            raise PipelineError("cannot train on an empty manifest")
        if not manifest.labeled():
            raise PipelineError("cannot train on a manifest with unlabeled frames")
        self.events.emit("train_start", round=round_index, manifest=manifest_path)
        try:
            for handle in self.handles:
                handle.train(manifest_path)
        except UnsupportedCommandError:
            self.events.emit("train_skipped", level="WARN", round=round_index,
                             reason="endpoint has no train support")
            return
        self.events.emit("train_done", round=round_index)

    # ---- driver ------------------------------------------------------------

    def run(self) -> list[RoundReport]:
        cfg = self.config
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        self.events = EventLog(cfg.out_dir / "events.log")
        self.events.emit("run_start", seed=cfg.seed, epochs=cfg.total_epochs,
                         label_epochs=",".join(str(e) for e in cfg.label_rounds))
        effective = {}
        for f in dataclasses.fields(cfg):
            v = getattr(cfg, f.name)
            effective[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
        self.events.emit("config", **effective)
        reports: list[RoundReport] = []
        try:
            self._source_manifest = read_manifest(cfg.source_manifest)
            target = read_manifest(cfg.target_manifest)
            if len(self._source_manifest) == 0 or len(target) == 0:
                raise PipelineError("source and target manifests must be non-empty")
            if not self._source_manifest.labeled():
                raise PipelineError("source manifest must have labels for every frame")
            self.handles = [self._factory() for _ in range(cfg.pool_size)]
            if cfg.pretrain:
                self._pretrain(self._source_manifest)
            self.events.emit("pretrain_handoff", pretrained="pipeline" if cfg.pretrain
                             else "external")

            schedule = RoundSchedule(cfg.s_r, cfg.s_g, cfg.s_delta)
            for round_index, epoch in enumerate(cfg.label_rounds, start=1):
                report = self.generate_round(round_index, epoch, schedule, target)
                reports.append(report)
                self._train_all(report.paths["manifest"], round_index)
                schedule = advance_schedule(schedule)
            self.events.emit("run_done", rounds=len(reports))
            return reports
        except Exception as exc:
            self.events.emit("run_failed", level="ERROR", error=type(exc).__name__)
            raise
        finally:
            for handle in self.handles:
                try:
                    handle.close()
                except Exception:
                    pass
            self.events.close()

    def _get_gt_pool(self) -> ObjectPool:
        if self._gt_pool is None:
            self._gt_pool = build_gt_pool(self._source_manifest, self.config.num_classes,
                                          drop_empty=self.config.drop_empty_gt)
            self.events.emit("gt_pool_built", total=self._gt_pool.total)
        return self._gt_pool


def _read_frame_labels(entry: ManifestEntry) -> LabelSet:
    if entry.labels_path is None:
        raise PipelineError(f"frame {entry.frame_id} has no labels")
    return read_labels(entry.labels_path, entry.frame_id)


def run(config: PipelineConfig, detector_factory=None) -> list[RoundReport]:
    """Execute the full alternating loop; returns one report per round."""
    return Pipeline(config, detector_factory).run()
