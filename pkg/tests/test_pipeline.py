import re
from pathlib import Path

import numpy as np
import pytest

from redb.cloud import read_labels, read_manifest
from redb.pipeline import (
    EventLog,
    Pipeline,
    PipelineConfig,
    PipelineError,
    RoundReport,
    load_config,
    run,
)
from redb.proto import DetectorError, InProcessDetector, UnsupportedCommandError
from redb.sim import MockDetector

from conftest import make_two_domains, mock_spec


@pytest.fixture
def domains(tmp_path):
    return make_two_domains(tmp_path, n_source=5, n_target=6, seed=1)


def base_config(domains, tmp_path, **overrides) -> PipelineConfig:
    source_dir, target_dir = domains
    defaults = dict(
        source_manifest=source_dir / "manifest.tsv",
        target_manifest=target_dir / "manifest.tsv",
        out_dir=tmp_path / "out",
        total_epochs=10,
        label_epochs=(4, 7),
        d=3.0,
        seed=5,
    )
    defaults.update(overrides)
    return PipelineConfig(**defaults)


def mock_factory(seed=0, **kw):
    def factory():
        return MockDetector(mock_spec(seed=seed, **kw)).handle()
    return factory


def parse_events(out_dir) -> list[dict]:
    events = []
    for line in (Path(out_dir) / "events.log").read_text().splitlines():
        parts = line.split()
        record = {"level": parts[1], "event": parts[2]}
        for kv in parts[3:]:
            key, _, value = kv.partition("=")
            record[key] = value
        events.append(record)
    return events


class TestConfig:
    def test_label_epochs_must_be_ascending(self, domains, tmp_path):
        with pytest.raises(ValueError, match="ascending"):
            base_config(domains, tmp_path, label_epochs=(7, 4))

    def test_label_epochs_must_fit_total(self, domains, tmp_path):
        with pytest.raises(ValueError, match="outside"):
            base_config(domains, tmp_path, label_epochs=(11,))
        with pytest.raises(ValueError, match="outside"):
            base_config(domains, tmp_path, label_epochs=(1,))

    def test_threshold_validation(self, domains, tmp_path):
        with pytest.raises(ValueError):
            base_config(domains, tmp_path, delta_cde=0.0)
        with pytest.raises(ValueError):
            base_config(domains, tmp_path, d=1.0)

    def test_load_config_file(self, domains, tmp_path):
        source_dir, target_dir = domains
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(f"""
# pipeline settings
source_manifest = {source_dir / 'manifest.tsv'}
target_manifest = {target_dir / 'manifest.tsv'}
out_dir = out
detector_cmd = python3 -m redb mock-detector
delta_pos = 0.55
label_epochs = 31, 61, 91
total_epochs = 120
ros_range = 0.8, 1.2
s_r = 5
s_g = 10
s_delta = 2
seed = 42
""")
        cfg = load_config(cfg_path)
        assert cfg.delta_pos == 0.55
        assert cfg.label_epochs == (31, 61, 91)
        assert cfg.label_rounds == [1, 31, 61, 91]
        assert cfg.ros_range == (0.8, 1.2)
        assert cfg.out_dir == tmp_path / "out"
        assert cfg.seed == 42

    def test_load_config_overrides(self, domains, tmp_path):
        source_dir, target_dir = domains
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(
            f"source_manifest = {source_dir / 'manifest.tsv'}\n"
            f"target_manifest = {target_dir / 'manifest.tsv'}\n"
            "out_dir = out\nseed = 1\n")
        cfg = load_config(cfg_path, seed=9, pool_size=2)
        assert cfg.seed == 9 and cfg.pool_size == 2

    def test_unknown_key_rejected(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text("wat = 7\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(cfg_path)


class TestRun:
    def test_full_run_layout_and_reports(self, domains, tmp_path):
        cfg = base_config(domains, tmp_path)
        reports = run(cfg, detector_factory=mock_factory())
        assert len(reports) == 3  # epochs 1, 4, 7
        assert [r.epoch for r in reports] == [1, 4, 7]
        for k, report in enumerate(reports, start=1):
            round_dir = cfg.out_dir / f"round_{k}"
            assert (round_dir / "manifest.tsv").exists()
            assert (round_dir / "report.txt").exists()
            manifest = read_manifest(round_dir / "manifest.tsv")
            assert len(manifest) == 6
            assert report.cde_kept <= report.raw_pseudo
            assert report.red_size == -(-report.obc_pool // int(cfg.d))
        assert (cfg.out_dir / "round_1" / "cde_verdicts.txt").exists()
        assert not (cfg.out_dir / "round_2" / "cde_verdicts.txt").exists()

    def test_event_log_stage_ordering(self, domains, tmp_path):
        cfg = base_config(domains, tmp_path)
        run(cfg, detector_factory=mock_factory())
        events = parse_events(cfg.out_dir)
        names = [e["event"] for e in events]
        assert names[0] == "run_start"
        assert "pretrain_handoff" in names
        round_epochs = [int(e["epoch"]) for e in events if e["event"] == "round_start"]
        assert round_epochs == [1, 4, 7]
        cde_rounds = {e["round"] for e in events if e["event"].startswith("cde_")}
        assert cde_rounds == {"1"}
        train_rounds = [e["round"] for e in events if e["event"] == "train_done"]
        assert train_rounds == ["1", "2", "3"]
        # labeling and training alternate
        seq = [e["event"] for e in events if e["event"] in ("round_done", "train_done")]
        assert seq == ["round_done", "train_done"] * 3

    def test_augmented_labels_superset_of_pseudo(self, domains, tmp_path):
        cfg = base_config(domains, tmp_path)
        reports = run(cfg, detector_factory=mock_factory())
        report = reports[0]
        total_injected = sum(s.placed_red + s.placed_gt
                             for s in report.per_class.values())
        labeled = 0
        for entry in read_manifest(report.paths["manifest"]):
            labeled += len(read_labels(entry.labels_path))
        assert labeled == report.cde_kept + total_injected

    def test_zero_confidence_round_still_injects_gt(self, domains, tmp_path):
        cfg = base_config(domains, tmp_path, delta_pos=1.0, label_epochs=())
        reports = run(cfg, detector_factory=mock_factory())
        report = reports[0]
        assert report.raw_pseudo == 0 and report.red_size == 0
        placed_gt = sum(s.placed_gt for s in report.per_class.values())
        assert placed_gt > 0
        placed_red = sum(s.placed_red for s in report.per_class.values())
        assert placed_red == 0

    def test_reconciliation_per_class(self, domains, tmp_path):
        cfg = base_config(domains, tmp_path)
        reports = run(cfg, detector_factory=mock_factory())
        for report in reports:
            for stats in report.per_class.values():
                assert stats.placed_red + stats.rejected_red == stats.requested_red
                assert stats.placed_gt + stats.rejected_gt == stats.requested_gt

    def test_byte_identical_reruns(self, domains, tmp_path):
        cfg_a = base_config(domains, tmp_path, out_dir=tmp_path / "out_a")
        cfg_b = base_config(domains, tmp_path, out_dir=tmp_path / "out_b")
        run(cfg_a, detector_factory=mock_factory())
        run(cfg_b, detector_factory=mock_factory())
        files_a = sorted(p for p in cfg_a.out_dir.rglob("*")
                         if p.is_file() and p.name != "events.log")
        files_b = sorted(p for p in cfg_b.out_dir.rglob("*")
                         if p.is_file() and p.name != "events.log")
        assert [p.relative_to(cfg_a.out_dir) for p in files_a] == \
            [p.relative_to(cfg_b.out_dir) for p in files_b]
        for pa, pb in zip(files_a, files_b):
            assert pa.read_bytes() == pb.read_bytes(), pa.name

    def test_manifests_reference_only_pipeline_files(self, domains, tmp_path):
        cfg = base_config(domains, tmp_path)
        reports = run(cfg, detector_factory=mock_factory())
        out_root = cfg.out_dir.resolve()
        for report in reports:
            for entry in read_manifest(report.paths["manifest"]):
                assert entry.points_path.resolve().is_relative_to(out_root)
                assert entry.labels_path.resolve().is_relative_to(out_root)
                assert entry.points_path.exists() and entry.labels_path.exists()

    def test_verdict_log_soundness_from_file_alone(self, domains, tmp_path):
        cfg = base_config(domains, tmp_path)
        run(cfg, detector_factory=mock_factory())
        text = (cfg.out_dir / "round_1" / "cde_verdicts.txt").read_text()
        rows = [l.split() for l in text.splitlines() if not l.startswith("#")]
        assert rows
        for _, _, _, best_iou, kept, examined in rows:
            if examined == "1":
                assert (kept == "1") == (float(best_iou) >= cfg.delta_cde)

    def test_schedule_advances_across_rounds(self, domains, tmp_path):
        cfg = base_config(domains, tmp_path, total_epochs=20, label_epochs=(5, 10, 15))
        run(cfg, detector_factory=mock_factory())
        traces = []
        for k in (1, 2, 3, 4):
            text = (cfg.out_dir / f"round_{k}" / "report.txt").read_text()
            m = re.search(r"schedule s_r=(\d+) s_g=(\d+)", text)
            traces.append((int(m.group(1)), int(m.group(2))))
        assert traces == [(5, 10), (7, 8), (9, 6), (11, 4)]

    def test_pool_size_does_not_change_outputs(self, domains, tmp_path):
        cfg_a = base_config(domains, tmp_path, out_dir=tmp_path / "o1", label_epochs=())
        cfg_b = base_config(domains, tmp_path, out_dir=tmp_path / "o2", label_epochs=(),
                            pool_size=3)
        run(cfg_a, detector_factory=mock_factory())
        run(cfg_b, detector_factory=mock_factory())
        for rel in ["round_1/manifest.tsv", "round_1/report.txt"]:
            assert (cfg_a.out_dir / rel).read_bytes() == (cfg_b.out_dir / rel).read_bytes()
        labels_a = sorted((cfg_a.out_dir / "round_1/labels").glob("*.txt"))
        labels_b = sorted((cfg_b.out_dir / "round_1/labels").glob("*.txt"))
        for pa, pb in zip(labels_a, labels_b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_train_broadcast_to_all_handles(self, domains, tmp_path):
        detectors = []

        def factory():
            det = MockDetector(mock_spec())
            detectors.append(det)
            return det.handle()

        cfg = base_config(domains, tmp_path, pool_size=2, label_epochs=(4,))
        run(cfg, detector_factory=factory)
        assert len(detectors) == 2
        assert all(d.train_count == 2 for d in detectors)

    def test_train_unsupported_is_skipped(self, domains, tmp_path):
        def factory():
            det = MockDetector(mock_spec())
            return InProcessDetector(det, prenms=True, train=False)

        cfg = base_config(domains, tmp_path, label_epochs=())
        run(cfg, detector_factory=factory)
        events = parse_events(cfg.out_dir)
        assert any(e["event"] == "train_skipped" for e in events)
        assert not any(e["event"] == "train_done" for e in events)

    def test_unlabeled_source_rejected(self, domains, tmp_path):
        source_dir, target_dir = domains
        stripped = tmp_path / "stripped.tsv"
        lines = []
        for line in (source_dir / "manifest.tsv").read_text().splitlines():
            frame_id, points, _ = line.split("\t")
            lines.append(f"{frame_id}\t{source_dir / points}")
        stripped.write_text("\n".join(lines) + "\n")
        cfg = base_config(domains, tmp_path, source_manifest=stripped)
        with pytest.raises(PipelineError, match="labels"):
            run(cfg, detector_factory=mock_factory())

    def test_majority_inference_failures_abort(self, domains, tmp_path):
        class Flaky:
            def detect(self, frame_id, points):
                raise DetectorError("no")

        cfg = base_config(domains, tmp_path, label_epochs=())
        with pytest.raises(PipelineError, match="failed"):
            run(cfg, detector_factory=lambda: InProcessDetector(Flaky(), train=False))
        events = parse_events(cfg.out_dir)
        assert any(e["event"] == "run_failed" for e in events)

    def test_pretrain_mode_emits_dataset_and_trains_first(self, domains, tmp_path):
        detectors = []

        def factory():
            det = MockDetector(mock_spec())
            detectors.append(det)
            return det.handle()

        cfg = base_config(domains, tmp_path, pretrain=True, label_epochs=())
        run(cfg, detector_factory=factory)
        pre = cfg.out_dir / "pretrain"
        assert (pre / "manifest.tsv").exists()
        manifest = read_manifest(pre / "manifest.tsv")
        assert len(manifest) == 5
        assert detectors[0].train_count == 2  # pretrain + round 1
        events = parse_events(cfg.out_dir)
        names = [e["event"] for e in events]
        assert names.index("train_done") < names.index("pretrain_handoff")


class TestEventLog:
    def test_format(self, tmp_path):
        log = EventLog(tmp_path / "events.log")
        log.emit("hello", level="WARN", a=1, b="x")
        log.close()
        line = (tmp_path / "events.log").read_text().strip()
        assert re.match(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2} WARN hello a=1 b=x$", line)
