import numpy as np
import pytest

from redb.balance import (
    InjectionResult,
    ObjectPool,
    RoundSchedule,
    advance_schedule,
    build_gt_pool,
    inject,
    sample_balanced,
)
from redb.cloud import (
    PROVENANCE_SOURCE_GT,
    PROVENANCE_TARGET_PSEUDO,
    FrameManifest,
    LabelSet,
    ManifestEntry,
    ObjectBankEntry,
    local_to_world,
    write_labels,
    write_points,
)
from redb.geom import Box3D, bev_iou

from oracles import brute_force_points_in_box


class TestSchedule:
    def test_paper_defaults_advance(self):
        s = advance_schedule(RoundSchedule(5, 10, 2))
        assert (s.s_r, s.s_g, s.round_index) == (7, 8, 1)

    def test_clamps_at_zero(self):
        s = advance_schedule(RoundSchedule(9, 0, 2))
        assert (s.s_r, s.s_g) == (11, 0)

    def test_zero_delta_fixed_point(self):
        s = RoundSchedule(4, 6, 0)
        for _ in range(5):
            s = advance_schedule(s)
        assert (s.s_r, s.s_g, s.round_index) == (4, 6, 5)

    def test_iterated_closed_form(self):
        s = RoundSchedule(5, 10, 2)
        for k in range(1, 9):
            s = advance_schedule(s)
            assert s.s_r == 5 + 2 * k
            assert s.s_g == max(0, 10 - 2 * k)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            RoundSchedule(-1, 0, 0)


def object_entry(cx, cy, class_id, provenance=PROVENANCE_TARGET_PSEUDO,
                 origin="elsewhere", n_points=20, dims=(1.0, 2.0, 1.0), seed=0):
    rng = np.random.default_rng(seed)
    box = Box3D(cx, cy, dims[2] / 2, *dims, 0.3, class_id, 0.9)
    local = np.zeros((n_points, 4))
    local[:, 0] = rng.uniform(-dims[0] / 2, dims[0] / 2, n_points)
    local[:, 1] = rng.uniform(-dims[1] / 2, dims[1] / 2, n_points)
    local[:, 2] = rng.uniform(-dims[2] / 2, dims[2] / 2, n_points)
    return ObjectBankEntry(box, local, provenance, origin)


def write_source_frame(tmp_path, frame_id, boxes, rng, background=200):
    pts = np.empty((background, 4), dtype=np.float32)
    pts[:, :2] = rng.uniform(-20, 20, (background, 2)).astype(np.float32)
    pts[:, 2] = rng.uniform(0, 1, background).astype(np.float32)
    pts[:, 3] = rng.random(background, dtype=np.float32)
    chunks = [pts]
    for b in boxes:
        n = 30
        local = np.zeros((n, 4))
        local[:, 0] = rng.uniform(-b.w / 2, b.w / 2, n)
        local[:, 1] = rng.uniform(-b.l / 2, b.l / 2, n)
        local[:, 2] = rng.uniform(-b.h / 2, b.h / 2, n)
        chunks.append(local_to_world(local, b).astype(np.float32))
    cloud = np.concatenate(chunks)
    p_path = tmp_path / f"{frame_id}.bin"
    l_path = tmp_path / f"{frame_id}.txt"
    write_points(cloud, p_path)
    write_labels(LabelSet(frame_id, boxes), l_path)
    return ManifestEntry(frame_id, p_path, l_path)


class TestGtPool:
    def test_class_counts(self, tmp_path, rng):
        f1 = write_source_frame(tmp_path, "s0", [
            Box3D(5, 5, 0.8, 1.8, 4.5, 1.6, 0.1, 1),
            Box3D(-8, 2, 0.8, 1.8, 4.5, 1.6, 0.4, 1),
            Box3D(0, -9, 0.85, 0.6, 0.6, 1.7, 0.0, 2),
        ], rng)
        f2 = write_source_frame(tmp_path, "s1", [
            Box3D(3, -3, 0.8, 1.8, 4.5, 1.6, 1.0, 1),
        ], rng)
        pool = build_gt_pool(FrameManifest([f1, f2]), num_classes=3)
        assert pool.size(1) == 3
        assert pool.size(2) == 1
        assert pool.size(3) == 0
        assert pool.total == 4
        assert pool.provenance == PROVENANCE_SOURCE_GT

    def test_zero_point_boxes_kept_unless_dropped(self, tmp_path, rng):
        far_box = Box3D(500, 500, 0.8, 1, 1, 1, 0, 1)  # no points near it
        pts = np.zeros((10, 4), dtype=np.float32)  # all at the origin
        write_points(pts, tmp_path / "s0.bin")
        write_labels(LabelSet("s0", [far_box]), tmp_path / "s0.txt")
        entry = ManifestEntry("s0", tmp_path / "s0.bin", tmp_path / "s0.txt")
        pool = build_gt_pool(FrameManifest([entry]), num_classes=3)
        assert pool.size(1) == 1
        assert pool.entries(1)[0].num_points == 0
        dropped = build_gt_pool(FrameManifest([entry]), num_classes=3, drop_empty=True)
        assert dropped.size(1) == 0

    def test_unreadable_frame_skipped(self, tmp_path, rng):
        good = write_source_frame(tmp_path, "s0", [Box3D(0, 0, 0.5, 1, 1, 1, 0, 1)], rng)
        bad = ManifestEntry("s1", tmp_path / "missing.bin", tmp_path / "missing.txt")
        pool = build_gt_pool(FrameManifest([good, bad]), num_classes=3)
        assert pool.total == 1

    def test_requires_labels(self, tmp_path, rng):
        entry = write_source_frame(tmp_path, "s0", [], rng)
        unlabeled = ManifestEntry("s0", entry.points_path, None)
        with pytest.raises(ValueError):
            build_gt_pool(FrameManifest([unlabeled]), num_classes=3)


class TestSampleBalanced:
    def _pool(self, sizes):
        entries = []
        i = 0
        for class_id, n in sizes.items():
            for _ in range(n):
                entries.append(object_entry(30.0 * i, 0, class_id,
                                            PROVENANCE_SOURCE_GT, f"f{i}"))
                i += 1
        return ObjectPool.from_entries(entries, max(sizes), PROVENANCE_SOURCE_GT)

    def test_zero_request(self, rng):
        assert sample_balanced(self._pool({1: 5, 2: 5, 3: 5}), 0, rng) == []

    def test_full_per_class(self, rng):
        chosen = sample_balanced(self._pool({1: 10, 2: 10, 3: 10}), 5, rng)
        counts = {c: sum(1 for e in chosen if e.box.class_id == c) for c in (1, 2, 3)}
        assert counts == {1: 5, 2: 5, 3: 5}

    def test_shortfall_clamps(self, rng):
        chosen = sample_balanced(self._pool({1: 10, 2: 10, 3: 3}), 5, rng)
        counts = {c: sum(1 for e in chosen if e.box.class_id == c) for c in (1, 2, 3)}
        assert counts == {1: 5, 2: 5, 3: 3}

    def test_no_duplicates_within_draw(self, rng):
        pool = self._pool({1: 8})
        chosen = sample_balanced(pool, 8, rng)
        assert len({id(e) for e in chosen}) == 8


class TestInject:
    def _frame(self, rng, existing=()):
        pts = np.empty((300, 4), dtype=np.float32)
        pts[:, :2] = rng.uniform(-15, 15, (300, 2)).astype(np.float32)
        pts[:, 2] = rng.uniform(0, 1.2, 300).astype(np.float32)
        pts[:, 3] = rng.random(300, dtype=np.float32)
        return pts, LabelSet("t0", list(existing))

    def test_zero_entries_identity(self, rng):
        pts, labels = self._frame(rng)
        out = inject(pts, labels, [], [], (0.75, 1.25), rng)
        assert np.array_equal(out.points, pts)
        assert out.labels.boxes == labels.boxes
        assert out.placed == [] and out.rejected == []

    def test_colliding_pair_first_wins(self, rng):
        pts, labels = self._frame(rng)
        a = object_entry(0, 0, 1)
        b = object_entry(0.3, 0, 1)
        assert bev_iou(a.box, b.box) > 0
        out = inject(pts, labels, [a, b], [], (1.0, 1.0), rng)
        assert out.placed == [a]
        assert out.rejected == [(b, "collision")]

    def test_collision_against_existing_label(self, rng):
        existing = Box3D(2, 2, 0.5, 2, 2, 1, 0, 1, 0.7)
        pts, labels = self._frame(rng, existing=[existing])
        cand = object_entry(2.4, 2, 1)
        out = inject(pts, labels, [cand], [], (1.0, 1.0), rng)
        assert out.placed == []
        assert out.rejected[0][1] == "collision"

    def test_origin_frame_excluded(self, rng):
        pts, labels = self._frame(rng)
        cand = object_entry(0, 0, 1, origin="t0")
        out = inject(pts, labels, [cand], [], (1.0, 1.0), rng)
        assert out.rejected == [(cand, "origin-frame")]

    def test_no_overlaps_after_injection(self, rng):
        pts, labels = self._frame(rng, existing=[Box3D(-5, -5, 0.5, 2, 3, 1, 0.2, 1, 0.8)])
        red = [object_entry(4.0 * i, 0, 1, origin=f"r{i}", seed=i) for i in range(4)]
        gt = [object_entry(4.0 * i, 6.0, 2, PROVENANCE_SOURCE_GT, f"g{i}", seed=10 + i)
              for i in range(4)]
        out = inject(pts, labels, red, gt, (0.75, 1.25), rng)
        boxes = out.labels.boxes
        injected = boxes[1:]
        for i, a in enumerate(injected):
            for b in boxes[:1 + i]:
                if a is b:
                    continue
                assert bev_iou(a, b) == 0.0

    def test_gt_entries_are_rescaled(self, rng):
        pts, labels = self._frame(rng)
        gt = object_entry(0, 0, 1, PROVENANCE_SOURCE_GT, "g0")
        out = inject(pts, labels, [], [gt], (1.5, 1.5), rng)
        assert len(out.placed) == 1
        scaled = out.placed[0].box
        assert scaled.w == pytest.approx(gt.box.w * 1.5)
        assert scaled.l == pytest.approx(gt.box.l * 1.5)

    def test_red_scores_survive_gt_has_none(self, rng):
        pts, labels = self._frame(rng)
        red = object_entry(0, 0, 1)
        gt_box = Box3D(8, 8, 0.5, 1, 2, 1, 0, 2)  # GT labels carry no score
        gt = ObjectBankEntry(gt_box, np.zeros((0, 4)), PROVENANCE_SOURCE_GT, "g0")
        out = inject(pts, labels, [red], [gt], (1.0, 1.0), rng)
        added = out.labels.boxes
        assert added[0].score == 0.9
        assert added[1].score is None

    def test_background_cleared_and_points_pasted(self, rng):
        pts, labels = self._frame(rng)
        cand = object_entry(0, 0, 1, n_points=25)
        out = inject(pts, labels, [cand], [], (1.0, 1.0), rng)
        # every pasted point is inside the placed box; no background point
        # remains under the enlarged footprint
        inside = brute_force_points_in_box(out.points, cand.box)
        assert sum(inside) == 25
        world = local_to_world(cand.points, cand.box)
        np.testing.assert_allclose(out.points[-25:, :3], world[:, :3], atol=1e-6)

    def test_counts_reconcile(self, rng):
        pts, labels = self._frame(rng)
        red = [object_entry(3.0 * i, 0, 1, origin=f"r{i}", seed=i) for i in range(5)]
        gt = [object_entry(3.0 * i, 5.0, 2, PROVENANCE_SOURCE_GT, f"g{i}", seed=20 + i)
              for i in range(5)]
        out = inject(pts, labels, red, gt, (0.9, 1.1), rng)
        for class_id, provenance, requested in ((1, PROVENANCE_TARGET_PSEUDO, 5),
                                                (2, PROVENANCE_SOURCE_GT, 5)):
            placed = out.placed_count(class_id, provenance)
            rejected = out.rejected_count(class_id, provenance)
            assert placed + rejected == requested
