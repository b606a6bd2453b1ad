#!/usr/bin/env python3
"""Class-balanced augmentation: pools, per-class sampling, collision-free paste.

Builds the labeled-source object pool, samples an equal number of objects
per class, injects them into a target frame at their recorded poses, and
advances the schedule that trades source objects for pseudo objects across
rounds.
"""

import tempfile
from pathlib import Path

from redb import RoundSchedule, advance_schedule, build_gt_pool, inject, sample_balanced
from redb.cloud import LabelSet, read_points
from redb.geom import bev_iou
from redb.sim import DomainSpec, generate_domain
from redb.util import derive_rng

root = Path(tempfile.mkdtemp(prefix="redb-demo-"))
source = generate_domain(DomainSpec(name="source", frames=8, density=90.0,
                                    clutter_rate=200.0, objects_per_frame=(2, 5),
                                    rng_seed=21),
                         root / "source")
target = generate_domain(DomainSpec(name="target", frames=1, density=60.0,
                                    clutter_rate=250.0, objects_per_frame=(2, 4),
                                    rng_seed=22),
                         root / "target")

print("=== the labeled-object pool ===")
pool = build_gt_pool(source, num_classes=3)
for class_id in (1, 2, 3):
    print(f"  class {class_id}: {pool.size(class_id)} banked objects")

print("\n=== per-class sampling ===")
rng = derive_rng(0, "demo")
picked = sample_balanced(pool, per_class=4, rng=rng)
counts = {c: sum(1 for e in picked if e.box.class_id == c) for c in (1, 2, 3)}
print(f"requested 4 per class, drew {counts} "
      "(shortfalls are clamped to the pool size)")

print("\n=== injection into a target frame ===")
entry = target.entries[0]
points = read_points(entry.points_path)
existing = LabelSet(entry.frame_id, [])
result = inject(points, existing, red_entries=[], gt_entries=picked,
                ros_range=(0.75, 1.25), rng=rng)
print(f"placed {len(result.placed)} objects, rejected {len(result.rejected)} "
      f"(reasons: {sorted({r for _, r in result.rejected}) or 'none'})")
print(f"frame grew from {points.shape[0]} to {result.points.shape[0]} points")

worst = 0.0
boxes = result.labels.boxes
for i, a in enumerate(boxes):
    for b in boxes[i + 1:]:
        worst = max(worst, bev_iou(a, b))
print(f"max pairwise footprint IoU between placed boxes: {worst} (must be 0)")

print("\n=== the progressive schedule ===")
schedule = RoundSchedule(s_r=5, s_g=10, s_delta=2)
for round_index in range(1, 5):
    print(f"  round {round_index}: {schedule.s_r} pseudo + {schedule.s_g} source objects per class")
    schedule = advance_schedule(schedule)
print("source objects fade out as the detector grows into the target domain")
