#!/usr/bin/env python3
"""Talking to a detector endpoint over the redb/1 line protocol.

Launches the built-in mock detector as a real subprocess, exactly as the
pipeline would launch any external detector, and walks one handshake,
two inferences, and a train call.
"""

import sys
import tempfile
from pathlib import Path

from redb import filter_confident, launch_detector
from redb.cloud import write_labels, write_manifest, write_points, FrameManifest, \
    ManifestEntry
from redb.sim import DomainSpec, generate_frame

workdir = Path(tempfile.mkdtemp(prefix="redb-demo-"))
spec = DomainSpec(name="demo", frames=1, clutter_rate=120.0, objects_per_frame=(3, 3),
                  rng_seed=1)
frame_id, points, labels = generate_frame(spec, 0)
points_path = workdir / f"{frame_id}.bin"
write_points(points, points_path)
print(f"wrote a synthetic frame with {len(labels.boxes)} objects to {points_path}")

print("\n=== handshake ===")
detector = launch_detector([sys.executable, "-m", "redb", "mock-detector"])
print(f"endpoint capabilities: prenms={detector.prenms_capable} train={detector.train_capable}")

print("\n=== inference ===")
result = detector.infer(frame_id, points, points_path=points_path)
print(f"{len(result.postnms)} final boxes, {len(result.prenms)} raw candidates")
confident = filter_confident(result, delta_pos=0.6)
print(f"{len(confident)} boxes above the 0.6 confidence threshold:")
for box in confident.boxes:
    print(f"  class {box.class_id} at ({box.cx:+6.2f}, {box.cy:+6.2f})"
          f" score {box.score:.3f}")

print("\n=== training handoff ===")
labels_path = workdir / f"{frame_id}.txt"
write_labels(confident, labels_path)
manifest_path = workdir / "manifest.tsv"
write_manifest(FrameManifest([ManifestEntry(frame_id, points_path, labels_path)]),
               manifest_path)
detector.train(manifest_path)
print("train acknowledged; the endpoint owns whatever learning actually happens")

detector.close()
print("\nendpoint shut down cleanly")
