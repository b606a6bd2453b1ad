#!/usr/bin/env python3
"""Point-cloud surgery: crop an object out, clear a region, paste it back.

These three operators (crop, remove, concatenate) plus uniform object
rescaling are all the pipeline needs to move objects between frames.
"""

import numpy as np

from redb import Box3D, crop_object_points, paste, remove_points_in_boxes, ros_scale
from redb.cloud import PROVENANCE_SOURCE_GT, ObjectBankEntry

rng = np.random.default_rng(7)

# A toy frame: flat ground plus one dense car-shaped blob.
ground = np.empty((3000, 4), dtype=np.float32)
ground[:, 0] = rng.uniform(-20, 20, 3000)
ground[:, 1] = rng.uniform(-20, 20, 3000)
ground[:, 2] = rng.uniform(0.0, 0.15, 3000)
ground[:, 3] = rng.random(3000)

car = Box3D(cx=6.0, cy=-4.0, cz=0.8, w=1.8, l=4.5, h=1.6, yaw=0.6, class_id=1)
n = 500
local = np.empty((n, 4))
local[:, 0] = rng.uniform(-car.w / 2, car.w / 2, n)
local[:, 1] = rng.uniform(-car.l / 2, car.l / 2, n)
local[:, 2] = rng.uniform(-car.h / 2, car.h / 2, n)
local[:, 3] = rng.random(n)
entry = ObjectBankEntry(car, local, PROVENANCE_SOURCE_GT, origin_frame="demo")
frame = paste(ground, [entry])
print(f"frame: {frame.shape[0]} points ({ground.shape[0]} ground + {n} car)")

print("\n=== crop: pull the object into its local frame ===")
cropped = crop_object_points(frame, car)
print(f"cropped {cropped.shape[0]} interior points; local-frame x range "
      f"[{cropped[:, 0].min():.2f}, {cropped[:, 0].max():.2f}] vs half-width {car.w / 2}")

print("\n=== remove: clear everything under the footprint ===")
cleared = remove_points_in_boxes(frame, [car])
print(f"{frame.shape[0] - cleared.shape[0]} points removed "
      f"(car points and the ground returns beneath it)")
print(f"points left inside the box after removal: "
      f"{crop_object_points(cleared, car).shape[0]}")

print("\n=== paste: put the object back, bit-faithfully ===")
restored = paste(cleared, [ObjectBankEntry(car, cropped, PROVENANCE_SOURCE_GT, "demo")])
round_trip = crop_object_points(restored, car)
err = np.abs(np.sort(round_trip[:, 0]) - np.sort(cropped[:, 0])).max()
print(f"crop -> paste -> crop max coordinate drift: {err:.2e} m")

print("\n=== rescale: uniform object scaling for the pretraining augmentation ===")
bigger = ros_scale(entry, 1.25)
print(f"dims {entry.box.w:.2f}x{entry.box.l:.2f}x{entry.box.h:.2f}"
      f" -> {bigger.box.w:.2f}x{bigger.box.l:.2f}x{bigger.box.h:.2f}")
print(f"pose unchanged: center ({bigger.box.cx}, {bigger.box.cy}, {bigger.box.cz}),"
      f" yaw {bigger.box.yaw}")
