"""Diversity scoring: overlapped-box counting, Gaussian KDE, inverse sampling.

A pseudo-labeled box's OBC is how many raw pre-NMS candidates crowd it
above an IoU threshold; detectors pile more candidates onto objects with
uncommon geometry, so high OBC marks diversity. A Gaussian KDE over all
OBC values gives the density of "commonness", and the reliable-diverse
subset is drawn without replacement with weights proportional to the
inverse density.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Box3D, bev_iou, iou_3d
from .util import fmt_float

log = logging.getLogger(__name__)

# Densities are clamped below at this value before inversion.
DENSITY_FLOOR = 1e-9

# OBC is integer-valued; a narrower kernel than this turns the KDE into
# a comb of spikes.
SILVERMAN_MIN_SIGMA = 0.5


@dataclass(frozen=True)
class ObcConfig:
    """Knobs for OBC counting and inverse-KDE downsampling."""

    delta_obc: float = 0.3
    d: float = 5.0
    bandwidth: float | str = "silverman"
    rng_seed: int = 0
    iou_mode: str = "bev"

    def __post_init__(self):
        if not 0.0 < self.delta_obc < 1.0:
            raise ValueError(f"delta_obc must be in (0, 1), got {self.delta_obc}")
        if not self.d > 1.0:
            raise ValueError(f"downsampling rate d must exceed 1, got {self.d}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "silverman":
                raise ValueError(f"unknown bandwidth rule {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.iou_mode not in ("bev", "3d"):
            raise ValueError(f"iou_mode must be 'bev' or '3d', got {self.iou_mode!r}")


def count_obc(kept: Box3D, prenms, delta_obc: float, iou_mode: str = "bev") -> int:
    """Number of pre-NMS candidates overlapping a kept box above delta_obc.

    The kept box counts toward its own tally, so the result is at least 1
    even when the endpoint omitted the survivor from its candidate list.
    """
    iou = bev_iou if iou_mode == "bev" else iou_3d
    n = sum(1 for cand in prenms if iou(cand, kept) > delta_obc)
    return max(n, 1)


def collect_obc(frames, cfg: ObcConfig) -> np.ndarray:
    """OBC values for every kept box across frames of (kept, prenms) pairs."""
    values = [
        count_obc(box, prenms, cfg.delta_obc, cfg.iou_mode)
        for kept, prenms in frames
        for box in kept
    ]
    return np.asarray(values, dtype=np.int64)


@dataclass(frozen=True)
class KdeModel:
    """Gaussian KDE over a multiset of scalar samples."""

    samples: np.ndarray = field(repr=False)
    sigma: float
    count: int


def silverman_bandwidth(values: np.ndarray) -> float:
    """Rule-of-thumb bandwidth 1.06 * std * n^(-1/5).

    Falls back to 1.0 for degenerate (constant or single-sample) data and
    never goes below SILVERMAN_MIN_SIGMA since the samples are integers.
    """
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n < 2:
        return 1.0
    std = float(np.std(v, ddof=1))
    if std == 0.0:
        return 1.0
    return max(SILVERMAN_MIN_SIGMA, 1.06 * std * n ** (-1.0 / 5.0))


def kde_fit(values, bandwidth: float | str = "silverman") -> KdeModel:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot fit a KDE to zero samples")
    if isinstance(bandwidth, str):
        if bandwidth != "silverman":
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        sigma = silverman_bandwidth(v)
    else:
        sigma = float(bandwidth)
        if not sigma > 0:
            raise ValueError(f"bandwidth must be positive, got {sigma}")
    return KdeModel(v.copy(), sigma, int(v.size))


def kde_eval(model: KdeModel, x):
    """Density at x by direct summation over all kernel terms.

    Accepts a scalar or an array; returns the matching shape.
    """
    xs = np.asarray(x, dtype=np.float64)
    z = (model.samples[np.newaxis, :] - xs.reshape(-1, 1)) / model.sigma
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (model.count * model.sigma * math.sqrt(2.0 * math.pi))
    if xs.ndim == 0:
        return float(dens[0])
    return dens.reshape(xs.shape)


def selection_weights(model: KdeModel, obc_values) -> np.ndarray:
    """Inverse-density sampling weights for a list of OBC values."""
    dens = np.maximum(kde_eval(model, np.asarray(obc_values, dtype=np.float64)), DENSITY_FLOOR)
    return 1.0 / dens


def weighted_sample_without_replacement(weights: np.ndarray, k: int,
                                        rng: np.random.Generator) -> np.ndarray:
    """Draw k distinct indices with probability proportional to weight.

    Uses exponential clocks: index j gets key Exp(1)/w_j and the k smallest
    keys win, which realizes exact sequential weighted sampling without
    replacement in one pass. Returned indices are sorted ascending.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive and finite")
    if not 0 <= k <= w.size:
        raise ValueError(f"cannot draw {k} of {w.size}")
    keys = rng.exponential(size=w.size) / w
    chosen = np.argsort(keys, kind="stable")[:k]
    return np.sort(chosen)


def subset_size(pool_size: int, d: float) -> int:
    """⌈pool/d⌉ - never empty for a non-empty pool."""
    return int(math.ceil(pool_size / d)) if pool_size else 0


def downsample(pool, model: KdeModel, d: float, rng: np.random.Generator) -> list:
    """Draw the reliable-diverse subset of ⌈|pool|/d⌉ entries.

    Entries must carry their obc value; selection weight is the inverse
    KDE density at that value. Returns entries in pool order.
    """
    if len(pool) == 0:
        raise ValueError("cannot downsample an empty pool")
    obcs = np.array([entry.obc for entry in pool], dtype=np.float64)
    if np.any(np.isnan(obcs)):
        raise ValueError("every pool entry needs an obc value")
    weights = selection_weights(model, obcs)
    idx = weighted_sample_without_replacement(weights, subset_size(len(pool), d), rng)
    return [pool[i] for i in idx]


def write_obc_report(path, rows, histogram) -> None:
    """Write the per-box OBC report plus a `value count` histogram block.

    rows: iterable of (frame_id, box_index, obc, weight, selected).
    """
    lines = ["# frame_id box_index obc weight selected"]
    for frame_id, box_index, obc, weight, selected in rows:
        lines.append(f"{frame_id} {box_index} {obc} {fmt_float(weight)} {int(selected)}")
    lines.append("# histogram")
    for value in sorted(histogram):
        lines.append(f"{value} {histogram[value]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
