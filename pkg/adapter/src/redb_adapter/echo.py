"""The bundled points-to-boxes function: a trivial cluster-echo detector.

Occupied-grid flood fill finds point blobs; each blob becomes one oriented
box via 2D PCA and min/max extents. No learning anywhere - this is the
single function a real integration replaces.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

DEFAULT_CLASS_DIMS = ((1.8, 4.5, 1.6), (0.6, 0.6, 1.7), (0.6, 1.8, 1.7))


@dataclass(frozen=True)
class AdapterConfig:
    """Capabilities announced in the handshake plus echo-detector knobs."""

    prenms: bool = True
    train: bool = True
    cell_size: float = 0.5
    min_cluster_points: int = 5
    score_rule: str = "saturating"  # or "constant:<value>"
    class_dims: tuple = DEFAULT_CLASS_DIMS

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.min_cluster_points < 1:
            raise ValueError("min_cluster_points must be at least 1")
        if self.score_rule != "saturating" and not self.score_rule.startswith("constant:"):
            raise ValueError(f"unknown score rule {self.score_rule!r}")


def _clusters(points: np.ndarray, cell: float, min_points: int):
    if points.shape[0] == 0:
        return []
    ix = np.floor(points[:, 0] / cell).astype(np.int64)
    iy = np.floor(points[:, 1] / cell).astype(np.int64)
    cells: dict[tuple[int, int], list[int]] = {}
    for i in range(points.shape[0]):
        cells.setdefault((int(ix[i]), int(iy[i])), []).append(i)
    seen = set()
    out = []
    for start in sorted(cells):
        if start in seen:
            continue
        seen.add(start)
        queue = deque([start])
        members: list[int] = []
        while queue:
            cx, cy = queue.popleft()
            members.extend(cells[(cx, cy)])
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    nb = (cx + dx, cy + dy)
                    if nb in cells and nb not in seen:
                        seen.add(nb)
                        queue.append(nb)
        if len(members) >= min_points:
            out.append(np.asarray(sorted(members)))
    return out


class ClusterEcho:
    """points -> boxes. Replace `detect` to integrate a real model."""

    def __init__(self, config: AdapterConfig | None = None):
        self.config = config or AdapterConfig()
        self.train_calls = 0

    def _score(self, n_points: int) -> float:
        rule = self.config.score_rule
        if rule.startswith("constant:"):
            return float(rule.split(":", 1)[1])
        return round(n_points / (n_points + 25.0), 6)

    def _classify(self, w: float, l: float, h: float) -> int:
        dims = np.asarray(self.config.class_dims)
        return int(np.argmin(np.linalg.norm(dims - np.array([w, l, h]), axis=1))) + 1

    def _fit(self, pts: np.ndarray) -> dict:
        xy = pts[:, :2].astype(np.float64)
        centroid = xy.mean(axis=0)
        centered = xy - centroid
        cov = centered.T @ centered / max(1, len(xy))
        eigvals, eigvecs = np.linalg.eigh(cov)
        major = eigvecs[:, int(np.argmax(eigvals))]
        yaw = math.atan2(float(major[1]), float(major[0])) - math.pi / 2.0
        c, s = math.cos(yaw), math.sin(yaw)
        lx = c * centered[:, 0] + s * centered[:, 1]
        ly = -s * centered[:, 0] + c * centered[:, 1]
        w = max(0.1, float(lx.max() - lx.min()))
        l = max(0.1, float(ly.max() - ly.min()))
        mx = float(lx.max() + lx.min()) / 2.0
        my = float(ly.max() + ly.min()) / 2.0
        z = pts[:, 2].astype(np.float64)
        h = max(0.1, float(z.max() - z.min()))
        return {
            "cx": float(centroid[0] + c * mx - s * my),
            "cy": float(centroid[1] + s * mx + c * my),
            "cz": float(z.max() + z.min()) / 2.0,
            "w": w, "l": l, "h": h,
            "yaw": math.atan2(math.sin(yaw), math.cos(yaw)),
            "class": self._classify(w, l, h),
            "score": self._score(len(pts)),
        }

    def detect(self, points: np.ndarray) -> list[dict]:
        """Wire-format box dicts for every cluster, best score first."""
        boxes = [self._fit(points[idx])
                 for idx in _clusters(points, self.config.cell_size,
                                      self.config.min_cluster_points)]
        boxes.sort(key=lambda b: -b["score"])
        return boxes

    def train(self, manifest_path) -> None:
        """Acknowledge-only: a real adapter would run its optimizer here."""
        from pathlib import Path

        text = Path(manifest_path).read_text(encoding="utf-8")
        rows = [line for line in text.splitlines() if line.strip()]
        if not rows:
            raise ValueError("training manifest is empty")
        for row in rows:
            if len(row.split("\t")) < 3:
                raise ValueError("training manifest has unlabeled frames")
        self.train_calls += 1
