"""Oriented 3D box geometry: BEV/3D IoU via convex clipping, containment, NMS.

Boxes are (cx, cy, cz, w, l, h, yaw): w spans the local x axis, l the local
y axis, h the vertical z axis, and yaw rotates the footprint about z. All
IoU paths go through an exact Sutherland-Hodgman clip of the two footprint
quadrilaterals followed by the shoelace formula; intersection areas below
``AREA_EPS`` are treated as empty so collinear-edge slivers do not leak
into downstream zero-overlap checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi

# Intersection areas below this are degenerate float noise, not overlap.
AREA_EPS = 1e-12


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.fmod(yaw, TWO_PI)
    if y > math.pi:
        y -= TWO_PI
    elif y <= -math.pi:
        y += TWO_PI
    return y


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D bounding box with class and optional confidence."""

    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    yaw: float
    class_id: int = 1
    score: float | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box dims must be positive, got w={self.w} l={self.l} h={self.h}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h

    @property
    def footprint_area(self) -> float:
        return self.w * self.l

    def as_array(self) -> np.ndarray:
        """(cx, cy, cz, w, l, h, yaw) as float64."""
        return np.array([self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw])

    def with_score(self, score: float | None) -> "Box3D":
        return Box3D(self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw,
                     self.class_id, score)


def _shoelace(vertices: np.ndarray) -> float:
    x = vertices[:, 0]
    y = vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(frozen=True)
class BevPolygon:
    """Convex counter-clockwise footprint polygon in the ground plane."""

    vertices: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs an (n, 2) array with n >= 3")
        if _shoelace(v) <= 0:
            raise ValueError("polygon must be counter-clockwise with positive area")
        n = v.shape[0]
        for i in range(n):
            a, b, c = v[i], v[(i + 1) % n], v[(i + 2) % n]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if cross < -AREA_EPS:
                raise ValueError("polygon is not convex")
        object.__setattr__(self, "vertices", v)

    @property
    def area(self) -> float:
        return _shoelace(self.vertices)


@njit(cache=True)
def _corners_bev(cx, cy, w, l, yaw):
    c = math.cos(yaw)
    s = math.sin(yaw)
    hx = 0.5 * w
    hy = 0.5 * l
    out = np.empty((4, 2))
    out[0, 0] = cx + c * hx - s * hy
    out[0, 1] = cy + s * hx + c * hy
    out[1, 0] = cx - c * hx - s * hy
    out[1, 1] = cy - s * hx + c * hy
    out[2, 0] = cx - c * hx + s * hy
    out[2, 1] = cy - s * hx - c * hy
    out[3, 0] = cx + c * hx + s * hy
    out[3, 1] = cy + s * hx - c * hy
    return out


@njit(cache=True)
def _clip_area(subj, clip):
    """Area of subj ∩ clip (both convex CCW) via Sutherland-Hodgman + shoelace."""
    cap = subj.shape[0] + clip.shape[0] + 4
    cur = np.empty((cap, 2))
    nxt = np.empty((cap, 2))
    n_cur = subj.shape[0]
    for i in range(n_cur):
        cur[i, 0] = subj[i, 0]
        cur[i, 1] = subj[i, 1]
    m = clip.shape[0]
    for e in range(m):
        if n_cur == 0:
            return 0.0
        ax = clip[e, 0]
        ay = clip[e, 1]
        bx = clip[(e + 1) % m, 0]
        by = clip[(e + 1) % m, 1]
        ex = bx - ax
        ey = by - ay
        n_nxt = 0
        px = cur[n_cur - 1, 0]
        py = cur[n_cur - 1, 1]
        p_side = ex * (py - ay) - ey * (px - ax)
        for j in range(n_cur):
            qx = cur[j, 0]
            qy = cur[j, 1]
            q_side = ex * (qy - ay) - ey * (qx - ax)
            # boundary (side == 0) counts as inside
            q_in = q_side >= 0.0
            p_in = p_side >= 0.0
            if q_in != p_in:
                t = p_side / (p_side - q_side)
                nxt[n_nxt, 0] = px + t * (qx - px)
                nxt[n_nxt, 1] = py + t * (qy - py)
                n_nxt += 1
            if q_in:
                nxt[n_nxt, 0] = qx
                nxt[n_nxt, 1] = qy
                n_nxt += 1
            px = qx
            py = qy
            p_side = q_side
        tmp = cur
        cur = nxt
        nxt = tmp
        n_cur = n_nxt
    if n_cur < 3:
        return 0.0
    area = 0.0
    for j in range(n_cur):
        k = (j + 1) % n_cur
        area += cur[j, 0] * cur[k, 1] - cur[k, 0] * cur[j, 1]
    area *= 0.5
    if area < AREA_EPS:
        return 0.0
    return area


@njit(cache=True)
def _quad_area(corners):
    area = 0.0
    n = corners.shape[0]
    for j in range(n):
        k = (j + 1) % n
        area += corners[j, 0] * corners[k, 1] - corners[k, 0] * corners[j, 1]
    return 0.5 * area


@njit(cache=True)
def _bev_inter_area(acx, acy, aw, al, ayaw, bcx, bcy, bw, bl, byaw):
    ca = _corners_bev(acx, acy, aw, al, ayaw)
    cb = _corners_bev(bcx, bcy, bw, bl, byaw)
    return _clip_area(ca, cb)


@njit(cache=True)
def _bev_iou7(a, b):
    # Footprint areas come from the same corner shoelace as the clipped
    # intersection so identical boxes land on exactly 1.0.
    ca = _corners_bev(a[0], a[1], a[3], a[4], a[6])
    cb = _corners_bev(b[0], b[1], b[3], b[4], b[6])
    inter = _clip_area(ca, cb)
    union = _quad_area(ca) + _quad_area(cb) - inter
    if union <= 0.0:
        return 0.0
    v = inter / union
    if v < 0.0:
        return 0.0
    if v > 1.0:
        return 1.0
    return v


@njit(cache=True)
def _iou3d7(a, b):
    zlo = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
    zhi = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
    dz = zhi - zlo
    if dz <= 0.0:
        return 0.0
    ca = _corners_bev(a[0], a[1], a[3], a[4], a[6])
    cb = _corners_bev(b[0], b[1], b[3], b[4], b[6])
    inter = _clip_area(ca, cb) * dz
    union = _quad_area(ca) * a[5] + _quad_area(cb) * b[5] - inter
    if union <= 0.0:
        return 0.0
    v = inter / union
    if v < 0.0:
        return 0.0
    if v > 1.0:
        return 1.0
    return v


@njit(cache=True)
def _pairwise_bev_iou(boxes):
    n = boxes.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        out[i, i] = 1.0
        for j in range(i + 1, n):
            v = _bev_iou7(boxes[i], boxes[j])
            out[i, j] = v
            out[j, i] = v
    return out


def bev_corners(box: Box3D) -> BevPolygon:
    """Footprint corners of a box, counter-clockwise."""
    return BevPolygon(_corners_bev(box.cx, box.cy, box.w, box.l, box.yaw))


def convex_intersection_area(a: BevPolygon, b: BevPolygon) -> float:
    """Area of the intersection of two convex polygons; 0.0 when disjoint."""
    return float(_clip_area(a.vertices, b.vertices))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Footprint intersection-over-union, ignoring the vertical axis."""
    return float(_bev_iou7(a.as_array(), b.as_array()))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: BEV intersection times vertical overlap over volume union."""
    return float(_iou3d7(a.as_array(), b.as_array()))


def boxes_to_array(boxes) -> np.ndarray:
    """Stack boxes into an (n, 7) float64 array of (cx, cy, cz, w, l, h, yaw)."""
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


def pairwise_bev_iou(boxes) -> np.ndarray:
    """Symmetric (n, n) BEV IoU matrix with unit diagonal."""
    return _pairwise_bev_iou(boxes_to_array(boxes))


def point_in_box(point, box: Box3D) -> bool:
    """True iff the point lies in the closed box (boundary counts as inside)."""
    px, py, pz = float(point[0]), float(point[1]), float(point[2])
    dx = px - box.cx
    dy = py - box.cy
    dz = pz - box.cz
    c = math.cos(box.yaw)
    s = math.sin(box.yaw)
    x = c * dx + s * dy
    y = -s * dx + c * dy
    return (abs(x) <= 0.5 * box.w) and (abs(y) <= 0.5 * box.l) and (abs(dz) <= 0.5 * box.h)


def points_in_box_mask(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of rows of an (n, >=3) array lying in the closed box."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros(0, dtype=bool)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    dz = pts[:, 2] - box.cz
    c = math.cos(box.yaw)
    s = math.sin(box.yaw)
    x = c * dx + s * dy
    y = -s * dx + c * dy
    return (np.abs(x) <= 0.5 * box.w) & (np.abs(y) <= 0.5 * box.l) & (np.abs(dz) <= 0.5 * box.h)


def points_in_footprint_mask(points: np.ndarray, box: Box3D, margin: float = 0.0) -> np.ndarray:
    """Mask of points whose BEV projection falls in the (optionally enlarged)
    box footprint, at any height."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros(0, dtype=bool)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    c = math.cos(box.yaw)
    s = math.sin(box.yaw)
    x = c * dx + s * dy
    y = -s * dx + c * dy
    return (np.abs(x) <= 0.5 * box.w + margin) & (np.abs(y) <= 0.5 * box.l + margin)


def nms(candidates, iou_thresh: float) -> tuple[list[int], list[list[int]]]:
    """Greedy descending-score NMS over BEV IoU.

    Returns (kept, groups): kept candidate indices in selection order, and
    for each kept box the indices it absorbed (itself first, then every
    candidate it suppressed at IoU > iou_thresh). Ties on score go to the
    lower candidate index. kept-groups partition the input indices.
    """
    n = len(candidates)
    if n == 0:
        return [], []
    for i, b in enumerate(candidates):
        if b.score is None:
            raise ValueError(f"candidate {i} has no score")
    arr = boxes_to_array(candidates)
    order = sorted(range(n), key=lambda i: (-candidates[i].score, i))
    alive = [True] * n
    kept: list[int] = []
    groups: list[list[int]] = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        alive[i] = False
        group = [i]
        for j in order[pos + 1:]:
            if alive[j] and _bev_iou7(arr[i], arr[j]) > iou_thresh:
                alive[j] = False
                group.append(j)
        kept.append(i)
        groups.append(sorted(group))
    return kept, groups
