"""Point-cloud and box geometry primitives.

Voxel-grid downsampling, exact nearest-neighbour point matching, yaw-only
oriented bounding boxes, box IoU via 2-D polygon clipping, and voxelized
point-set IoU. Everything here is pure and deterministic: ties are broken
by the lowest input index so repeated runs (and parallel callers) always
agree.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from shapely.geometry import Polygon

from .errors import InputFormatError, MetricDomainError
from .validation import as_points_array, check_positive

# Marker for ground-truth points without a predicted partner.
MISSING = -1

# Evaluation grid, metres. Also the minimum side length of a fitted box.
DEFAULT_RESOLUTION = 0.05
MIN_BOX_EXTENT = 0.05

# Voxel coordinates are packed into a single int64; 2**20 voxels per axis
# (~52 km at 0.05 m) is far beyond any indoor scene.
_MAX_VOXELS_PER_AXIS = 1 << 20


# ---------------------------------------------------------------------------
# voxel grid


def voxel_keys(points: np.ndarray, resolution: float, origin=None) -> np.ndarray:
    """Pack per-axis voxel indices floor(coord / resolution) into one int64.

    ``origin`` fixes the integer offset so that key sets computed for
    different clouds are comparable; it defaults to the cloud's own minimum.
    """
    points = as_points_array(points)
    check_positive(resolution, "resolution")
    if len(points) == 0:
        return np.empty(0, dtype=np.int64)
    cells = np.floor(points / resolution).astype(np.int64)
    base = np.min(cells, axis=0) if origin is None else np.asarray(origin, dtype=np.int64)
    cells = cells - base
    if cells.max(initial=0) >= _MAX_VOXELS_PER_AXIS or cells.min(initial=0) < 0:
        raise InputFormatError("scene extent exceeds the voxel-grid index budget")
    return (cells[:, 0] << 40) | (cells[:, 1] << 20) | cells[:, 2]


def voxel_downsample(points, attributes=None, resolution: float = DEFAULT_RESOLUTION):
    """One representative point per occupied voxel.

    The representative is the member closest to the centroid of the voxel's
    members (ties: lowest input index). Attributes -- a single per-point
    array or a tuple of them -- are carried over from the representative,
    so payloads stay authentic rather than averaged. Output order follows
    ascending representative input index, which makes the operation
    idempotent at a fixed resolution.
    """
    points = as_points_array(points)
    check_positive(resolution, "resolution")
    reps = _representative_indices(points, resolution)
    out_points = points[reps]
    if attributes is None:
        return out_points, None
    if isinstance(attributes, (tuple, list)):
        return out_points, tuple(np.asarray(a)[reps] for a in attributes)
    return out_points, np.asarray(attributes)[reps]


def _representative_indices(points: np.ndarray, resolution: float) -> np.ndarray:
    if len(points) == 0:
        return np.empty(0, dtype=np.int64)
    keys = voxel_keys(points, resolution)
    _, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sums = np.zeros((len(counts), 3), dtype=np.float64)
    np.add.at(sums, inverse, points)
    centroids = sums / counts[:, None]
    d2 = ((points - centroids[inverse]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(points)), d2, inverse))
    _, first = np.unique(inverse[order], return_index=True)
    reps = order[first]
    reps.sort()
    return reps


# ---------------------------------------------------------------------------
# point matching


@dataclass
class PointMatching:
    """Per ground-truth point, the index of its matched predicted point.

    ``indices[i] == MISSING`` marks a ground-truth point with no predicted
    point within ``max_distance``.
    """

    indices: np.ndarray
    max_distance: float

    @property
    def matched_mask(self) -> np.ndarray:
        return self.indices != MISSING

    @property
    def n_matched(self) -> int:
        return int(self.matched_mask.sum())


def match_points(gt, pred, max_distance: float) -> PointMatching:
    """Match each ground-truth point to its nearest predicted point.

    Exact nearest neighbour within ``max_distance`` (inclusive); equal
    distances resolve to the lowest predicted index. A k-d tree accelerates
    the search but the result is defined by (distance, index) lexicographic
    minimisation in float64, identical to a brute-force scan.
    """
    gt = as_points_array(gt, "gt")
    pred = as_points_array(pred, "pred")
    check_positive(max_distance, "max_distance")
    out = np.full(len(gt), MISSING, dtype=np.int64)
    if len(gt) == 0 or len(pred) == 0:
        return PointMatching(out, max_distance)

    tree = cKDTree(pred)
    k = min(2, len(pred))
    dist, idx = tree.query(gt, k=k)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    matched = dist[:, 0] <= max_distance
    out[matched] = idx[matched, 0]

    if k == 2:
        ambiguous = matched & (dist[:, 0] == dist[:, 1])
        for i in np.flatnonzero(ambiguous):
            candidates = tree.query_ball_point(gt[i], r=dist[i, 0])
            d2 = ((pred[candidates] - gt[i]) ** 2).sum(axis=1)
            best = d2.min()
            out[i] = min(c for c, d in zip(candidates, d2) if d == best)
    return PointMatching(out, max_distance)


# ---------------------------------------------------------------------------
# oriented boxes


@dataclass
class OrientedBox:
    """Axis-up box: centre, positive half extents, yaw about +z in radians."""

    center: np.ndarray
    half_extents: np.ndarray
    yaw: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)
        if not (self.half_extents > 0).all():
            raise InputFormatError("half_extents must be strictly positive")
        if not (-math.pi / 2 <= self.yaw < math.pi / 2):
            raise InputFormatError("yaw must lie in [-pi/2, pi/2)")

    @property
    def volume(self) -> float:
        return float(8.0 * self.half_extents.prod())

    def footprint(self) -> Polygon:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        ex, ey = self.half_extents[0], self.half_extents[1]
        local = np.array([[-ex, -ey], [ex, -ey], [ex, ey], [-ex, ey]])
        rot = np.array([[c, -s], [s, c]])
        return Polygon(local @ rot.T + self.center[:2])

    def z_interval(self) -> tuple[float, float]:
        return (self.center[2] - self.half_extents[2], self.center[2] + self.half_extents[2])

    def contains(self, points, atol: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the box (with optional slack)."""
        points = as_points_array(points)
        local = points - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * local[:, 0] + s * local[:, 1]
        y = -s * local[:, 0] + c * local[:, 1]
        z = local[:, 2]
        bounds = self.half_extents + atol
        return (np.abs(x) <= bounds[0]) & (np.abs(y) <= bounds[1]) & (np.abs(z) <= bounds[2])


def _normalize_yaw(theta: float) -> float:
    """Map an angle to the canonical box range [-pi/2, pi/2) (mod pi)."""
    theta = math.fmod(theta + math.pi / 2, math.pi)
    if theta < 0:
        theta += math.pi
    return theta - math.pi / 2


def _convex_hull_2d(xy: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain. Returns hull vertices in CCW order.

    Degenerate inputs (all points collinear or coincident) return the two
    extreme points, or a single point.
    """
    pts = np.unique(xy, axis=0)
    if len(pts) <= 2:
        return pts
    # pts is sorted lexicographically by np.unique
    def half(iterable):
        chain: list[np.ndarray] = []
        for p in iterable:
            while len(chain) >= 2:
                o, a = chain[-2], chain[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) > 0:
                    break
                chain.pop()
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:  # collinear input collapses to a segment
        return np.array([pts[0], pts[-1]])
    return hull


def _axis_aligned_box(points: np.ndarray) -> OrientedBox:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    half = np.maximum((hi - lo) / 2.0, MIN_BOX_EXTENT / 2.0)
    return OrientedBox((lo + hi) / 2.0, half, 0.0)


def fit_oriented_box(points) -> OrientedBox:
    """Fit a yaw-only bounding box around a point set.

    Yaw comes from the minimum-area enclosing rectangle of the horizontal
    convex hull (rotating calipers), which recovers the orientation even
    for square footprints; extents are the min/max of the points in the
    yawed frame, the vertical extent is the raw z range. Degenerate extents
    are clamped to one voxel (0.05 m full side). Fewer than 4 points falls
    back to an axis-aligned box with a warning.
    """
    points = as_points_array(points)
    if len(points) == 0:
        raise MetricDomainError("cannot fit a box around an empty point set")
    if len(points) < 4:
        warnings.warn("fitting a box to fewer than 4 points: axis-aligned fallback", stacklevel=2)
        return _axis_aligned_box(points)

    hull = _convex_hull_2d(points[:, :2])
    if len(hull) < 2:
        yaw = 0.0
    elif len(hull) == 2:
        d = hull[1] - hull[0]
        yaw = _normalize_yaw(math.atan2(d[1], d[0]))
    else:
        best = None
        for i in range(len(hull)):
            edge = hull[(i + 1) % len(hull)] - hull[i]
            theta = _normalize_yaw(math.atan2(edge[1], edge[0]))
            c, s = math.cos(theta), math.sin(theta)
            u = c * hull[:, 0] + s * hull[:, 1]
            v = -s * hull[:, 0] + c * hull[:, 1]
            area = (u.max() - u.min()) * (v.max() - v.min())
            key = (area, theta)
            if best is None or key < best[0]:
                best = (key, theta)
        yaw = best[1]

    c, s = math.cos(yaw), math.sin(yaw)
    u = c * points[:, 0] + s * points[:, 1]
    v = -s * points[:, 0] + c * points[:, 1]
    z = points[:, 2]
    mid_u = (u.min() + u.max()) / 2.0
    mid_v = (v.min() + v.max()) / 2.0
    center = np.array(
        [c * mid_u - s * mid_v, s * mid_u + c * mid_v, (z.min() + z.max()) / 2.0]
    )
    half = np.array(
        [(u.max() - u.min()) / 2.0, (v.max() - v.min()) / 2.0, (z.max() - z.min()) / 2.0]
    )
    half = np.maximum(half, MIN_BOX_EXTENT / 2.0)
    return OrientedBox(center, half, yaw)


def box_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Volume IoU of two yaw-only boxes.

    Intersection = clipped footprint area x vertical interval overlap.
    """
    za = a.z_interval()
    zb = b.z_interval()
    dz = min(za[1], zb[1]) - max(za[0], zb[0])
    if dz <= 0.0:
        return 0.0
    inter_area = a.footprint().intersection(b.footprint()).area
    if inter_area <= 0.0:
        return 0.0
    inter = inter_area * dz
    union = a.volume + b.volume - inter
    return inter / union


# ---------------------------------------------------------------------------
# point-set IoU


def pointset_iou(a, b, resolution: float = DEFAULT_RESOLUTION) -> float:
    """IoU of the voxel sets occupied by two point clouds.

    Both clouds are voxelized on a shared grid at ``resolution``; returns
    |A n B| / |A u B|. Two empty clouds give 0.0 by convention.
    """
    a = as_points_array(a, "a")
    b = as_points_array(b, "b")
    check_positive(resolution, "resolution")
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return 0.0
    both = np.vstack([a, b])
    origin = np.floor(both / resolution).astype(np.int64).min(axis=0)
    ka = np.unique(voxel_keys(a, resolution, origin=origin))
    kb = np.unique(voxel_keys(b, resolution, origin=origin))
    inter = np.intersect1d(ka, kb, assume_unique=True).size
    union = ka.size + kb.size - inter
    return inter / union
