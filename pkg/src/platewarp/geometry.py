"""Exact 2-D geometry for convex quadrilaterals.

Coordinates are image pixels: x grows right, y grows down.  The canonical
corner order for a quadrilateral is top-left, top-right, bottom-right,
bottom-left, which is clockwise on screen.  With y pointing down, that
order makes every cross product of consecutive edges positive, and all
convexity / inside tests below rely on that sign convention.

Everything here is pure and operates on plain floats / numpy arrays, so
it is safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class SingularAffineError(ValueError):
    """Raised when inverting an affine map whose linear part has zero determinant."""


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


def polygon_area(vertices) -> float:
    """Absolute shoelace area of a polygon given as an (n, 2) vertex array.

    Orientation-independent; degenerate polygons return 0.
    """
    pts = _as_points(vertices)
    if pts.shape[0] < 3:
        return 0.0
    x = pts[:, 0]
    y = pts[:, 1]
    s = np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)
    return abs(s) / 2.0


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


# Relative slack for the inside-of-edge test.  Boundary points count as
# inside; without slack, a vertex a few ulps outside a shared edge forces an
# intersection with a nearly parallel line, and the cancellation there can
# throw the clipped polygon far off.
_CLIP_EPS = 1e-9


def clip_convex(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman intersection of two convex polygons.

    `clip` must be in canonical (screen-clockwise) orientation.  Returns an
    (n, 2) array, possibly empty when the polygons are disjoint.  Boundary
    points (within a tiny relative tolerance) count as inside.
    """
    out = [tuple(p) for p in _as_points(subject)]
    cpoly = [tuple(p) for p in _as_points(clip)]
    for i in range(len(cpoly)):
        c1 = cpoly[i]
        c2 = cpoly[(i + 1) % len(cpoly)]
        edge_len = math.hypot(c2[0] - c1[0], c2[1] - c1[1])
        if edge_len == 0.0 or not out:
            continue

        def inside(p):
            tol = _CLIP_EPS * edge_len * (1.0 + abs(p[0]) + abs(p[1]))
            return _cross(c1, c2, p) >= -tol

        inp = out
        out = []
        s = inp[-1]
        s_in = inside(s)
        for e in inp:
            e_in = inside(e)
            if e_in:
                if not s_in:
                    out.append(_edge_intersection(c1, c2, s, e))
                out.append(e)
            elif s_in:
                out.append(_edge_intersection(c1, c2, s, e))
            s, s_in = e, e_in
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _edge_intersection(c1, c2, s, e):
    dc = (c1[0] - c2[0], c1[1] - c2[1])
    dp = (s[0] - e[0], s[1] - e[1])
    n1 = c1[0] * c2[1] - c1[1] * c2[0]
    n2 = s[0] * e[1] - s[1] * e[0]
    den = dc[0] * dp[1] - dc[1] * dp[0]
    if den == 0.0:  # numerically parallel; endpoints straddle within tolerance
        return e
    return ((n1 * dp[0] - n2 * dc[0]) / den, (n1 * dp[1] - n2 * dc[1]) / den)


@dataclass(frozen=True)
class Quad:
    """Convex quadrilateral with corners in canonical order.

    corners: (4, 2) float64 array ordered TL, TR, BR, BL on screen.
    Construct via `Quad.from_points` to canonicalize arbitrary corner order;
    the plain constructor trusts (but verifies) the given order.
    """

    corners: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.corners)
        if pts.shape[0] != 4:
            raise ValueError("a quad has exactly 4 corners")
        if not _is_convex_cw(pts):
            raise ValueError("quad corners must be convex and in canonical order")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "corners", pts)

    @classmethod
    def from_points(cls, points) -> "Quad":
        """Canonicalize 4 corners in any order: sort by angle around the
        centroid (clockwise on screen), then rotate so the top-left-most
        corner (minimal x + y) comes first."""
        pts = _as_points(points)
        if pts.shape[0] != 4:
            raise ValueError("a quad has exactly 4 corners")
        c = pts.mean(axis=0)
        ang = np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0])
        pts = pts[np.argsort(ang, kind="stable")]
        start = int(np.argmin(pts[:, 0] + pts[:, 1]))
        pts = np.roll(pts, -start, axis=0)
        return cls(pts)

    def area(self) -> float:
        return polygon_area(self.corners)

    def centroid(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    def contains(self, points) -> np.ndarray:
        """Vectorized point-in-quad test; boundary counts as inside.

        points: (..., 2) array.  Returns a boolean array of the leading shape.
        """
        pts = np.asarray(points, dtype=np.float64)
        x = pts[..., 0]
        y = pts[..., 1]
        inside = np.ones(x.shape, dtype=bool)
        q = self.corners
        for i in range(4):
            x1, y1 = q[i]
            x2, y2 = q[(i + 1) % 4]
            inside &= (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1) >= 0.0
        return inside


def _is_convex_cw(pts: np.ndarray) -> bool:
    n = pts.shape[0]
    for i in range(n):
        if _cross(pts[i], pts[(i + 1) % n], pts[(i + 2) % n]) <= 0.0:
            return False
    return True


def is_convex_quad(points) -> bool:
    """True when the 4 points, taken in the given cyclic order, form a
    strictly convex quad (either winding)."""
    pts = _as_points(points)
    if pts.shape[0] != 4:
        return False
    signs = [
        _cross(pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]) for i in range(4)
    ]
    return all(s > 0.0 for s in signs) or all(s < 0.0 for s in signs)


def qiou(a: Quad, b: Quad) -> float:
    """Quadrilateral intersection over union in [0, 1].

    Two zero-area quads give 0 rather than NaN so that degenerate
    annotations cannot poison aggregate metrics.
    """
    area_a = a.area()
    area_b = b.area()
    inter = polygon_area(clip_convex(a.corners, b.corners))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class AffineMap:
    """2x2 linear part plus translation: p -> (a11 x + a12 y + tx, a21 x + a22 y + ty)."""

    a11: float
    a12: float
    a21: float
    a22: float
    tx: float
    ty: float

    def determinant(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def apply(self, points):
        """Apply to a single (x, y) pair or an (..., 2) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        x = pts[..., 0]
        y = pts[..., 1]
        return np.stack(
            [self.a11 * x + self.a12 * y + self.tx, self.a21 * x + self.a22 * y + self.ty],
            axis=-1,
        )

    def compose(self, other: "AffineMap") -> "AffineMap":
        """Map equal to applying `other` first, then self."""
        return AffineMap(
            a11=self.a11 * other.a11 + self.a12 * other.a21,
            a12=self.a11 * other.a12 + self.a12 * other.a22,
            a21=self.a21 * other.a11 + self.a22 * other.a21,
            a22=self.a21 * other.a12 + self.a22 * other.a22,
            tx=self.a11 * other.tx + self.a12 * other.ty + self.tx,
            ty=self.a21 * other.tx + self.a22 * other.ty + self.ty,
        )

    def invert(self) -> "AffineMap":
        det = self.determinant()
        if det == 0.0 or not math.isfinite(det):
            raise SingularAffineError(f"affine map is singular (det={det})")
        i11 = self.a22 / det
        i12 = -self.a12 / det
        i21 = -self.a21 / det
        i22 = self.a11 / det
        return AffineMap(
            a11=i11,
            a12=i12,
            a21=i21,
            a22=i22,
            tx=-(i11 * self.tx + i12 * self.ty),
            ty=-(i21 * self.tx + i22 * self.ty),
        )

    @staticmethod
    def identity() -> "AffineMap":
        return AffineMap(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)


def fit_affine(src, dst) -> AffineMap:
    """Least-squares affine map sending src points to dst points.

    src, dst: (n, 2) arrays with n >= 3.  Solved via normal equations on the
    6 unknowns; raises SingularAffineError when the source points are
    collinear (rank-deficient system).
    """
    s = _as_points(src)
    d = _as_points(dst)
    if s.shape != d.shape or s.shape[0] < 3:
        raise ValueError("need matching (n, 2) arrays with n >= 3")
    n = s.shape[0]
    basis = np.column_stack([s[:, 0], s[:, 1], np.ones(n)])
    gram = basis.T @ basis
    if abs(np.linalg.det(gram)) < 1e-12:
        raise SingularAffineError("source points are collinear; affine fit is degenerate")
    sol = np.linalg.solve(gram, basis.T @ d)  # (3, 2): rows are x-coef, y-coef, const
    return AffineMap(
        a11=float(sol[0, 0]),
        a12=float(sol[1, 0]),
        a21=float(sol[0, 1]),
        a22=float(sol[1, 1]),
        tx=float(sol[2, 0]),
        ty=float(sol[2, 1]),
    )


def nms(detections, overlap_threshold: float):
    """Greedy non-maximum suppression on (Quad, confidence) pairs.

    Keeps detections in descending confidence order; a candidate is dropped
    iff its qIoU with an already-kept quad exceeds `overlap_threshold`.
    Ties in confidence break by input order, so the result is deterministic.
    """
    if not 0.0 <= overlap_threshold <= 1.0:
        raise ValueError("overlap_threshold must be in [0, 1]")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    kept = []
    for i in order:
        quad, conf = detections[i]
        if all(qiou(quad, k[0]) <= overlap_threshold for k in kept):
            kept.append((quad, conf))
    return kept
