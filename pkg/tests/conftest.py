import numpy as np
import pytest

from platewarp import geometry as geo


def sort_by_angle(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    ang = np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0])
    return pts[np.argsort(ang)]


def random_convex_quad(rng, lo=0.0, hi=100.0, min_area=0.0) -> geo.Quad:
    """Rejection-sample 4 uniform points until they are in convex position."""
    while True:
        pts = rng.uniform(lo, hi, size=(4, 2))
        if not geo.is_convex_quad(sort_by_angle(pts)):
            continue
        quad = geo.Quad.from_points(pts)
        if quad.area() >= min_area:
            return quad


def raster_qiou(qa: np.ndarray, qb: np.ndarray, res: int = 1024) -> float:
    """Brute-force qIoU: point-in-quad hits on a res x res grid spanning the
    joint bounding box.  Boundary points count as inside, matching the
    clipping convention."""
    pts = np.vstack([qa, qb])
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    xs = np.linspace(x0, x1, res)
    ys = np.linspace(y0, y1, res)

    def inside(q):
        acc = np.ones((res, res), dtype=bool)
        for i in range(4):
            ax, ay = q[i]
            bx, by = q[(i + 1) % 4]
            # cross((b - a), (p - a)) >= 0 expanded into separable terms
            ca = -(by - ay)
            cb = bx - ax
            cc = -(bx - ax) * ay + (by - ay) * ax
            acc &= (ca * xs)[None, :] + (cb * ys)[:, None] + cc >= 0
        return acc

    in_a = inside(qa)
    in_b = inside(qb)
    na = int(in_a.sum())
    nb = int(in_b.sum())
    ni = int((in_a & in_b).sum())
    union = na + nb - ni
    return ni / union if union else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(20240803)
