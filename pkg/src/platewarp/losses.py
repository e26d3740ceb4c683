"""From feature grid to geometry: targets, losses, detections, rectification.

Per output cell (m, n) the six affine channels v3..v8 define a local map
    T(q) = [[max(v3,0), v4], [v5, max(v6,0)]] q + (v7, v8)
from the canonical unit square to normalized coordinates.  Annotation
corners p are brought into the same frame by
    A(p) = ((p / stride) - (n, m)) / alpha
so the location loss is the squared corner error between T(q_i) and A(p_i),
summed over the four corners.  Confidence is a two-class logloss over the
softmax of channels 0-1, and the total loss is the plain sum over all cells
(and over the batch), with the location term gated by the per-cell object
indicator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor

STRIDE = 16
ALPHA = 7.75
PROB_CLAMP = 1e-12

# corners of the canonical square, in quad corner order (TL, TR, BR, BL
# with y growing downward)
CANONICAL_SQUARE = np.array(
    [[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]], dtype=np.float64
)


def decode_affine(v) -> geo.AffineMap:
    """Six channel values v3..v8 -> local affine map with clamped diagonal."""
    v3, v4, v5, v6, v7, v8 = (float(x) for x in v)
    return geo.AffineMap(
        a11=max(v3, 0.0), a12=v4, a21=v5, a22=max(v6, 0.0), tx=v7, ty=v8
    )


def normalize_points(points, m: int, n: int, stride: int = STRIDE, alpha: float = ALPHA):
    """Image pixels -> cell-relative units: ((p / stride) - (n, m)) / alpha."""
    pts = np.asarray(points, dtype=np.float64)
    return (pts / stride - np.array([n, m], dtype=np.float64)) / alpha


def denormalize_points(points, m: int, n: int, stride: int = STRIDE, alpha: float = ALPHA):
    """Exact inverse of normalize_points: p = stride * (alpha * u + (n, m))."""
    pts = np.asarray(points, dtype=np.float64)
    return stride * (alpha * pts + np.array([n, m], dtype=np.float64))


@dataclass(frozen=True)
class CellTarget:
    m: int
    n: int
    iobj: int
    normalized_corners: np.ndarray | None = None  # (4, 2), only when iobj == 1


@dataclass
class TargetGrid:
    """Per-cell training targets for one image.

    iobj: (M, N) 0/1 indicator; corners: (M, N, 4, 2) normalized corner
    coordinates, zero-filled at negative cells.
    """

    iobj: np.ndarray
    corners: np.ndarray

    @property
    def positive_count(self) -> int:
        return int(self.iobj.sum())

    def cell(self, m: int, n: int) -> CellTarget:
        if self.iobj[m, n] > 0:
            return CellTarget(m, n, 1, self.corners[m, n].copy())
        return CellTarget(m, n, 0)


def build_target_grid(
    quads, height: int, width: int, stride: int = STRIDE, alpha: float = ALPHA
) -> TargetGrid:
    """Assign cells to annotation quads and normalize their corners.

    A cell is positive iff its center pixel (stride*n + stride/2,
    stride*m + stride/2) lies inside some quad; when several quads claim a
    cell the one with the nearest centroid wins.
    """
    rows, cols = height // stride, width // stride
    iobj = np.zeros((rows, cols), dtype=np.float64)
    corners = np.zeros((rows, cols, 4, 2), dtype=np.float64)
    if not quads:
        return TargetGrid(iobj, corners)

    xs = stride * np.arange(cols) + stride / 2.0
    ys = stride * np.arange(rows) + stride / 2.0
    centers = np.stack(np.meshgrid(xs, ys), axis=-1)  # (rows, cols, 2) as (x, y)

    best_dist = np.full((rows, cols), np.inf)
    owner = np.full((rows, cols), -1, dtype=int)
    for qi, quad in enumerate(quads):
        inside = quad.contains(centers)
        c = quad.centroid()
        dist = ((centers - c) ** 2).sum(axis=-1)
        take = inside & (dist < best_dist)
        best_dist[take] = dist[take]
        owner[take] = qi

    for m in range(rows):
        for n in range(cols):
            qi = owner[m, n]
            if qi >= 0:
                iobj[m, n] = 1.0
                corners[m, n] = normalize_points(quads[qi].corners, m, n, stride, alpha)
    return TargetGrid(iobj, corners)


def location_loss(v, target: CellTarget) -> float:
    """Sum over the four canonical corners of squared 2-D error."""
    if target.iobj != 1:
        raise ValueError("location_loss is only defined for positive cells")
    warped = decode_affine(v).apply(CANONICAL_SQUARE)
    return float(((warped - target.normalized_corners) ** 2).sum())


def confidence_loss(v1: float, v2: float, iobj: int) -> float:
    """Two-term logloss over the softmax of the (object, non-object) logits."""
    z = np.array([v1, v2], dtype=np.float64)
    e = np.exp(z - z.max())
    p = np.clip(e / e.sum(), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-iobj * np.log(p[0]) - (1 - iobj) * np.log(p[1]))


@dataclass
class LossBreakdown:
    location: float
    confidence: float
    total: float
    positive_cell_count: int
    tensor: Tensor = field(repr=False)


def total_loss(grid: Tensor, targets) -> LossBreakdown:
    """Differentiable sum of location and confidence losses over all cells.

    grid: B x M x N x 8 tensor; targets: one TargetGrid per batch image.
    The location term contributes only at positive cells.
    """
    b, rows, cols, ch = grid.data.shape
    if ch != 8 or len(targets) != b:
        raise ad.ShapeError("grid/targets mismatch")
    for t in targets:
        if t.iobj.shape != (rows, cols):
            raise ad.ShapeError("target grid shape mismatch")

    iobj = np.stack([t.iobj for t in targets])  # (B, M, N)
    tgt = np.stack([t.corners for t in targets])  # (B, M, N, 4, 2)
    tgt_x = tgt[..., 0]
    tgt_y = tgt[..., 1]
    qx = CANONICAL_SQUARE[:, 0]
    qy = CANONICAL_SQUARE[:, 1]

    v3 = ad.channel_slice(grid, 2, 3)
    v4 = ad.channel_slice(grid, 3, 4)
    v5 = ad.channel_slice(grid, 4, 5)
    v6 = ad.channel_slice(grid, 5, 6)
    v7 = ad.channel_slice(grid, 6, 7)
    v8 = ad.channel_slice(grid, 7, 8)

    # (B, M, N, 1) channels broadcast against the 4 canonical corners
    pred_x = ad.add(ad.add(ad.mul(ad.relu(v3), qx), ad.mul(v4, qy)), v7)
    pred_y = ad.add(ad.add(ad.mul(v5, qx), ad.mul(ad.relu(v6), qy)), v8)
    dx = ad.sub(pred_x, tgt_x)
    dy = ad.sub(pred_y, tgt_y)
    per_cell = ad.tsum(ad.add(ad.mul(dx, dx), ad.mul(dy, dy)), axis=-1)  # (B, M, N)
    loc = ad.tsum(ad.mul(per_cell, iobj))

    logits = ad.channel_slice(grid, 0, 2)
    probs = ad.clip(ad.softmax_pair(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    onehot = np.stack([iobj, 1.0 - iobj], axis=-1)  # (B, M, N, 2)
    conf = ad.mul(ad.tsum(ad.mul(ad.log(probs), onehot)), -1.0)

    total = ad.add(loc, conf)
    return LossBreakdown(
        location=float(loc.data),
        confidence=float(conf.data),
        total=float(total.data),
        positive_cell_count=int(iobj.sum()),
        tensor=total,
    )


@dataclass(frozen=True)
class Detection:
    quad: geo.Quad
    confidence: float
    source_cell: tuple[int, int]


def grid_probabilities(grid_values: np.ndarray) -> np.ndarray:
    """Object probability per cell from the two logit channels."""
    z = grid_values[..., 0:2]
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e[..., 0] / e.sum(axis=-1)


def decode_detections(
    grid_values: np.ndarray,
    threshold: float,
    nms_threshold: float,
    stride: int = STRIDE,
    alpha: float = ALPHA,
) -> list[Detection]:
    """Cells above the probability threshold -> image-space quads, then NMS.

    grid_values: (M, N, 8) array for a single image.  Degenerate decodes
    (zero-area or non-convex quads) are dropped.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    probs = grid_probabilities(grid_values)
    rows, cols = probs.shape
    candidates: list[Detection] = []
    for m in range(rows):
        for n in range(cols):
            p = probs[m, n]
            if p <= threshold:
                continue
            amap = decode_affine(grid_values[m, n, 2:8])
            pts = denormalize_points(amap.apply(CANONICAL_SQUARE), m, n, stride, alpha)
            if not np.all(np.isfinite(pts)):
                continue
            try:
                quad = geo.Quad.from_points(pts)
            except ValueError:
                continue
            candidates.append(Detection(quad, float(p), (m, n)))

    candidates.sort(key=lambda d: (-d.confidence, d.source_cell))
    kept: list[Detection] = []
    for det in candidates:
        if all(geo.qiou(det.quad, k.quad) <= nms_threshold for k in kept):
            kept.append(det)
    return kept


def bilinear_sample(image: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample an H x W x C image at (x, y) positions with clamp-to-edge.

    Pixel (i, j) sits at coordinate (x=j, y=i).  points: (..., 2); returns
    an array of shape points.shape[:-1] + (C,).
    """
    h, w = image.shape[:2]
    x = np.clip(points[..., 0], 0.0, w - 1.0)
    y = np.clip(points[..., 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = image[y0, x0] * (1.0 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1.0 - fx) + image[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def rectify_plate(image: np.ndarray, quad: geo.Quad, out_w: int, out_h: int) -> np.ndarray:
    """Warp the quad region to a frontal out_h x out_w x 3 crop.

    The affine is fitted by least squares from the corner pixel centers of
    the output, (0,0), (out_w-1,0), (out_w-1,out_h-1), (0,out_h-1), to the
    quad corners, then every output pixel is inverse-mapped and sampled
    bilinearly.  The corner-pixel convention makes the warp an exact
    identity when the quad already is that axis-aligned rectangle, and a
    rotation of the corner order rotates the output exactly.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError("output dims must be >= 1")
    rect = np.array(
        [[0.0, 0.0], [out_w - 1.0, 0.0], [out_w - 1.0, out_h - 1.0], [0.0, out_h - 1.0]],
        dtype=np.float64,
    )
    amap = geo.fit_affine(rect, quad.corners)
    if abs(amap.determinant()) < 1e-12:
        raise geo.SingularAffineError("quad is degenerate; rectification undefined")
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    pts = np.stack([xs, ys], axis=-1).astype(np.float64)
    return bilinear_sample(image, amap.apply(pts))
