"""Data plumbing: netpbm image I/O, 4-corner annotations, synthetic scenes,
per-batch augmentation and batching.

Images are float64 H x W x 3 arrays in [0, 1].  Annotation files are UTF-8
text, one record per line:

    <image_path> <x1> <y1> <x2> <y2> <x3> <y3> <x4> <y4>

with `#` starting a comment line; corners may be listed in any order and
are canonicalized on parse.  Only binary PPM (P6) and PGM (P5) images with
maxval 255 are supported; grayscale reads replicate to 3 channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import losses
from .geometry import AffineMap, Quad


class ImageFormatError(ValueError):
    pass


class AnnotationError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    quads: list[Quad]
    id: str


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] not in (b"P6", b"P5"):
        raise ImageFormatError(
            f"{path}: unsupported format {raw[:2]!r} (binary P6/P5 only)"
        )
    magic = raw[:2]
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise ImageFormatError(f"{path}: truncated header")
        ch = raw[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            try:
                fields.append(int(raw[start:pos]))
            except ValueError:
                raise ImageFormatError(f"{path}: non-numeric header field") from None
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval must be 255, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = raw[pos : pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    img = arr.astype(np.float64) / 255.0
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"write_image expects H x W x 3, got {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(image).tobytes())


def write_image_gray(path, image: np.ndarray) -> None:
    if image.ndim != 2:
        raise ImageFormatError(f"write_image_gray expects H x W, got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(image).tobytes())


def parse_annotations(path) -> list[tuple[str, list[Quad]]]:
    """Parse an annotation file into (image_path, quads) records.

    Multiple lines per image aggregate; concave or degenerate quads are
    rejected with the offending line number.
    """
    order: list[str] = []
    grouped: dict[str, list[Quad]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise AnnotationError(
                    f"{path}:{lineno}: expected <path> plus 8 coordinates, got {len(parts)} fields"
                )
            try:
                coords = [float(x) for x in parts[1:]]
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: non-numeric coordinate") from None
            pts = np.array(coords, dtype=np.float64).reshape(4, 2)
            try:
                quad = Quad.from_points(pts)
            except ValueError as exc:
                raise AnnotationError(f"{path}:{lineno}: invalid quad ({exc})") from None
            img_path = parts[0]
            if img_path not in grouped:
                grouped[img_path] = []
                order.append(img_path)
            grouped[img_path].append(quad)
    return [(p, grouped[p]) for p in order]


def write_annotations(path, records) -> None:
    """Inverse of parse_annotations for canonicalized data."""
    with open(path, "w", encoding="utf-8") as fh:
        for img_path, quads in records:
            for q in quads:
                coords = " ".join(format(v, ".17g") for v in q.corners.reshape(-1))
                fh.write(f"{img_path} {coords}\n")


@dataclass(frozen=True)
class SynthConfig:
    image_height: int = 128
    image_width: int = 128
    plates_min: int = 1
    plates_max: int = 1
    plate_width: tuple[float, float] = (40.0, 160.0)
    plate_aspect: tuple[float, float] = (2.0, 5.0)
    rotation_max_deg: float = 30.0
    shear_max: float = 0.3
    noise_amplitude: float = 0.02
    min_side_px: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.plates_min <= self.plates_max <= 2:
            raise ValueError("plates_per_image must lie in 0..2")
        if self.plate_width[0] > self.plate_width[1] or self.plate_width[0] <= 0:
            raise ValueError("plate_width range must be well-ordered and positive")
        if self.plate_aspect[0] > self.plate_aspect[1] or self.plate_aspect[0] <= 0:
            raise ValueError("plate_aspect range must be well-ordered and positive")


def _smooth_background(rng, h: int, w: int) -> np.ndarray:
    corners = rng.uniform(0.05, 0.45, size=(2, 2, 3))
    ys = np.linspace(0.0, 1.0, h)[:, None, None]
    xs = np.linspace(0.0, 1.0, w)[None, :, None]
    top = corners[0, 0] * (1 - xs) + corners[0, 1] * xs
    bot = corners[1, 0] * (1 - xs) + corners[1, 1] * xs
    return top * (1 - ys) + bot * ys


def _plate_pattern(rng, pw: float, ph: float):
    """Return a function evaluating the frontal plate colors at (u, v).

    White body, dark border frame, a dark strip along the top and a handful
    of dark vertical bars below it.  Hard edges give the Sobel branch strong
    signal, and the vertical asymmetry plus irregular bar placement give
    every output cell inside the plate a distinguishable local appearance.
    """
    body = rng.uniform(0.85, 1.0)
    ink = rng.uniform(0.0, 0.15)
    strip = rng.uniform(0.25, 0.45)
    border = max(1.5, 0.08 * ph)
    strip_h = border + 0.22 * ph
    n_bars = int(rng.integers(3, 7))
    slots = np.sort(rng.uniform(0.12, 0.88, size=n_bars)) * pw
    bar_w = rng.uniform(0.04, 0.08) * pw

    def colors(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        val = np.full(u.shape, body)
        val[(v >= border) & (v < strip_h)] = strip
        in_border = (
            (u < border) | (u > pw - border) | (v < border) | (v > ph - border)
        )
        in_bar = np.zeros(u.shape, dtype=bool)
        pad = border + 1.0
        for s in slots:
            in_bar |= (np.abs(u - s) < bar_w / 2) & (v > strip_h) & (v < ph - pad)
        val[in_border | in_bar] = ink
        return np.repeat(val[..., None], 3, axis=-1)

    return colors


def synth_scene(cfg: SynthConfig, rng_seed) -> Sample:
    """Deterministic synthetic scene: smooth background, warped bar plates.

    Ground-truth quads are the exact warped corners of each plate rectangle.
    """
    rng = np.random.default_rng(rng_seed)
    h, w = cfg.image_height, cfg.image_width
    image = _smooth_background(rng, h, w)
    image += rng.normal(0.0, cfg.noise_amplitude, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    n_plates = int(rng.integers(cfg.plates_min, cfg.plates_max + 1))
    quads: list[Quad] = []
    for _ in range(n_plates):
        placed = _place_plate(rng, cfg, image, quads)
        if placed is not None:
            quads.append(placed)
    return Sample(image=image, quads=quads, id=f"synth-{rng_seed}")


def _plate_to_scene_map(rng, cfg: SynthConfig, pw: float, ph: float, cx: float, cy: float):
    theta = math.radians(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
    shear = rng.uniform(-cfg.shear_max, cfg.shear_max)
    rot = AffineMap(math.cos(theta), -math.sin(theta), math.sin(theta), math.cos(theta), 0, 0)
    sh = AffineMap(1.0, shear, 0.0, 1.0, 0.0, 0.0)
    center = AffineMap(1.0, 0.0, 0.0, 1.0, -pw / 2.0, -ph / 2.0)
    place = AffineMap(1.0, 0.0, 0.0, 1.0, cx, cy)
    return place.compose(rot.compose(sh.compose(center)))


def _place_plate(rng, cfg: SynthConfig, image: np.ndarray, existing: list[Quad]):
    h, w = image.shape[:2]
    pw = rng.uniform(*cfg.plate_width)
    aspect = rng.uniform(*cfg.plate_aspect)
    ph = max(cfg.min_side_px, pw / aspect)
    rect = np.array([[0.0, 0.0], [pw, 0.0], [pw, ph], [0.0, ph]])
    for attempt in range(40):
        if attempt and attempt % 10 == 0:
            pw *= 0.8
            ph = max(cfg.min_side_px, ph * 0.8)
            rect = np.array([[0.0, 0.0], [pw, 0.0], [pw, ph], [0.0, ph]])
        cx = rng.uniform(0.0, w)
        cy = rng.uniform(0.0, h)
        amap = _plate_to_scene_map(rng, cfg, pw, ph, cx, cy)
        pts = amap.apply(rect)
        if pts[:, 0].min() < 2 or pts[:, 0].max() > w - 3:
            continue
        if pts[:, 1].min() < 2 or pts[:, 1].max() > h - 3:
            continue
        sides = np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1)
        if sides.min() < cfg.min_side_px:
            continue
        try:
            quad = Quad.from_points(pts)
        except ValueError:
            continue
        if any(geo.qiou(quad, q) > 0.0 for q in existing):
            continue
        _render_plate(rng, image, amap, pw, ph, pts)
        return quad
    return None


def _render_plate(rng, image, amap: AffineMap, pw: float, ph: float, pts: np.ndarray):
    h, w = image.shape[:2]
    pattern = _plate_pattern(rng, pw, ph)
    inv = amap.invert()
    x0 = max(0, int(math.floor(pts[:, 0].min())))
    x1 = min(w - 1, int(math.ceil(pts[:, 0].max())))
    y0 = max(0, int(math.floor(pts[:, 1].min())))
    y1 = min(h - 1, int(math.ceil(pts[:, 1].max())))
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    grid = np.stack([xs, ys], axis=-1).astype(np.float64)
    plate_coords = inv.apply(grid)
    u = plate_coords[..., 0]
    v = plate_coords[..., 1]
    inside = (u >= 0) & (u <= pw) & (v >= 0) & (v <= ph)
    colors = pattern(u, v)
    # mild grain so no two plate pixels are exactly equal; constant regions
    # would otherwise produce max-pool ties, which are non-differentiable
    colors = colors + rng.normal(0.0, 0.008, size=colors.shape)
    region = image[y0 : y1 + 1, x0 : x1 + 1]
    region[inside] = np.clip(colors[inside], 0.0, 1.0)


@dataclass(frozen=True)
class AugmentConfig:
    enable_rectification: bool = True
    rectification_prob: float = 0.1
    enable_aspect: bool = True
    aspect_range: tuple[float, float] = (0.9, 1.1)
    enable_centering: bool = True
    centering_prob: float = 0.3
    enable_scale: bool = True
    scale_range: tuple[float, float] = (0.75, 1.25)
    enable_rotation: bool = True
    rotation_deg: float = 20.0
    enable_mirror: bool = True
    mirror_prob: float = 0.5
    enable_translate: bool = True
    translate_frac: float = 0.15
    enable_crop: bool = True
    crop_frac: float = 0.1
    enable_colorspace: bool = True
    color_gain: tuple[float, float] = (0.8, 1.2)
    color_bias: tuple[float, float] = (-0.1, 0.1)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(
            enable_rectification=False,
            enable_aspect=False,
            enable_centering=False,
            enable_scale=False,
            enable_rotation=False,
            enable_mirror=False,
            enable_translate=False,
            enable_crop=False,
            enable_colorspace=False,
        )


def _about_center(w: float, h: float, linear: AffineMap) -> AffineMap:
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    pre = AffineMap(1, 0, 0, 1, -cx, -cy)
    post = AffineMap(1, 0, 0, 1, cx, cy)
    return post.compose(linear.compose(pre))


def _geometric_map(sample: Sample, cfg: AugmentConfig, rng) -> AffineMap | None:
    """Compose the enabled geometric transforms in their fixed order.

    Returns None when no transform fires, so callers can skip resampling.
    """
    h, w = sample.image.shape[:2]
    steps: list[AffineMap] = []

    if cfg.enable_rectification and sample.quads and rng.random() < cfg.rectification_prob:
        quad = sample.quads[int(rng.integers(len(sample.quads)))]
        c = quad.centroid()
        area = quad.area()
        sides = np.linalg.norm(quad.corners - np.roll(quad.corners, -1, axis=0), axis=1)
        aspect = max(1.2, (sides[0] + sides[2]) / max(1e-6, sides[1] + sides[3]))
        rw = math.sqrt(area * aspect)
        rh = area / rw
        rect = np.array(
            [
                [c[0] - rw / 2, c[1] - rh / 2],
                [c[0] + rw / 2, c[1] - rh / 2],
                [c[0] + rw / 2, c[1] + rh / 2],
                [c[0] - rw / 2, c[1] + rh / 2],
            ]
        )
        t = rng.uniform(0.6, 1.0)
        dst = quad.corners + t * (rect - quad.corners)
        steps.append(geo.fit_affine(quad.corners, dst))

    if cfg.enable_aspect:
        r = rng.uniform(*cfg.aspect_range)
        steps.append(_about_center(w, h, AffineMap(r, 0, 0, 1, 0, 0)))

    if cfg.enable_centering and sample.quads and rng.random() < cfg.centering_prob:
        quad = sample.quads[int(rng.integers(len(sample.quads)))]
        c = quad.centroid()
        steps.append(AffineMap(1, 0, 0, 1, (w - 1) / 2 - c[0], (h - 1) / 2 - c[1]))

    if cfg.enable_scale:
        s = rng.uniform(*cfg.scale_range)
        steps.append(_about_center(w, h, AffineMap(s, 0, 0, s, 0, 0)))

    if cfg.enable_rotation:
        theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        rot = AffineMap(math.cos(theta), -math.sin(theta), math.sin(theta), math.cos(theta), 0, 0)
        steps.append(_about_center(w, h, rot))

    if cfg.enable_mirror and rng.random() < cfg.mirror_prob:
        steps.append(AffineMap(-1, 0, 0, 1, w - 1.0, 0.0))

    if cfg.enable_translate:
        dx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * w
        dy = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * h
        steps.append(AffineMap(1, 0, 0, 1, dx, dy))

    if cfg.enable_crop:
        left = rng.uniform(0, cfg.crop_frac) * w
        right = rng.uniform(0, cfg.crop_frac) * w
        top = rng.uniform(0, cfg.crop_frac) * h
        bottom = rng.uniform(0, cfg.crop_frac) * h
        sx = w / max(1.0, w - left - right)
        sy = h / max(1.0, h - top - bottom)
        steps.append(AffineMap(sx, 0, 0, sy, -sx * left, -sy * top))

    if not steps:
        return None
    total = steps[0]
    for step in steps[1:]:
        total = step.compose(total)
    return total


def _warp_image(image: np.ndarray, amap: AffineMap, fill: float = 0.5) -> np.ndarray:
    h, w = image.shape[:2]
    inv = amap.invert()
    ys, xs = np.mgrid[0:h, 0:w]
    src = inv.apply(np.stack([xs, ys], axis=-1).astype(np.float64))
    out = losses.bilinear_sample(image, src)
    outside = (
        (src[..., 0] < 0) | (src[..., 0] > w - 1) | (src[..., 1] < 0) | (src[..., 1] > h - 1)
    )
    out[outside] = fill
    return out


def _quad_visible(quad: Quad, w: int, h: int) -> bool:
    frame = np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])
    return geo.polygon_area(geo.clip_convex(quad.corners, frame)) > 0.0


def augment(sample: Sample, cfg: AugmentConfig, rng_seed) -> Sample:
    """Random augmentation; deterministic for (sample, cfg, rng_seed).

    Geometric transforms apply identically to pixels and quads.  When every
    quad of a plated sample lands fully outside the frame the draw is
    retried with the next seed (up to 8 times), then the sample is returned
    plate-less.
    """
    h, w = sample.image.shape[:2]
    last: Sample | None = None
    seed_seq = np.random.SeedSequence(rng_seed)
    base = int(seed_seq.generate_state(1)[0])
    for retry in range(9):
        rng = np.random.default_rng(base + retry)
        amap = _geometric_map(sample, cfg, rng)
        if amap is None:
            image = sample.image.copy()
            quads = list(sample.quads)
        else:
            image = _warp_image(sample.image, amap)
            quads = []
            for q in sample.quads:
                try:
                    quads.append(Quad.from_points(amap.apply(q.corners)))
                except ValueError:
                    continue
        if cfg.enable_colorspace:
            gain = rng.uniform(*cfg.color_gain, size=3)
            bias = rng.uniform(*cfg.color_bias, size=3)
            image = np.clip(image * gain + bias, 0.0, 1.0)
        visible = [q for q in quads if _quad_visible(q, w, h)]
        out = Sample(image=image, quads=visible, id=sample.id)
        if not sample.quads or visible:
            return out
        last = out
    return Sample(image=last.image, quads=[], id=sample.id)


@dataclass
class Batch:
    images: np.ndarray  # B x H x W x 3
    targets: list[losses.TargetGrid]
    quads: list[list[Quad]]  # ground truth mapped into network coordinates
    to_network: list[AffineMap]  # original image coords -> network input coords


def letterbox_map(src_h: int, src_w: int, dst_h: int, dst_w: int) -> AffineMap:
    """Aspect-preserving scale plus centering pad offset: x' = s*x + pad."""
    s = min(dst_w / src_w, dst_h / src_h)
    new_w = int(round(src_w * s))
    new_h = int(round(src_h * s))
    pad_x = (dst_w - new_w) // 2
    pad_y = (dst_h - new_h) // 2
    return AffineMap(s, 0.0, 0.0, s, float(pad_x), float(pad_y))


def letterbox(image: np.ndarray, dst_h: int, dst_w: int, fill: float = 0.5):
    """Resize with preserved aspect ratio onto a gray canvas."""
    h, w = image.shape[:2]
    amap = letterbox_map(h, w, dst_h, dst_w)
    if h == dst_h and w == dst_w:
        return image.copy(), amap
    out = np.full((dst_h, dst_w, 3), fill, dtype=np.float64)
    s = amap.a11
    new_w = int(round(w * s))
    new_h = int(round(h * s))
    pad_x = int(amap.tx)
    pad_y = int(amap.ty)
    ys, xs = np.mgrid[0:new_h, 0:new_w]
    patch = losses.bilinear_sample(image, np.stack([xs / s, ys / s], axis=-1))
    out[pad_y : pad_y + new_h, pad_x : pad_x + new_w] = patch
    return out, amap


def make_batch(
    samples,
    batch_size: int,
    height: int,
    width: int,
    stride: int = losses.STRIDE,
    alpha: float = losses.ALPHA,
) -> Batch:
    """Letterbox samples to the network input size and build cell targets."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(samples) != batch_size:
        raise ValueError(f"expected {batch_size} samples, got {len(samples)}")
    images = np.empty((batch_size, height, width, 3), dtype=np.float64)
    targets = []
    quads_out = []
    maps = []
    for i, sample in enumerate(samples):
        img, amap = letterbox(sample.image, height, width)
        images[i] = img
        mapped = []
        for q in sample.quads:
            try:
                mapped.append(Quad.from_points(amap.apply(q.corners)))
            except ValueError:
                continue
        targets.append(losses.build_target_grid(mapped, height, width, stride, alpha))
        quads_out.append(mapped)
        maps.append(amap)
    return Batch(images=images, targets=targets, quads=quads_out, to_network=maps)
