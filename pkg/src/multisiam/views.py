"""Positive view pairs: IoU-constrained crop sampling and view rendering.

A view is a continuous crop box in source-image pixel coordinates plus a flip
flag and a photometric recipe. Two views form a positive pair only when their
boxes overlap by at least the configured IoU threshold; overlap is measured on
the unflipped boxes since flipping does not move content regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = [
    "Box",
    "PhotoParams",
    "ViewSpec",
    "ViewPair",
    "AugmentConfig",
    "compute_iou",
    "sample_view_pair",
    "render_view",
    "resize_bilinear",
]

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Box:
    """Axis-aligned crop box in continuous source-image pixel coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class PhotoParams:
    """Photometric recipe of one view; all-neutral values mean no change."""

    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0
    grayscale: bool = False
    blur_sigma: float = 0.0
    solarize: bool = False


NEUTRAL_PHOTO = PhotoParams()


@dataclass(frozen=True)
class ViewSpec:
    """Full geometry + photometric recipe of one random view."""

    box: Box
    flipped: bool
    photometric: PhotoParams
    out_size: tuple[int, int]  # (H, W) pixels


@dataclass(frozen=True)
class ViewPair:
    spec_a: ViewSpec
    spec_b: ViewSpec
    iou: float


@dataclass(frozen=True)
class AugmentConfig:
    """Crop-geometry and photometric sampling parameters.

    Photometric defaults follow the usual two-view asymmetric recipe: jitter
    with probability 0.8 (max deltas 0.4/0.4/0.2/0.1), grayscale 0.2, blur
    probability 1.0 for the first view and 0.1 for the second, solarization
    0 / 0.2.
    """

    iou_threshold: float = 0.5
    min_scale: float = 0.08
    max_scale: float = 1.0
    aspect_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    max_attempts: int = 100
    out_size: tuple[int, int] = (64, 64)
    jitter_prob: float = 0.8
    jitter_max: tuple[float, float, float, float] = (0.4, 0.4, 0.2, 0.1)
    grayscale_prob: float = 0.2
    blur_prob: tuple[float, float] = (1.0, 0.1)
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    solarize_prob: tuple[float, float] = (0.0, 0.2)

    def __post_init__(self):
        if not 0.0 <= self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in [0, 1)")
        if not 0.0 < self.min_scale <= 1.0:
            raise ValueError("min_scale must lie in (0, 1]")


def compute_iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _sample_box(img_h: int, img_w: int, cfg: AugmentConfig, rng: np.random.Generator) -> Box:
    log_lo, log_hi = np.log(cfg.aspect_range[0]), np.log(cfg.aspect_range[1])
    bw = bh = None
    for _ in range(10):
        frac = rng.uniform(cfg.min_scale, cfg.max_scale)
        aspect = float(np.exp(rng.uniform(log_lo, log_hi)))
        target = frac * img_w * img_h
        bw = float(np.sqrt(target * aspect))
        bh = float(np.sqrt(target / aspect))
        if bw <= img_w and bh <= img_h:
            break
    bw = min(bw, float(img_w))
    bh = min(bh, float(img_h))
    x0 = rng.uniform(0.0, img_w - bw)
    y0 = rng.uniform(0.0, img_h - bh)
    return Box(x0, y0, x0 + bw, y0 + bh)


def _sample_photo(cfg: AugmentConfig, view_index: int, rng: np.random.Generator) -> PhotoParams:
    if rng.random() < cfg.jitter_prob:
        deltas = [float(rng.uniform(-m, m)) for m in cfg.jitter_max]
    else:
        deltas = [0.0, 0.0, 0.0, 0.0]
    grayscale = rng.random() < cfg.grayscale_prob
    blur_sigma = 0.0
    if rng.random() < cfg.blur_prob[view_index]:
        blur_sigma = float(rng.uniform(*cfg.blur_sigma_range))
    solarize = rng.random() < cfg.solarize_prob[view_index]
    return PhotoParams(deltas[0], deltas[1], deltas[2], deltas[3],
                       grayscale, blur_sigma, solarize)


def sample_view_pair(image_size: tuple[int, int], cfg: AugmentConfig,
                     rng: np.random.Generator) -> ViewPair:
    """Draw two random-resized-crop views whose boxes overlap enough.

    Both boxes are redrawn on every rejected attempt. If max_attempts draws
    all miss the threshold, the best pair seen is returned so the sampler
    never loops forever.
    """
    img_h, img_w = image_size
    best: tuple[Box, Box] | None = None
    best_iou = -1.0
    for _ in range(max(1, cfg.max_attempts)):
        box_a = _sample_box(img_h, img_w, cfg, rng)
        box_b = _sample_box(img_h, img_w, cfg, rng)
        iou = compute_iou(box_a, box_b)
        if iou > best_iou:
            best, best_iou = (box_a, box_b), iou
        if iou >= cfg.iou_threshold:
            break
    box_a, box_b = best
    specs = []
    for view_index, box in enumerate((box_a, box_b)):
        flipped = rng.random() < 0.5
        photo = _sample_photo(cfg, view_index, rng)
        specs.append(ViewSpec(box, flipped, photo, cfg.out_size))
    return ViewPair(specs[0], specs[1], best_iou)


# ---------------------------------------------------------------------------
# rendering


def _bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a [C,H,W] array at continuous (x, y) positions where source
    pixel (r, c) has its center at (c + 0.5, r + 0.5). Edge-clamped."""
    _, h, w = img.shape
    u = np.clip(xs - 0.5, 0.0, w - 1.0)
    v = np.clip(ys - 0.5, 0.0, h - 1.0)
    j0 = np.floor(u).astype(np.intp)
    i0 = np.floor(v).astype(np.intp)
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    fx = u - j0
    fy = v - i0
    w00 = np.outer(1.0 - fy, 1.0 - fx)
    w01 = np.outer(1.0 - fy, fx)
    w10 = np.outer(fy, 1.0 - fx)
    w11 = np.outer(fy, fx)
    return (img[:, i0[:, None], j0[None, :]] * w00
            + img[:, i0[:, None], j1[None, :]] * w01
            + img[:, i1[:, None], j0[None, :]] * w10
            + img[:, i1[:, None], j1[None, :]] * w11)


def _crop_resize(img: np.ndarray, box: Box, out_size: tuple[int, int]) -> np.ndarray:
    out_h, out_w = out_size
    xs = box.x0 + (np.arange(out_w) + 0.5) / out_w * box.width
    ys = box.y0 + (np.arange(out_h) + 0.5) / out_h * box.height
    return _bilinear_sample(img, xs, ys)


def resize_bilinear(img: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Resize a [C,H,W] array to out_size with pixel-center bilinear sampling."""
    _, h, w = img.shape
    return _crop_resize(img, Box(0.0, 0.0, float(w), float(h)), out_size)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb
    maxc = rgb.max(axis=0)
    minc = rgb.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    dsafe = np.where(delta > 0, delta, 1.0)
    h = np.where(maxc == r, ((g - b) / dsafe) % 6.0,
                 np.where(maxc == g, (b - r) / dsafe + 2.0, (r - g) / dsafe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _color_jitter(img: np.ndarray, p: PhotoParams) -> np.ndarray:
    if p.brightness != 0.0:
        img = img * (1.0 + p.brightness)
    if p.contrast != 0.0:
        gray_mean = float((LUMA[:, None, None] * img).sum(axis=0).mean())
        img = (1.0 + p.contrast) * img + (-p.contrast) * gray_mean
    if p.saturation != 0.0:
        luma = (LUMA[:, None, None] * img).sum(axis=0, keepdims=True)
        img = (1.0 + p.saturation) * img + (-p.saturation) * luma
    if p.hue != 0.0:
        hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[0] = (hsv[0] + p.hue) % 1.0
        img = _hsv_to_rgb(hsv)
    return img


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(3.0 * sigma + 0.5))
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (taps / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, ((0, 0), (0, 0), (radius, radius)), mode="edge")
    out = np.zeros_like(img)
    for k, coef in enumerate(kernel):
        out += coef * padded[:, :, k:k + img.shape[2]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for k, coef in enumerate(kernel):
        out += coef * padded[:, k:k + img.shape[1], :]
    return out


def render_view(image, spec: ViewSpec) -> Tensor:
    """Render one view: bilinear crop-resize, flip, then the photometric chain
    (jitter, grayscale, blur, solarize). Output values are clamped to [0, 1].
    This path is not differentiated; the result is a detached tensor."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    out = _crop_resize(img, spec.box, spec.out_size)
    if spec.flipped:
        out = out[:, :, ::-1]
    p = spec.photometric
    out = _color_jitter(out, p)
    if p.grayscale:
        luma = (LUMA[:, None, None] * out).sum(axis=0, keepdims=True)
        out = np.repeat(luma, 3, axis=0)
    if p.blur_sigma > 0.0:
        out = _gaussian_blur(out, p.blur_sigma)
    if p.solarize:
        out = np.where(out < 0.5, out, 1.0 - out)
    return Tensor(np.clip(out, 0.0, 1.0))
