"""Weak (geometric), strong (photometric + CutMix) and feature perturbations.

Geometry is applied by inverse coordinate mapping so that images (bilinear)
and label maps (nearest) are sampled from the same source coordinates and
stay pixel-aligned.  All randomness comes from explicit ``numpy`` generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .core import DEFAULT_IGNORE_ID, ConfigError, LabelMap, ValidationError, as_image


@dataclass
class PerturbConfig:
    crop_size: int = 321
    scale_range: tuple[float, float] = (0.5, 2.0)
    flip_p: float = 0.5
    pad_if_needed: bool = True
    jitter_p: float = 0.8
    brightness: float = 0.5
    contrast: float = 0.5
    saturation: float = 0.5
    hue: float = 0.25
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    cutmix_p: float = 0.5
    cutmix_area: tuple[float, float] = (0.02, 0.4)
    cutmix_ratio: tuple[float, float] = (0.3, 1 / 0.3)
    fp_dropout: float = 0.5


@dataclass(frozen=True)
class GeometricRecord:
    """Resize by ``resize_scale``, crop ``crop_box`` = (x, y, h, w), then optionally flip."""

    source_shape: tuple[int, int]
    resize_scale: float
    crop_box: tuple[int, int, int, int]
    hflip: bool

    @property
    def resized_shape(self) -> tuple[int, int]:
        H, W = self.source_shape
        return max(1, int(round(H * self.resize_scale))), max(1, int(round(W * self.resize_scale)))

    @classmethod
    def identity(cls, shape: tuple[int, int]) -> "GeometricRecord":
        return cls(tuple(shape), 1.0, (0, 0, shape[0], shape[1]), False)


def sample_weak_record(rng: np.random.Generator, shape: tuple[int, int], cfg: PerturbConfig) -> GeometricRecord:
    H, W = shape
    s = float(rng.uniform(*cfg.scale_range))
    rh, rw = max(1, int(round(H * s))), max(1, int(round(W * s)))
    c = cfg.crop_size
    if (rh < c or rw < c) and not cfg.pad_if_needed:
        raise ConfigError(f"crop {c} larger than resized image {rh}x{rw} and padding is disabled")
    ph, pw = max(rh, c), max(rw, c)
    y = int(rng.integers(0, ph - c + 1))
    x = int(rng.integers(0, pw - c + 1))
    flip = bool(rng.random() < cfg.flip_p)
    return GeometricRecord((H, W), s, (x, y, c, c), flip)


def _source_coords(rec: GeometricRecord):
    """Per-output-row/col source coordinates and validity in the resized frame."""
    H, W = rec.source_shape
    rh, rw = rec.resized_shape
    x, y, h, w = rec.crop_box
    ry = y + np.arange(h)
    cols = np.arange(w)
    rx = x + (w - 1 - cols if rec.hflip else cols)
    return ry, rx, (ry < rh), (rx < rw), H / rh, W / rw


def apply_geometry(a: np.ndarray, rec: GeometricRecord, mode: str = "bilinear", fill=0) -> np.ndarray:
    """Warp a 2-D or ``(H, W, C)`` array; pixels outside the resized image get ``fill``."""
    a = np.asarray(a)
    if a.shape[:2] != tuple(rec.source_shape):
        raise ValidationError(f"array shape {a.shape[:2]} does not match record source {rec.source_shape}")
    H, W = rec.source_shape
    ry, rx, vy, vx, sy, sx = _source_coords(rec)
    if mode == "nearest":
        iy = np.minimum(np.floor((ry + 0.5) * sy).astype(np.int64), H - 1)
        ix = np.minimum(np.floor((rx + 0.5) * sx).astype(np.int64), W - 1)
        out = a[iy][:, ix]
    elif mode == "bilinear":
        fy = np.clip((ry + 0.5) * sy - 0.5, 0, H - 1)
        fx = np.clip((rx + 0.5) * sx - 0.5, 0, W - 1)
        y0 = np.floor(fy).astype(np.int64)
        x0 = np.floor(fx).astype(np.int64)
        y1 = np.minimum(y0 + 1, H - 1)
        x1 = np.minimum(x0 + 1, W - 1)
        wy = (fy - y0).reshape(-1, 1, *([1] * (a.ndim - 2)))
        wx = (fx - x0).reshape(1, -1, *([1] * (a.ndim - 2)))
        af = a.astype(np.float64)
        top = af[y0][:, x0] * (1 - wx) + af[y0][:, x1] * wx
        bot = af[y1][:, x0] * (1 - wx) + af[y1][:, x1] * wx
        out = (top * (1 - wy) + bot * wy).astype(a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64)
    else:
        raise ConfigError(f"unknown interpolation mode {mode!r}")
    valid = vy[:, None] & vx[None, :]
    if not valid.all():
        out = out.copy()
        out[~valid] = fill
    return out


def valid_region(rec: GeometricRecord) -> np.ndarray:
    """Boolean mask of output pixels that come from the image (not padding)."""
    _, _, vy, vx, _, _ = _source_coords(rec)
    return vy[:, None] & vx[None, :]


def weak_view(x, aligned_maps, rng: np.random.Generator, cfg: PerturbConfig,
              ignore_id: int = DEFAULT_IGNORE_ID, record: GeometricRecord | None = None):
    """Resize/crop/flip the image (bilinear) and every map (nearest) identically."""
    img = as_image(x)
    maps = list(aligned_maps)
    for m in maps:
        ids = m.ids if isinstance(m, LabelMap) else np.asarray(m)
        if ids.shape != img.shape[:2]:
            raise ValidationError(f"map shape {ids.shape} does not match image {img.shape[:2]}")
    rec = record if record is not None else sample_weak_record(rng, img.shape[:2], cfg)
    out_img = apply_geometry(img, rec, "bilinear", 0.0).astype(np.float32)
    out_maps = []
    for m in maps:
        if isinstance(m, LabelMap):
            out_maps.append(LabelMap(apply_geometry(m.ids, rec, "nearest", ignore_id), m.provenance))
        else:
            out_maps.append(apply_geometry(np.asarray(m), rec, "nearest", ignore_id))
    return out_img, out_maps, rec


@dataclass(frozen=True)
class StrongParams:
    jitter: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    grayscale: bool = False
    blur: bool = False
    blur_sigma: float = 1.0
    cutmix_box: tuple[int, int, int, int] = (0, 0, 0, 0)  # (x, y, h, w)
    cutmix_partner: int = -1


def sample_cutmix_box(rng: np.random.Generator, shape: tuple[int, int], cfg: PerturbConfig):
    H, W = shape
    if rng.random() >= cfg.cutmix_p:
        return (0, 0, 0, 0)
    # rejection-sample until the box fits, as in the usual CutMix recipe
    for _ in range(100):
        area = rng.uniform(*cfg.cutmix_area) * H * W
        ratio = rng.uniform(*cfg.cutmix_ratio)
        w = int(math.sqrt(area / ratio))
        h = int(math.sqrt(area * ratio))
        x = int(rng.integers(0, W + 1))
        y = int(rng.integers(0, H + 1))
        if x + w <= W and y + h <= H and h > 0 and w > 0:
            return (x, y, h, w)
    return (0, 0, 0, 0)


def sample_strong_params(rng: np.random.Generator, shape: tuple[int, int], cfg: PerturbConfig,
                         partner: int = -1) -> StrongParams:
    # every draw happens regardless of outcome so the stream layout is fixed
    jitter = bool(rng.random() < cfg.jitter_p)
    b = rng.uniform(max(0, 1 - cfg.brightness), 1 + cfg.brightness)
    c = rng.uniform(max(0, 1 - cfg.contrast), 1 + cfg.contrast)
    s = rng.uniform(max(0, 1 - cfg.saturation), 1 + cfg.saturation)
    h = rng.uniform(-cfg.hue, cfg.hue)
    gray = bool(rng.random() < cfg.grayscale_p)
    blur = bool(rng.random() < cfg.blur_p)
    sigma = rng.uniform(*cfg.blur_sigma)
    box = sample_cutmix_box(rng, shape, cfg)
    return StrongParams(jitter, float(b), float(c), float(s), float(h), gray, blur, float(sigma), box, partner)


def photometric(img: np.ndarray, p: StrongParams) -> np.ndarray:
    """Colour jitter, grayscale and blur; pixel positions are untouched."""
    t = torch.from_numpy(np.ascontiguousarray(as_image(img))).permute(2, 0, 1)
    if p.jitter:
        t = TF.adjust_brightness(t, p.brightness)
        t = TF.adjust_contrast(t, p.contrast)
        t = TF.adjust_saturation(t, p.saturation)
        t = TF.adjust_hue(t, p.hue)
    if p.grayscale:
        t = TF.rgb_to_grayscale(t, num_output_channels=3)
    if p.blur:
        k = 2 * math.ceil(3 * p.blur_sigma) + 1
        t = TF.gaussian_blur(t, [k, k], [p.blur_sigma, p.blur_sigma])
    return t.permute(1, 2, 0).numpy().astype(np.float32)


def box_mask(shape: tuple[int, int], box: tuple[int, int, int, int]) -> np.ndarray:
    x, y, h, w = box
    m = np.zeros(shape, dtype=bool)
    m[y:y + h, x:x + w] = True
    return m


def strong_view(weak_image, params: StrongParams, partner_weak_image,
                partner_params: StrongParams | None = None) -> np.ndarray:
    """Photometric perturbation of the weak view with the CutMix box pasted from the partner.

    The partner is perturbed with ``partner_params`` (default: ``params``)
    before its pixels are pasted.
    """
    a = as_image(weak_image)
    b = as_image(partner_weak_image)
    if a.shape != b.shape:
        raise ValidationError(f"strong view partner shape {b.shape} differs from {a.shape}")
    out = photometric(a, params)
    m = box_mask(a.shape[:2], params.cutmix_box)
    if m.any():
        out[m] = photometric(b, partner_params or params)[m]
    return out


def cutmix_labels(l_a, l_b, box):
    """Ids inside ``box`` come from ``l_b``, the rest from ``l_a``."""
    a = l_a.ids if isinstance(l_a, LabelMap) else np.asarray(l_a)
    b = l_b.ids if isinstance(l_b, LabelMap) else np.asarray(l_b)
    if a.shape != b.shape:
        raise ValidationError(f"cutmix label shapes differ: {a.shape} vs {b.shape}")
    out = np.where(box_mask(a.shape, box), b, a)
    if isinstance(l_a, LabelMap):
        return LabelMap(out, l_a.provenance)
    return out


def feature_dropout(features: torch.Tensor, p: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Channel dropout on a ``(B, C, ...)`` activation grid with inverted scaling."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0:
        return features
    shape = features.shape[:2] + (1,) * (features.dim() - 2)
    keep = torch.rand(shape, generator=generator, device=features.device) >= p
    return features * keep.to(features.dtype) / (1 - p)


def derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random permutation without fixed points (identity for ``n == 1``)."""
    if n < 2:
        return np.arange(n)
    while True:
        perm = rng.permutation(n)
        if (perm != np.arange(n)).all():
            return perm


@dataclass
class UnlabeledViews:
    """Per-batch perturbation bundle for the unlabeled half."""

    weak: np.ndarray            # (B, h, w, 3)
    strong1: np.ndarray
    strong2: np.ndarray
    pseudo: np.ndarray          # (B, h, w) pseudo-labels in the weak frame
    valid: np.ndarray           # (B, h, w) pixel comes from the image, not padding
    params1: list[StrongParams] = field(default_factory=list)
    params2: list[StrongParams] = field(default_factory=list)
    records: list[GeometricRecord] = field(default_factory=list)


def unlabeled_views(images, pseudo_maps, rngs: list[np.random.Generator], batch_rng: np.random.Generator,
                    cfg: PerturbConfig, ignore_id: int = DEFAULT_IGNORE_ID) -> UnlabeledViews:
    """Weak view per sample, then two independent strong views on top of it.

    Each sample uses its own generator from ``rngs``; CutMix partners come from
    a derangement drawn from ``batch_rng`` (one per strong view).
    """
    n = len(images)
    weak, pseudo, recs, valid = [], [], [], []
    for img, lp, rng in zip(images, pseudo_maps, rngs):
        w, (lp_w,), rec = weak_view(img, [lp], rng, cfg, ignore_id)
        weak.append(w)
        pseudo.append(lp_w.ids if isinstance(lp_w, LabelMap) else lp_w)
        recs.append(rec)
        valid.append(valid_region(rec))
    perm1, perm2 = derangement(batch_rng, n), derangement(batch_rng, n)
    shape = weak[0].shape[:2]
    p1 = [sample_strong_params(rngs[i], shape, cfg, int(perm1[i])) for i in range(n)]
    p2 = [sample_strong_params(rngs[i], shape, cfg, int(perm2[i])) for i in range(n)]
    s1 = [strong_view(weak[i], p1[i], weak[perm1[i]], p1[perm1[i]]) for i in range(n)]
    s2 = [strong_view(weak[i], p2[i], weak[perm2[i]], p2[perm2[i]]) for i in range(n)]
    return UnlabeledViews(np.stack(weak), np.stack(s1), np.stack(s2), np.stack(pseudo), np.stack(valid),
                          p1, p2, recs)
