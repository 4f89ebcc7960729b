"""Datasets, split protocol, pseudo-label persistence and the synthetic shapes dataset.

Directory layout of a dataset root::

    dataset.json          descriptor (vocabulary, list files, extensions)
    images/<id>.png
    labels/<id>.png       8-bit indexed masks, ignore id for void pixels
    train.txt, val.txt    one id per line
    splits/<frac>/seed<k>/{labeled,unlabeled}.txt

Pseudo-label sets live in their own directory: ``<id>.png`` plus ``manifest.json``.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .core import (
    BackgroundPolicy,
    ClassVocabulary,
    ConfigError,
    DataError,
    LabelMap,
    Provenance,
    ValidationError,
    validate_label_map,
)

PASCAL_FRACTIONS = ("1/16", "1/8", "1/4", "1/2", "full")
COCO_FRACTIONS = ("1/512", "1/256", "1/128", "1/64")
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class VersionError(DataError):
    """Stored artifact is incompatible with the requested vocabulary or format."""


def parse_fraction(frac: str | float | Fraction) -> Fraction:
    if isinstance(frac, str) and frac.strip().lower() == "full":
        return Fraction(1)
    try:
        f = Fraction(frac).limit_denominator(4096) if not isinstance(frac, str) else Fraction(frac.strip())
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"cannot parse split fraction {frac!r}") from e
    if not 0 < f <= 1:
        raise ConfigError(f"split fraction must be in (0, 1], got {frac!r}")
    return f


def fraction_label(frac) -> str:
    f = parse_fraction(frac)
    return "full" if f == 1 else f"{f.numerator}-{f.denominator}"


def labeled_count(n_total: int, frac) -> int:
    """Number of labeled ids for a fraction of the training pool (rounded up)."""
    f = parse_fraction(frac)
    return math.ceil(n_total * f.numerator / f.denominator)


def read_ids(path: str | Path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"id list not found: {path}")
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def write_ids(path: str | Path, ids: Sequence[str]) -> None:
    _atomic_write_bytes(Path(path), "".join(f"{i}\n" for i in ids).encode())


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class DatasetDescriptor:
    name: str
    root: str
    vocabulary: ClassVocabulary
    image_dir: str = "images"
    label_dir: str = "labels"
    train_list: str = "train.txt"
    val_list: str = "val.txt"
    image_ext: str = ".png"
    label_ext: str = ".png"
    void_ids: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    def path(self, rel: str) -> Path:
        return Path(self.root) / rel

    def image_path(self, image_id: str) -> Path:
        return self.path(self.image_dir) / f"{image_id}{self.image_ext}"

    def label_path(self, image_id: str) -> Path:
        return self.path(self.label_dir) / f"{image_id}{self.label_ext}"

    def train_ids(self) -> list[str]:
        return read_ids(self.path(self.train_list))

    def val_ids(self) -> list[str]:
        return read_ids(self.path(self.val_list))

    def check(self, labeled: Sequence[str] = ()) -> None:
        """Every train id resolves to an image; ``labeled`` ids also to a label."""
        if not Path(self.root).is_dir():
            raise DataError(f"dataset root does not exist: {self.root}")
        for i in self.train_ids():
            if not self.image_path(i).is_file():
                raise DataError(f"image missing for id {i}: {self.image_path(i)}")
        for i in labeled:
            if not self.label_path(i).is_file():
                raise DataError(f"label missing for id {i}: {self.label_path(i)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocabulary"] = self.vocabulary.to_dict()
        d["void_ids"] = list(self.void_ids)
        d.pop("root")
        return d

    def save(self) -> Path:
        p = self.path("dataset.json")
        _atomic_write_bytes(p, json.dumps(self.to_dict(), indent=2).encode())
        return p

    @classmethod
    def load(cls, root: str | Path) -> "DatasetDescriptor":
        root = Path(root)
        p = root / "dataset.json" if root.is_dir() else root
        if not p.is_file():
            raise DataError(f"dataset descriptor not found: {p}")
        d = json.loads(p.read_text())
        d["vocabulary"] = ClassVocabulary.from_dict(d["vocabulary"])
        d["void_ids"] = tuple(d.get("void_ids", ()))
        return cls(root=str(p.parent), **d)


@dataclass(frozen=True)
class SplitSpec:
    fraction: str
    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]
    seed: int

    def __post_init__(self):
        overlap = set(self.labeled_ids) & set(self.unlabeled_ids)
        if overlap:
            raise ValidationError(f"labeled and unlabeled ids overlap: {sorted(overlap)[:5]}")


def make_split(ids: Sequence[str], fraction, seed: int) -> SplitSpec:
    """Uniform sampling without replacement of the labeled subset.

    With ``fraction == "full"`` every id is labeled and the unlabeled list is
    empty; whether training then reuses labeled images as unlabeled ones is a
    training-config switch.
    """
    ids = list(ids)
    n = labeled_count(len(ids), fraction)
    if n < 1:
        raise ConfigError(f"fraction {fraction} of {len(ids)} ids yields no labeled image")
    perm = np.random.default_rng(seed).permutation(len(ids))
    chosen = set(perm[:n].tolist())
    labeled = tuple(ids[i] for i in sorted(chosen))
    unlabeled = tuple(ids[i] for i in range(len(ids)) if i not in chosen)
    label = "full" if parse_fraction(fraction) == 1 else str(parse_fraction(fraction))
    return SplitSpec(label, labeled, unlabeled, seed)


def split_dir(descriptor: DatasetDescriptor, fraction, seed: int) -> Path:
    return descriptor.path("splits") / fraction_label(fraction) / f"seed{seed}"


def load_split(descriptor: DatasetDescriptor, fraction, seed: int, persist: bool = True,
               use_existing: bool = True) -> SplitSpec:
    """Deterministic split of the train list, persisted as id-list files.

    Existing files under ``splits/`` (e.g. published lists) take precedence.
    """
    d = split_dir(descriptor, fraction, seed)
    label = "full" if parse_fraction(fraction) == 1 else str(parse_fraction(fraction))
    if use_existing and (d / "labeled.txt").is_file():
        unl = read_ids(d / "unlabeled.txt") if (d / "unlabeled.txt").is_file() else []
        return SplitSpec(label, tuple(read_ids(d / "labeled.txt")), tuple(unl), seed)
    spec = make_split(descriptor.train_ids(), fraction, seed)
    if persist:
        write_ids(d / "labeled.txt", spec.labeled_ids)
        write_ids(d / "unlabeled.txt", spec.unlabeled_ids)
    return spec


PASCAL_CLASSES = (
    "background", "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)


def pascal_voc_descriptor(root: str | Path, train_list: str = "ImageSets/Segmentation/train.txt",
                          label_dir: str = "SegmentationClass", save: bool = True) -> DatasetDescriptor:
    """Descriptor for a ``VOCdevkit/VOC2012``-style directory (use ``SegmentationClassAug`` for the augmented set)."""
    desc = DatasetDescriptor(
        name="pascal-voc-2012", root=str(root), vocabulary=ClassVocabulary(PASCAL_CLASSES),
        image_dir="JPEGImages", label_dir=label_dir, train_list=train_list,
        val_list="ImageSets/Segmentation/val.txt", image_ext=".jpg", label_ext=".png",
    )
    if save:
        desc.save()
    return desc


# ---------------------------------------------------------------------------
# masks and samples

VOC_PALETTE = []
for _i in range(256):
    _c, _r, _g, _b = _i, 0, 0, 0
    for _j in range(8):
        _r |= ((_c >> 0) & 1) << (7 - _j)
        _g |= ((_c >> 1) & 1) << (7 - _j)
        _b |= ((_c >> 2) & 1) << (7 - _j)
        _c >>= 3
    VOC_PALETTE += [_r, _g, _b]


def write_label_png(path: str | Path, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) > 255:
        raise ValidationError("label ids must fit in 8 bits")
    im = Image.fromarray(ids.astype(np.uint8), mode="P")
    im.putpalette(VOC_PALETTE)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.stem}.", suffix=".png")
    os.close(fd)
    try:
        im.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_label_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("P", "L"):
                raise DataError(f"{path}: expected an indexed or grayscale mask, got mode {im.mode}")
            return np.array(im, dtype=np.int64)
    except (OSError, SyntaxError) as e:
        raise DataError(f"cannot read mask {path}: {e}") from e


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def load_sample(descriptor: DatasetDescriptor, image_id: str, want_label: bool = True):
    """``(image, LabelMap | None)``; void ids are mapped to the ignore id."""
    p = descriptor.image_path(image_id)
    if not p.is_file():
        raise DataError(f"image missing for id {image_id}: {p}")
    img = read_image(p)
    if not want_label:
        return img, None
    lp = descriptor.label_path(image_id)
    if not lp.is_file():
        raise DataError(f"label missing for id {image_id}: {lp}")
    ids = read_label_png(lp)
    vocab = descriptor.vocabulary
    if descriptor.void_ids:
        ids[np.isin(ids, descriptor.void_ids)] = vocab.ignore_id
    try:
        validate_label_map(ids, vocab, img.shape[:2])
    except ValidationError as e:
        raise DataError(f"bad label for id {image_id}: {e}") from e
    return img, LabelMap(ids, Provenance.GROUND_TRUTH)


# ---------------------------------------------------------------------------
# pseudo-label persistence


@dataclass
class PseudoManifest:
    vocabulary: dict
    sim_threshold: float
    template: str
    providers: dict
    checkpoints: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PseudoManifest":
        return cls(**d)


def write_manifest(out_dir: str | Path, manifest: PseudoManifest) -> Path:
    p = Path(out_dir) / MANIFEST_NAME
    _atomic_write_bytes(p, json.dumps(manifest.to_dict(), indent=2, sort_keys=True).encode())
    return p


def read_manifest(out_dir: str | Path) -> PseudoManifest:
    p = Path(out_dir) / MANIFEST_NAME
    if not p.is_file():
        raise DataError(f"pseudo-label manifest missing: {p}")
    d = json.loads(p.read_text())
    if d.get("version") != MANIFEST_VERSION:
        raise VersionError(f"unsupported manifest version {d.get('version')} in {p}")
    return PseudoManifest.from_dict(d)


def save_pseudo(out_dir: str | Path, image_id: str, label: LabelMap) -> Path:
    p = Path(out_dir) / f"{image_id}.png"
    write_label_png(p, label.ids)
    return p


def load_pseudo(out_dir: str | Path, image_id: str, vocab: ClassVocabulary | None = None,
                manifest: PseudoManifest | None = None) -> LabelMap:
    """Read one pseudo-label, checking the manifest's vocabulary against ``vocab``."""
    if vocab is not None:
        manifest = manifest or read_manifest(out_dir)
        stored = ClassVocabulary.from_dict(manifest.vocabulary)
        if stored.num_classes != vocab.num_classes or stored.ignore_id != vocab.ignore_id:
            raise VersionError(
                f"pseudo-labels in {out_dir} were built for {stored.num_classes} classes "
                f"(ignore {stored.ignore_id}); requested {vocab.num_classes} (ignore {vocab.ignore_id})"
            )
    p = Path(out_dir) / f"{image_id}.png"
    if not p.is_file():
        raise DataError(f"missing pseudo-label for sample {image_id}: {p}")
    return LabelMap(read_label_png(p), Provenance.PSEUDO)


# ---------------------------------------------------------------------------
# synthetic dataset

COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple")
COLOR_RGB = {
    "red": (0.85, 0.15, 0.15), "green": (0.15, 0.75, 0.2), "blue": (0.15, 0.25, 0.85),
    "yellow": (0.9, 0.85, 0.15), "magenta": (0.85, 0.2, 0.8), "cyan": (0.15, 0.8, 0.85),
    "orange": (0.95, 0.55, 0.1), "purple": (0.5, 0.2, 0.7),
}
BACKGROUND_RGB = (0.45, 0.45, 0.45)


def synthetic_palette(n_classes: int) -> np.ndarray:
    """``(n_classes, 3)`` prototype colours; class 0 is the grey background."""
    if not 2 <= n_classes <= len(COLOR_NAMES) + 1:
        raise ConfigError(f"synthetic dataset supports 2..{len(COLOR_NAMES) + 1} classes")
    return np.array([BACKGROUND_RGB] + [COLOR_RGB[c] for c in COLOR_NAMES[: n_classes - 1]])


def _draw_shapes(rng: np.random.Generator, size: int, n_classes: int, max_shapes: int) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    for _ in range(rng.integers(1, max_shapes + 1)):
        cls = int(rng.integers(1, n_classes))
        r = rng.uniform(0.08, 0.25) * size
        cx, cy = rng.uniform(0, size, 2)
        kind = rng.integers(0, 3)
        if kind == 0:
            rx, ry = r, r * rng.uniform(0.5, 1.5)
            draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=cls)
        elif kind == 1:
            w, h = r * rng.uniform(0.6, 1.6), r * rng.uniform(0.6, 1.6)
            draw.rectangle([cx - w, cy - h, cx + w, cy + h], fill=cls)
        else:
            ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, 3)
            pts = [(float(cx + r * 1.3 * np.cos(a)), float(cy + r * 1.3 * np.sin(a))) for a in ang]
            draw.polygon(pts, fill=cls)
    return np.array(canvas, dtype=np.int64)


def _texture(rng: np.random.Generator, size: int, amp: float) -> np.ndarray:
    coarse = rng.standard_normal((size // 8 + 1, size // 8 + 1, 3))
    t = np.asarray(Image.fromarray(((coarse * 0.25 + 0.5).clip(0, 1) * 255).astype(np.uint8))
                   .resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0 - 0.5
    return amp * t


def render_synthetic(rng: np.random.Generator, size: int, n_classes: int, max_shapes: int = 4,
                     noise: float = 0.04, texture: float = 0.25, brightness: float = 0.2,
                     color_cast: float = 0.0):
    """One ``(image, ids)`` pair drawn from the same geometry.

    ``color_cast`` scales each RGB channel by an independent factor in
    ``1 ± color_cast`` (a per-image illuminant).
    """
    ids = _draw_shapes(rng, size, n_classes, max_shapes)
    palette = synthetic_palette(n_classes)
    img = palette[ids].astype(np.float32)
    img *= np.float32(1.0 + rng.uniform(-brightness, brightness))
    img += _texture(rng, size, texture) * (ids == 0)[..., None]
    img *= (1.0 + rng.uniform(-color_cast, color_cast, 3)).astype(np.float32)
    img += rng.normal(0, noise, img.shape).astype(np.float32)
    return np.clip(img, 0, 1), ids


def synthetic_dataset(root: str | Path, seed: int = 0, n_images: int = 200, n_classes: int = 3,
                      size: int = 64, n_val: int = 50, **render_kwargs) -> DatasetDescriptor:
    """Write a shapes-on-texture dataset with exact masks and return its descriptor."""
    if n_classes < 2:
        raise ConfigError("n_classes must be >= 2")
    root = Path(root)
    names = ("background",) + COLOR_NAMES[: n_classes - 1]
    vocab = ClassVocabulary(names, BackgroundPolicy.EXPLICIT)
    desc = DatasetDescriptor(
        name=f"synthetic-{n_classes}c-{size}px", root=str(root), vocabulary=vocab,
        meta={"palette": synthetic_palette(n_classes).tolist(), "seed": seed, "size": size},
    )
    train_ids = [f"train_{i:05d}" for i in range(n_images)]
    val_ids = [f"val_{i:05d}" for i in range(n_val)]
    for k, image_id in enumerate(train_ids + val_ids):
        rng = np.random.default_rng([seed, k])
        img, ids = render_synthetic(rng, size, n_classes, **render_kwargs)
        p = desc.image_path(image_id)
        p.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray((img * 255).round().astype(np.uint8)).save(p, format="PNG")
        write_label_png(desc.label_path(image_id), ids)
    write_ids(desc.path(desc.train_list), train_ids)
    write_ids(desc.path(desc.val_list), val_ids)
    desc.save()
    return desc


# ---------------------------------------------------------------------------
# COCO ingest


def _rle_decode(counts, h: int, w: int) -> np.ndarray:
    if isinstance(counts, str):
        counts = _rle_string_to_counts(counts)
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in counts:
        flat[pos:pos + c] = val
        pos += c
        val = not val
    return flat.reshape(w, h).T  # column-major


def _rle_string_to_counts(s: str) -> list[int]:
    # compressed LEB128-like encoding of the COCO API
    counts, p = [], 0
    while p < len(s):
        x, k, more = 0, 0, True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def coco_annotation_mask(ann: dict, h: int, w: int) -> np.ndarray:
    seg = ann["segmentation"]
    if isinstance(seg, list):
        canvas = Image.new("L", (w, h), 0)
        draw = ImageDraw.Draw(canvas)
        for poly in seg:
            pts = list(zip(poly[0::2], poly[1::2]))
            if len(pts) >= 3:
                draw.polygon(pts, fill=1)
        return np.array(canvas, dtype=bool)
    return _rle_decode(seg["counts"], *seg["size"])


def ingest_coco(annotation_json: str | Path, out_label_dir: str | Path, ignore_id: int = 255) -> dict[int, int]:
    """Convert COCO instance annotations into indexed masks (``0`` = background).

    Categories are renumbered ``1..K`` in id order; crowd regions become the
    ignore id.  Returns the category-id -> class-id mapping.
    """
    data = json.loads(Path(annotation_json).read_text())
    cats = sorted(c["id"] for c in data["categories"])
    mapping = {cid: k + 1 for k, cid in enumerate(cats)}
    by_image: dict[int, list] = {}
    for a in data["annotations"]:
        by_image.setdefault(a["image_id"], []).append(a)
    for im in data["images"]:
        h, w = im["height"], im["width"]
        ids = np.zeros((h, w), dtype=np.int64)
        anns = sorted(by_image.get(im["id"], []), key=lambda a: -a.get("area", 0))
        for a in anns:
            m = coco_annotation_mask(a, h, w)
            ids[m] = ignore_id if a.get("iscrowd", 0) else mapping[a["category_id"]]
        stem = Path(im["file_name"]).stem
        write_label_png(Path(out_label_dir) / f"{stem}.png", ids)
    return mapping
