"""Domain types shared across the pipeline.

Arrays are numpy, channel-last: images are ``(H, W, 3)`` float32 in ``[0, 1]``,
feature maps ``(H, W, D)``, confidence maps ``(H, W, C)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

DEFAULT_IGNORE_ID = 255


class EnhsegError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(EnhsegError, ValueError):
    pass


class ConfigError(EnhsegError, ValueError):
    pass


class DataError(EnhsegError):
    pass


class ProviderError(EnhsegError):
    pass


class NumericError(EnhsegError, ArithmeticError):
    pass


class BackgroundPolicy(str, enum.Enum):
    EXPLICIT = "explicit-background-class"
    IGNORE = "unassigned-is-ignore"


class Provenance(str, enum.Enum):
    GROUND_TRUTH = "ground_truth"
    PSEUDO = "pseudo"
    ENHANCED = "enhanced"


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]
    background_policy: BackgroundPolicy = BackgroundPolicy.EXPLICIT
    ignore_id: int = DEFAULT_IGNORE_ID

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "background_policy", BackgroundPolicy(self.background_policy))
        if len(self.names) < 2:
            raise ValidationError(f"vocabulary needs at least 2 classes, got {len(self.names)}")
        if any(not n for n in self.names):
            raise ValidationError("class names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValidationError(f"duplicate class names in {self.names}")
        if 0 <= self.ignore_id < len(self.names):
            raise ValidationError(f"ignore_id {self.ignore_id} collides with class range [0, {len(self.names)})")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def unassigned_id(self) -> int:
        """Id painted on pixels no segment claims.

        Class 0 is the background class under the explicit policy.
        """
        if self.background_policy is BackgroundPolicy.EXPLICIT:
            return 0
        return self.ignore_id

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "background_policy": self.background_policy.value,
            "ignore_id": self.ignore_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassVocabulary":
        return cls(
            names=tuple(d["names"]),
            background_policy=BackgroundPolicy(d.get("background_policy", BackgroundPolicy.EXPLICIT)),
            ignore_id=int(d.get("ignore_id", DEFAULT_IGNORE_ID)),
        )


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabelMap:
    ids: np.ndarray
    provenance: Provenance = Provenance.GROUND_TRUTH

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise ValidationError(f"label map must be 2-D, got shape {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise ValidationError(f"label map needs an integer dtype, got {ids.dtype}")
        object.__setattr__(self, "ids", _readonly(ids.astype(np.int64)))
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape


@dataclass(frozen=True)
class SegmentMask:
    bits: np.ndarray
    score: float = 1.0

    def __post_init__(self):
        bits = np.asarray(self.bits).astype(bool)
        if bits.ndim != 2:
            raise ValidationError(f"segment mask must be 2-D, got shape {bits.shape}")
        if not bits.any():
            raise ValidationError("segment mask is empty")
        object.__setattr__(self, "bits", _readonly(bits))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] < 1:
            raise ValidationError(f"feature map must be (H, W, D) with D > 0, got {v.shape}")
        if not np.isfinite(v).all():
            raise NumericError("feature map contains non-finite values")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ConfidenceMap:
    probs: np.ndarray
    atol: float = field(default=1e-5, repr=False)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ValidationError(f"confidence map must be (H, W, C), got {p.shape}")
        if (p < 0).any() or not np.isfinite(p).all():
            raise ValidationError("confidence map has negative or non-finite entries")
        sums = p.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=self.atol, rtol=0):
            worst = np.unravel_index(np.argmax(np.abs(sums - 1)), sums.shape)
            raise ValidationError(f"pixel {tuple(int(i) for i in worst)} sums to {sums[worst]:.8f}, not 1")
        object.__setattr__(self, "probs", _readonly(p))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probs.shape


def as_image(x) -> np.ndarray:
    """Coerce to a float32 ``(H, W, 3)`` image, validating finiteness."""
    img = np.asarray(x)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValidationError(f"image must be (H, W, 3), got {img.shape}")
    if np.issubdtype(img.dtype, np.integer):
        img = img.astype(np.float32) / 255.0
    img = img.astype(np.float32, copy=False)
    if not np.isfinite(img).all():
        raise NumericError("image contains non-finite values")
    return img


def validate_label_map(label: LabelMap | np.ndarray, vocab: ClassVocabulary,
                       shape: tuple[int, int] | None = None) -> None:
    """Raise ``ValidationError`` unless every id is in ``[0, C)`` or the ignore id."""
    ids = label.ids if isinstance(label, LabelMap) else np.asarray(label)
    if shape is not None and tuple(ids.shape) != tuple(shape):
        raise ValidationError(f"label map shape {ids.shape} does not match image shape {tuple(shape)}")
    bad = ((ids < 0) | (ids >= vocab.num_classes)) & (ids != vocab.ignore_id)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise ValidationError(
            f"pixel (y={y}, x={x}) has id {ids[y, x]} outside [0, {vocab.num_classes}) "
            f"and is not ignore_id {vocab.ignore_id}"
        )
