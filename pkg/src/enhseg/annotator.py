"""Zero-shot pseudo-labelling: pool segment features, score classes, paint a label map."""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import (
    ClassVocabulary,
    DataError,
    FeatureMap,
    LabelMap,
    NumericError,
    Provenance,
    ProviderError,
    SegmentMask,
    ValidationError,
    as_image,
)
from .providers import (
    PatchFeatureProvider,
    SegmentProposer,
    TextEmbedder,
    build_text_embeddings,
    resample_bilinear,
)

log = logging.getLogger(__name__)

UNASSIGNED = -1


@dataclass(frozen=True)
class SegmentAnnotation:
    segment_index: int
    similarities: np.ndarray
    assigned_class: int  # UNASSIGNED when no class clears the threshold
    area: int

    @property
    def is_assigned(self) -> bool:
        return self.assigned_class != UNASSIGNED


def pool_segment_embedding(features: FeatureMap | np.ndarray, mask: SegmentMask | np.ndarray) -> np.ndarray:
    """Mean feature vector over the pixels of ``mask``."""
    I = features.values if isinstance(features, FeatureMap) else np.asarray(features, dtype=np.float64)
    S = mask.bits if isinstance(mask, SegmentMask) else np.asarray(mask).astype(bool)
    if I.shape[:2] != S.shape:
        raise ValidationError(f"feature map grid {I.shape[:2]} does not match mask {S.shape}")
    n = S.sum()
    if n == 0:
        raise ValidationError("degenerate (empty) segment mask")
    return I[S].sum(axis=0) / n


def class_similarities(f: np.ndarray, text_embeddings: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Cosine similarity of ``f`` to each class embedding."""
    f = np.asarray(f, dtype=np.float64)
    T = np.asarray(text_embeddings, dtype=np.float64)
    if T.ndim != 2 or T.shape[1] != f.shape[0]:
        raise ValidationError(f"class embeddings {T.shape} incompatible with segment embedding {f.shape}")
    nf = np.linalg.norm(f)
    nt = np.linalg.norm(T, axis=1)
    if nf == 0 or (nt == 0).any():
        raise NumericError("zero-norm vector in cosine similarity")
    return np.clip(T @ f / (nt * nf), -1.0, 1.0)


def assign_class(similarities: np.ndarray, sim_threshold: float) -> int:
    """Argmax class (lowest index on ties) if its similarity reaches the threshold."""
    c = int(np.argmax(similarities))
    return c if similarities[c] >= sim_threshold else UNASSIGNED


def paint_segments(shape: tuple[int, int], masks: Sequence[SegmentMask],
                   annotations: Sequence[SegmentAnnotation], vocab: ClassVocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Paint assigned segments largest-first so nested finer segments win.

    Unassigned segments do not paint; every pixel left untouched receives the
    vocabulary's unassigned id.  Returns ``(ids, painted)``.
    """
    ids = np.full(shape, vocab.unassigned_id, dtype=np.int64)
    painted = np.zeros(shape, dtype=bool)
    order = sorted(range(len(masks)), key=lambda k: (-masks[k].area, k))
    for k in order:
        a = annotations[k]
        if a.is_assigned:
            ids[masks[k].bits] = a.assigned_class
            painted |= masks[k].bits
    return ids, painted


@dataclass(frozen=True)
class ImageAnnotation:
    label: LabelMap
    segments: list[SegmentAnnotation]
    painted: np.ndarray

    @property
    def coverage(self) -> float:
        """Fraction of pixels claimed by an assigned segment."""
        return float(self.painted.mean())


def annotate_image(image, proposer: SegmentProposer, features: PatchFeatureProvider,
                   text_embeddings: Sequence[np.ndarray], vocab: ClassVocabulary,
                   sim_threshold: float = 0.0) -> ImageAnnotation:
    img = as_image(image)
    T = np.asarray(text_embeddings, dtype=np.float64)
    if T.shape[0] != vocab.num_classes:
        raise ValidationError(f"{T.shape[0]} class embeddings for {vocab.num_classes} classes")
    if T.shape[1] != features.dim:
        raise ValidationError(f"text dim {T.shape[1]} != feature dim {features.dim}")
    shape = img.shape[:2]
    masks = proposer.propose(img)
    if not masks:
        log.warning("proposer returned no segments; label map is fully unassigned")
        return ImageAnnotation(LabelMap(np.full(shape, vocab.unassigned_id), Provenance.PSEUDO), [],
                               np.zeros(shape, dtype=bool))
    fmap = features.features(img)
    if fmap.shape[:2] != shape:
        fmap = FeatureMap(resample_bilinear(fmap.values, shape))
    anns = []
    for k, m in enumerate(masks):
        if m.shape != shape:
            raise ValidationError(f"segment {k} has shape {m.shape}, image is {shape}")
        sims = class_similarities(pool_segment_embedding(fmap, m), T)
        anns.append(SegmentAnnotation(k, sims, assign_class(sims, sim_threshold), m.area))
    ids, painted = paint_segments(shape, masks, anns, vocab)
    return ImageAnnotation(LabelMap(ids, Provenance.PSEUDO), anns, painted)


def annotate_dataset(ids: Sequence[str], load_image: Callable[[str], np.ndarray],
                     proposer: SegmentProposer, features: PatchFeatureProvider, embedder: TextEmbedder,
                     vocab: ClassVocabulary, out_dir: str | Path, template: str, sim_threshold: float = 0.0,
                     workers: int = 1, checkpoints: dict | None = None) -> dict:
    """Annotate every id, persisting one pseudo-label file per image plus a manifest.

    Per-image failures are logged, skipped and recorded in the manifest.
    """
    from . import dataio

    out_dir = Path(out_dir)
    T = build_text_embeddings(vocab, template, embedder)
    locks = {id(p): threading.Lock() for p in (proposer, features) if not getattr(p, "thread_safe", False)}

    class _Serial:
        def __init__(self, inner):
            self.inner = inner
            self.lock = locks.get(id(inner))
            self.dim = getattr(inner, "dim", None)

        def __getattr__(self, name):
            attr = getattr(self.inner, name)
            if not callable(attr) or self.lock is None:
                return attr

            def call(*a, **kw):
                with self.lock:
                    return attr(*a, **kw)
            return call

    prop, feat = _Serial(proposer), _Serial(features)

    def one(image_id: str) -> tuple[str, dict]:
        try:
            img = load_image(image_id)
            res = annotate_image(img, prop, feat, T, vocab, sim_threshold)
            dataio.save_pseudo(out_dir, image_id, res.label)
            n_assigned = sum(a.is_assigned for a in res.segments)
            return image_id, {"status": "ok", "n_segments": len(res.segments), "n_assigned": n_assigned,
                              "coverage": res.coverage}
        except (DataError, ProviderError, ValidationError, NumericError, OSError) as e:
            log.error("annotation failed for %s: %s", image_id, e)
            return image_id, {"status": "error", "error": f"{type(e).__name__}: {e}"}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = dict(pool.map(one, ids))
    else:
        results = dict(one(i) for i in ids)
    manifest = dataio.PseudoManifest(
        vocabulary=vocab.to_dict(),
        sim_threshold=float(sim_threshold),
        template=template,
        providers={"proposer": proposer.name, "features": features.name, "text": embedder.name},
        checkpoints=dict(checkpoints or {}),
        images={i: results[i] for i in ids},
    )
    dataio.write_manifest(out_dir, manifest)
    return manifest.to_dict()
