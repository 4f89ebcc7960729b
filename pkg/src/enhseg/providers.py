"""Foundation-model provider interfaces, self-self attention, and mock providers.

Three roles feed the annotator: a segment proposer (SAM-like), a patch feature
provider living in a joint image-text space (CLIP image encoder with
self-self attention blocks), and a text embedder.  Real adapters import their
backends lazily; the mock providers are deterministic and need no weights.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage

from .core import (
    ClassVocabulary,
    ConfigError,
    FeatureMap,
    NumericError,
    ProviderError,
    SegmentMask,
    ValidationError,
    as_image,
)

log = logging.getLogger(__name__)

PLACEHOLDER = "{classlabel}"
DEFAULT_TEMPLATE = "a photo of a {classlabel}"
PROJECTIONS = ("query", "key", "value")


@runtime_checkable
class SegmentProposer(Protocol):
    name: str
    thread_safe: bool

    def propose(self, image: np.ndarray) -> list[SegmentMask]: ...


@runtime_checkable
class PatchFeatureProvider(Protocol):
    name: str
    thread_safe: bool
    dim: int

    def native_grid(self, image: np.ndarray) -> tuple[int, int]: ...

    def features(self, image: np.ndarray) -> FeatureMap: ...


@runtime_checkable
class TextEmbedder(Protocol):
    name: str
    dim: int

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def sort_segments(masks: Sequence[SegmentMask]) -> list[SegmentMask]:
    """Descending score, ties broken by descending area."""
    return sorted(masks, key=lambda m: (-m.score, -m.area))


# ---------------------------------------------------------------------------
# self-self attention


@dataclass(frozen=True)
class AttentionWeights:
    """Projection weights of one attention block (``y = x @ w + b`` convention).

    ``ln_weight``/``ln_bias`` describe the pre-attention layer norm; leave them
    ``None`` to skip normalisation.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray
    b_q: np.ndarray | None = None
    b_k: np.ndarray | None = None
    b_v: np.ndarray | None = None
    b_out: np.ndarray | None = None
    num_heads: int = 1
    ln_weight: np.ndarray | None = None
    ln_bias: np.ndarray | None = None
    ln_eps: float = 1e-5

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.num_heads

    def project(self, tokens: np.ndarray, which: str) -> np.ndarray:
        w, b = {
            "query": (self.w_q, self.b_q),
            "key": (self.w_k, self.b_k),
            "value": (self.w_v, self.b_v),
        }[which]
        y = tokens @ w
        return y if b is None else y + b

    def pre_norm(self, tokens: np.ndarray) -> np.ndarray:
        if self.ln_weight is None:
            return tokens
        mu = tokens.mean(axis=-1, keepdims=True)
        var = tokens.var(axis=-1, keepdims=True)
        out = (tokens - mu) / np.sqrt(var + self.ln_eps) * self.ln_weight
        return out if self.ln_bias is None else out + self.ln_bias

    def out(self, tokens: np.ndarray) -> np.ndarray:
        y = tokens @ self.w_out
        return y if self.b_out is None else y + self.b_out


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, num_heads, d // num_heads).transpose(1, 0, 2)


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def self_self_weights(tokens: np.ndarray, weights: AttentionWeights, projection: str = "query",
                      temperature: float | None = None) -> np.ndarray:
    """Attention matrix ``softmax(p̂ p̂ᵀ / temperature)`` per head, shape ``(heads, n, n)``.

    ``p̂`` is the L2-normalised projection of the tokens onto ``projection``;
    ``temperature`` defaults to ``1 / sqrt(head_dim)``.
    """
    if projection not in PROJECTIONS:
        raise ConfigError(f"projection must be one of {PROJECTIONS}, got {projection!r}")
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValidationError(f"token matrix must be (n_tokens >= 1, d_model), got {tokens.shape}")
    if not np.isfinite(tokens).all():
        raise NumericError("token matrix contains non-finite values")
    if temperature is None:
        temperature = 1.0 / math.sqrt(weights.head_dim)
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    p = _split_heads(weights.project(tokens, projection), weights.num_heads)
    p = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)
    return _softmax(p @ p.transpose(0, 2, 1) / temperature)


def self_self_attention(tokens: np.ndarray, weights: AttentionWeights, projection: str = "query",
                        temperature: float | None = None) -> np.ndarray:
    """Self-self attention: weights from ``projection`` against itself, applied to values.

    Returns the concatenated per-head outputs, shape ``(n, heads * head_dim)``,
    before the output projection.
    """
    attn = self_self_weights(tokens, weights, projection, temperature)
    v = _split_heads(weights.project(np.asarray(tokens, dtype=np.float64), "value"), weights.num_heads)
    out = attn @ v
    return out.transpose(1, 0, 2).reshape(tokens.shape[0], -1)


def gem_tokens(tokens: np.ndarray, blocks: Sequence[AttentionWeights], temperature: float | None = None,
               projections: Sequence[str] = PROJECTIONS) -> np.ndarray:
    """Run the self-self attention path through ``blocks``.

    Each block adds the qq/kk/vv ensemble mean (after its output projection)
    to the residual stream; the MLP of the original block is skipped.
    """
    x = np.asarray(tokens, dtype=np.float64)
    for blk in blocks:
        h = blk.pre_norm(x)
        ens = np.mean([self_self_attention(h, blk, p, temperature) for p in projections], axis=0)
        x = x + blk.out(ens)
    return x


def resample_bilinear(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of an ``(h, w, D)`` grid to ``size`` (half-pixel centres)."""
    import torch
    import torch.nn.functional as F

    g = torch.from_numpy(np.ascontiguousarray(grid, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(g, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def gem_feature_map(patch_tokens: np.ndarray, blocks: Sequence[AttentionWeights],
                    projection: np.ndarray | None, out_size: tuple[int, int],
                    temperature: float | None = None,
                    final_norm: Callable[[np.ndarray], np.ndarray] | None = None) -> FeatureMap:
    """Patch tokens ``(h', w', d_model)`` -> joint-space FeatureMap at ``out_size``."""
    patch_tokens = np.asarray(patch_tokens, dtype=np.float64)
    h, w, d = patch_tokens.shape
    x = gem_tokens(patch_tokens.reshape(h * w, d), blocks, temperature)
    if final_norm is not None:
        x = final_norm(x)
    if projection is not None:
        x = x @ projection
    return FeatureMap(resample_bilinear(x.reshape(h, w, -1), out_size))


def build_text_embeddings(vocab: ClassVocabulary, template: str, embedder: TextEmbedder) -> list[np.ndarray]:
    """One embedding per class, in vocabulary order, from the prompted class names."""
    if template.count(PLACEHOLDER) != 1:
        raise ConfigError(f"template must contain exactly one {PLACEHOLDER} placeholder: {template!r}")
    prompts = [template.replace(PLACEHOLDER, name) for name in vocab.names]
    vecs = [np.asarray(v, dtype=np.float64) for v in embedder.embed(prompts)]
    if len(vecs) != len(prompts):
        raise ProviderError(f"text embedder returned {len(vecs)} vectors for {len(prompts)} prompts")
    for p, v in zip(prompts, vecs):
        if not np.isfinite(v).all():
            raise NumericError(f"non-finite text embedding for {p!r}")
    return vecs


# ---------------------------------------------------------------------------
# mock providers


def white_balance(image: np.ndarray, prototypes: np.ndarray, iters: int = 5) -> np.ndarray:
    """Per-channel gains fitted so pixels land on their nearest prototype.

    Alternates nearest-prototype assignment with a least-squares gain update,
    starting from a median gray-world estimate.
    """
    x = image.reshape(-1, 3).astype(np.float64)
    m = np.median(x, axis=0)
    g = m.mean() / np.maximum(m, 1e-6)
    for _ in range(iters):
        d2 = (((x * g)[:, None, :] - prototypes[None]) ** 2).sum(-1)
        target = prototypes[d2.argmin(1)]
        g = (x * target).sum(0) / np.maximum((x * x).sum(0), 1e-12)
    return (image * g).astype(image.dtype)


def _nearest_prototype(image: np.ndarray, prototypes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((image[:, :, None, :] - prototypes[None, None]) ** 2).sum(-1)
    return d2.argmin(-1), d2


class MockSegmentProposer:
    """Proposes connected regions of pixels sharing a nearest colour prototype.

    ``prototypes`` is ``(K, 3)`` RGB in ``[0, 1]``.  The score of a segment is
    its mean assignment margin, so the ordering is deterministic.
    """

    thread_safe = True

    def __init__(self, prototypes, min_area: int = 4, white_balance: bool = True, name: str = "mock-proposer"):
        self.prototypes = np.asarray(prototypes, dtype=np.float64)
        self.min_area = min_area
        self.white_balance = white_balance
        self.name = name

    def propose(self, image):
        img = as_image(image).astype(np.float64)
        if self.white_balance:
            img = white_balance(img, self.prototypes)
        assign, d2 = _nearest_prototype(img, self.prototypes)
        d2s = np.sort(d2, axis=-1)
        margin = d2s[..., 1] - d2s[..., 0] if d2.shape[-1] > 1 else np.ones(assign.shape)
        masks = []
        for k in range(len(self.prototypes)):
            comp, n = ndimage.label(assign == k)
            for j in range(1, n + 1):
                bits = comp == j
                if bits.sum() < self.min_area:
                    continue
                masks.append(SegmentMask(bits, score=float(np.round(margin[bits].mean(), 12))))
        return sort_segments(masks)


class MockPatchFeatureProvider:
    """Colour-prototype patch encoder followed by self-self attention blocks.

    Each patch token is the soft prototype assignment of its pixels, mapped
    through ``token_vectors`` (``(K, d_model)``).  Blocks are seeded random
    orthogonal query/key projections with identity values, so regions of the
    same colour cluster while staying aligned with the mock text space.
    """

    thread_safe = True

    def __init__(self, prototypes, token_vectors, patch: int = 4, n_blocks: int = 2,
                 temperature: float | None = None, sharpness: float = 50.0, seed: int = 0,
                 out_scale: float = 0.5, white_balance: bool = True, name: str = "mock-gem"):
        self.prototypes = np.asarray(prototypes, dtype=np.float64)
        self.token_vectors = np.asarray(token_vectors, dtype=np.float64)
        self.patch = patch
        self.temperature = temperature
        self.sharpness = sharpness
        self.white_balance = white_balance
        self.name = name
        d = self.token_vectors.shape[1]
        self.dim = d
        rng = np.random.default_rng(seed)

        def ortho():
            q, _ = np.linalg.qr(rng.standard_normal((d, d)))
            return q

        self.blocks = [
            AttentionWeights(w_q=ortho(), w_k=ortho(), w_v=np.eye(d), w_out=out_scale * np.eye(d))
            for _ in range(n_blocks)
        ]

    def native_grid(self, image):
        h, w = np.asarray(image).shape[:2]
        return -(-h // self.patch), -(-w // self.patch)

    def patch_tokens(self, image) -> np.ndarray:
        img = as_image(image).astype(np.float64)
        if self.white_balance:
            img = white_balance(img, self.prototypes)
        _, d2 = _nearest_prototype(img, self.prototypes)
        soft = _softmax(-self.sharpness * d2, axis=-1)
        gh, gw = self.native_grid(img)
        h, w = img.shape[:2]
        pad = ((0, gh * self.patch - h), (0, gw * self.patch - w), (0, 0))
        soft = np.pad(soft, pad, mode="edge")
        soft = soft.reshape(gh, self.patch, gw, self.patch, -1).mean(axis=(1, 3))
        return soft @ self.token_vectors

    def features(self, image):
        img = as_image(image)
        return gem_feature_map(self.patch_tokens(img), self.blocks, None, img.shape[:2], self.temperature)


class MockTextEmbedder:
    """Maps a prompt to the vector of the class name it contains (longest match wins)."""

    def __init__(self, vectors: dict[str, np.ndarray], name: str = "mock-text"):
        self.vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
        self.dim = len(next(iter(self.vectors.values())))
        self.name = name
        self.calls: list[list[str]] = []

    def embed(self, texts):
        self.calls.append(list(texts))
        out = []
        for t in texts:
            hits = [k for k in self.vectors if k in t]
            if not hits:
                raise ProviderError(f"mock embedder knows no class in {t!r}")
            out.append(self.vectors[max(hits, key=len)].copy())
        return out


def mock_providers(prototypes, class_names: Sequence[str], dim: int = 32, seed: int = 0, **kwargs):
    """Matched (proposer, feature provider, text embedder) over one colour palette.

    Prototype ``k`` belongs to class ``k``; class vectors are seeded random
    orthonormal rows, so pooled features of a pure region match exactly one
    class.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if len(prototypes) != len(class_names):
        raise ConfigError("need exactly one prototype per class")
    if dim < len(class_names):
        raise ConfigError(f"mock dim {dim} must be >= number of classes {len(class_names)}")
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((dim, len(class_names))))
    vecs = q.T
    proposer = MockSegmentProposer(prototypes, white_balance=kwargs.get("white_balance", True))
    features = MockPatchFeatureProvider(prototypes, vecs, seed=seed, **kwargs)
    text = MockTextEmbedder(dict(zip(class_names, vecs)))
    return proposer, features, text


# ---------------------------------------------------------------------------
# real adapters


def masks_from_sam_records(records: Sequence[dict], min_area: int = 1) -> list[SegmentMask]:
    """Convert automatic-mask-generator records (``segmentation``, ``predicted_iou``) to masks."""
    out = []
    for r in records:
        bits = np.asarray(r["segmentation"], dtype=bool)
        if bits.sum() < max(min_area, 1):
            continue
        out.append(SegmentMask(bits, score=float(r.get("predicted_iou", r.get("score", 1.0)))))
    return sort_segments(out)


class SamProposer:
    """Automatic whole-image proposals from a ``segment_anything`` checkpoint."""

    thread_safe = False

    def __init__(self, checkpoint: str, model_type: str = "vit_h", device: str = "cpu", **generator_kwargs):
        try:
            from segment_anything import SamAutomaticMaskGenerator, sam_model_registry
        except ImportError as e:
            raise ProviderError("segment_anything is not installed") from e
        try:
            sam = sam_model_registry[model_type](checkpoint=checkpoint).to(device)
        except Exception as e:  # noqa: BLE001
            raise ProviderError(f"failed to load SAM checkpoint {checkpoint}: {e}") from e
        self._gen = SamAutomaticMaskGenerator(sam, output_mode="binary_mask", **generator_kwargs)
        self.name = f"sam-{model_type}"

    def propose(self, image):
        img = (np.clip(as_image(image), 0, 1) * 255).round().astype(np.uint8)
        try:
            records = self._gen.generate(img)
        except Exception as e:  # noqa: BLE001
            raise ProviderError(f"SAM mask generation failed: {e}") from e
        return masks_from_sam_records(records)


CLIP_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
CLIP_STD = np.array([0.26862954, 0.26130258, 0.27577711])


def _np(t) -> np.ndarray:
    return t.detach().cpu().double().numpy()


class ClipGemFeatureProvider:
    """Patch features from a ``transformers`` CLIP model with self-self attention blocks.

    The last ``n_gem_blocks`` encoder layers are replayed as a parallel
    self-self attention path on their own weights; the resulting patch tokens
    pass through the post layer norm and visual projection.
    """

    thread_safe = False

    def __init__(self, model, n_gem_blocks: int = 4, input_size: int | None = None,
                 temperature: float | None = None, name: str = "clip-gem"):
        vm = model.vision_model
        cfg = model.config.vision_config
        self.model = model.eval()
        self.input_size = input_size or cfg.image_size
        self.patch = cfg.patch_size
        self.temperature = temperature
        self.dim = model.config.projection_dim
        self.name = name
        layers = vm.encoder.layers
        if not 1 <= n_gem_blocks <= len(layers):
            raise ConfigError(f"n_gem_blocks must be in [1, {len(layers)}]")
        self.start = len(layers) - n_gem_blocks
        self.blocks = []
        for layer in layers[self.start:]:
            a = layer.self_attn
            self.blocks.append(AttentionWeights(
                w_q=_np(a.q_proj.weight).T, b_q=_np(a.q_proj.bias),
                w_k=_np(a.k_proj.weight).T, b_k=_np(a.k_proj.bias),
                w_v=_np(a.v_proj.weight).T, b_v=_np(a.v_proj.bias),
                w_out=_np(a.out_proj.weight).T, b_out=_np(a.out_proj.bias),
                num_heads=cfg.num_attention_heads,
                ln_weight=_np(layer.layer_norm1.weight), ln_bias=_np(layer.layer_norm1.bias),
                ln_eps=layer.layer_norm1.eps,
            ))
        post = vm.post_layernorm
        self._post = AttentionWeights(w_q=np.eye(1), w_k=np.eye(1), w_v=np.eye(1), w_out=np.eye(1),
                                      ln_weight=_np(post.weight), ln_bias=_np(post.bias), ln_eps=post.eps)
        self._proj = _np(model.visual_projection.weight).T

    @classmethod
    def from_pretrained(cls, name_or_path: str, **kwargs):
        try:
            from transformers import CLIPModel
            model = CLIPModel.from_pretrained(name_or_path)
        except Exception as e:  # noqa: BLE001
            raise ProviderError(f"failed to load CLIP model {name_or_path}: {e}") from e
        return cls(model, **kwargs)

    def native_grid(self, image):
        g = self.input_size // self.patch
        return g, g

    def features(self, image):
        import torch
        import torch.nn.functional as F

        img = as_image(image)
        x = torch.from_numpy(((img - CLIP_MEAN) / CLIP_STD).astype(np.float32)).permute(2, 0, 1)[None]
        x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bicubic", align_corners=False)
        try:
            with torch.no_grad():
                out = self.model.vision_model(pixel_values=x, output_hidden_states=True,
                                              interpolate_pos_encoding=True)
        except Exception as e:  # noqa: BLE001
            raise ProviderError(f"CLIP forward failed: {e}") from e
        hidden = _np(out.hidden_states[self.start][0])[1:]  # drop CLS
        g = self.native_grid(img)
        return gem_feature_map(hidden.reshape(g[0], g[1], -1), self.blocks, self._proj, img.shape[:2],
                               self.temperature, final_norm=self._post.pre_norm)


class ClipTextEmbedder:
    """Text tower of a ``transformers`` CLIP model; ``tokenizer`` is any HF-compatible tokenizer."""

    def __init__(self, model, tokenizer, name: str = "clip-text"):
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.dim = model.config.projection_dim
        self.name = name

    @classmethod
    def from_pretrained(cls, name_or_path: str):
        try:
            from transformers import CLIPModel, CLIPTokenizer
            return cls(CLIPModel.from_pretrained(name_or_path), CLIPTokenizer.from_pretrained(name_or_path))
        except Exception as e:  # noqa: BLE001
            raise ProviderError(f"failed to load CLIP text model {name_or_path}: {e}") from e

    def embed(self, texts):
        import torch

        batch = self.tokenizer(list(texts), padding=True, return_tensors="pt")
        with torch.no_grad():
            out = self.model.get_text_features(**batch)
        if not isinstance(out, torch.Tensor):
            out = out.pooler_output
        return [row for row in _np(out)]
