"""Enhanced labels: confident weak-view predictions override zero-shot pseudo-labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import DEFAULT_IGNORE_ID, ConfidenceMap, ConfigError, LabelMap, Provenance, ValidationError


@dataclass(frozen=True)
class EnhancementConfig:
    tau: float = 0.7

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")


def _split(p_w, l_p, tau: float, class_axis: int, ignore_id: int):
    conf, arg = p_w.max(dim=class_axis)
    if conf.shape != l_p.shape:
        raise ValidationError(f"prediction grid {tuple(conf.shape)} misaligned with pseudo-label {tuple(l_p.shape)}")
    from_pseudo = conf < tau
    return arg, from_pseudo


def enhance_labels(p_w, l_p, tau: float = 0.7, ignore_id: int = DEFAULT_IGNORE_ID, class_axis: int = -1):
    """Per pixel: the pseudo-label where ``max_c p_w < tau``, else ``argmax_c p_w``.

    ``p_w`` holds probabilities with classes along ``class_axis`` (default
    channel-last, i.e. a ``(H, W, C)`` ConfidenceMap); torch tensors may be
    batched ``(B, C, H, W)`` with ``class_axis=1``.  Argmax ties go to the
    lowest class index.  Returns the same container type as ``l_p``.
    """
    if isinstance(p_w, ConfidenceMap):
        p_w = p_w.probs
    as_labelmap = isinstance(l_p, LabelMap)
    lp = l_p.ids if as_labelmap else l_p
    is_np = not isinstance(lp, torch.Tensor)
    pt = torch.as_tensor(np.array(p_w) if not isinstance(p_w, torch.Tensor) else p_w)
    lt = torch.as_tensor(np.array(lp)) if is_np else lp
    with torch.no_grad():
        arg, from_pseudo = _split(pt, lt, tau, class_axis, ignore_id)
        out = torch.where(from_pseudo, lt.to(arg.dtype), arg)
    if as_labelmap:
        return LabelMap(out.numpy(), Provenance.ENHANCED)
    return out.numpy() if is_np else out


def enhancement_stats(p_w, l_p, tau: float = 0.7, ignore_id: int = DEFAULT_IGNORE_ID, class_axis: int = -1,
                      valid=None) -> dict:
    """Fractions of pixels taking the pseudo branch, the model branch, or ending up ignored.

    A pixel counts as ignored when the pseudo branch selects an ignore id;
    the three fractions partition the (valid) pixels.
    """
    if isinstance(p_w, ConfidenceMap):
        p_w = p_w.probs
    lp = l_p.ids if isinstance(l_p, LabelMap) else l_p
    pt = p_w if isinstance(p_w, torch.Tensor) else torch.as_tensor(np.array(p_w))
    lt = lp if isinstance(lp, torch.Tensor) else torch.as_tensor(np.array(lp))
    with torch.no_grad():
        _, from_pseudo = _split(pt, lt, tau, class_axis, ignore_id)
        ign = from_pseudo & (lt == ignore_id)
        if valid is None:
            keep = torch.ones_like(from_pseudo)
        else:
            keep = torch.as_tensor(np.array(valid) if not isinstance(valid, torch.Tensor) else valid).bool()
        n = int(keep.sum())
        if n == 0:
            return {"frac_from_pseudo": 0.0, "frac_from_model": 0.0, "frac_ignore": 0.0}
        n_ign = int((ign & keep).sum())
        n_pseudo = int((from_pseudo & keep).sum()) - n_ign
        n_model = n - n_pseudo - n_ign
    return {"frac_from_pseudo": n_pseudo / n, "frac_from_model": n_model / n, "frac_ignore": n_ign / n}
