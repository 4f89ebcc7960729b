"""Label-smoothed cross-entropy and the supervised / unlabeled / total losses.

All functions take torch tensors with classes on dim 1, ``(B, C, H, W)``
(an unbatched ``(C, H, W)`` also works), and integer targets ``(B, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import torch
import torch.nn.functional as F

from .core import DEFAULT_IGNORE_ID, ConfigError, NumericError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SmoothingConfig:
    rule: str = "inverse-class-count"  # or "fixed"
    epsilon: float = 0.0

    def resolve(self, num_classes: int) -> float:
        if self.rule == "inverse-class-count":
            return 1.0 / num_classes
        if self.rule == "fixed":
            if not 0 <= self.epsilon < 1:
                raise ConfigError(f"epsilon must be in [0, 1), got {self.epsilon}")
            return float(self.epsilon)
        raise ConfigError(f"unknown smoothing rule {self.rule!r}")


def _smoothed_nll(logp: torch.Tensor, target: torch.Tensor, eps: float, ignore_id: int):
    C = logp.shape[1]
    valid = target != ignore_id
    t = torch.where(valid, target, torch.zeros_like(target)).long()
    lp_t = logp.gather(1, t.unsqueeze(1)).squeeze(1)
    per_pixel = -(1 - eps) * lp_t
    if eps:
        rest = logp.sum(1) - lp_t
        per_pixel = per_pixel - eps / (C - 1) * rest
    n = int(valid.sum())
    if n == 0:
        # keep the graph connected so callers can always backprop
        return (logp.sum() * 0.0), 0
    return per_pixel[valid].sum() / n, n


def smoothed_ce(p: torch.Tensor, target: torch.Tensor, eps: float, ignore_id: int = DEFAULT_IGNORE_ID,
                return_count: bool = False):
    """Mean over non-ignored pixels of the label-smoothed cross-entropy on probabilities ``p``.

    The target class weighs ``1 - eps``, every other class ``eps / (C - 1)``.
    With every pixel ignored the loss is 0 and the count is 0 (no supervision).
    """
    _check_eps(eps, p.shape[1])
    loss, n = _smoothed_nll(torch.log(p.clamp_min(PROB_FLOOR)), target, eps, ignore_id)
    return (loss, n) if return_count else loss


def smoothed_ce_logits(logits: torch.Tensor, target: torch.Tensor, eps: float,
                       ignore_id: int = DEFAULT_IGNORE_ID, return_count: bool = False):
    """``smoothed_ce`` on pre-softmax scores (stable log-softmax path)."""
    _check_eps(eps, logits.shape[1])
    loss, n = _smoothed_nll(F.log_softmax(logits, dim=1), target, eps, ignore_id)
    return (loss, n) if return_count else loss


def _check_eps(eps: float, C: int) -> None:
    if not 0 <= eps < 1:
        raise ConfigError(f"epsilon must be in [0, 1), got {eps}")
    if C < 2:
        raise ConfigError("label smoothing needs at least 2 classes")


def supervised_loss(logits: torch.Tensor, gt: torch.Tensor, ignore_id: int = DEFAULT_IGNORE_ID,
                    from_probs: bool = False) -> torch.Tensor:
    """Plain cross-entropy, mean over non-ignored pixels."""
    if from_probs:
        return smoothed_ce(logits, gt, 0.0, ignore_id)
    return smoothed_ce_logits(logits, gt, 0.0, ignore_id)


def unlabeled_loss(out_fp, out_s1, out_s2, l_e, eps: float, ignore_id: int = DEFAULT_IGNORE_ID,
                   l_e_s1=None, l_e_s2=None, from_probs: bool = False) -> torch.Tensor:
    """Sum of the smoothed losses of the feature-perturbed and both strong branches.

    ``l_e_s1``/``l_e_s2`` are the CutMix-mixed enhanced labels of the strong
    views; they default to ``l_e`` (no mixing).
    """
    f = smoothed_ce if from_probs else smoothed_ce_logits
    return (f(out_fp, l_e, eps, ignore_id)
            + f(out_s1, l_e if l_e_s1 is None else l_e_s1, eps, ignore_id)
            + f(out_s2, l_e if l_e_s2 is None else l_e_s2, eps, ignore_id))


def total_loss(loss_s, loss_u):
    """Average of the supervised and unlabeled losses."""
    for v in (loss_s, loss_u):
        x = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(x):
            raise NumericError(f"non-finite loss component {x}")
    return (loss_s + loss_u) / 2
