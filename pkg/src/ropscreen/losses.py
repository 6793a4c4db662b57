"""Training objectives for the two specialists and the fusion meta-learner."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch.nn import functional as F

EPS = 1e-8


@dataclass(frozen=True)
class FocalConfig:
    """Focusing parameter and per-class balancing weights (normal, mild, severe, other)."""

    gamma_focus: float = 2.0
    alpha_weights: tuple[float, ...] = (0.5, 1.0, 5.0, 1.0)

    def __post_init__(self):
        if self.gamma_focus < 0:
            raise ValueError("gamma_focus must be non-negative")
        if any(not a > 0 for a in self.alpha_weights):
            raise ValueError("alpha weights must be positive")


def focal_loss(probs: torch.Tensor, target: torch.Tensor, cfg: FocalConfig = FocalConfig(),
               reduction: str = "mean") -> torch.Tensor:
    """Class-weighted focal loss on probability rows ``(B, K)``.

    ``p_t`` is clamped at 1e-8 before the log.
    """
    target = target.long()
    alpha = torch.as_tensor(cfg.alpha_weights, dtype=probs.dtype, device=probs.device)
    if alpha.numel() != probs.shape[-1]:
        raise ValueError("alpha_weights length does not match the number of classes")
    p_t = probs.gather(-1, target.unsqueeze(-1)).squeeze(-1).clamp_min(EPS)
    loss = -alpha[target] * (1.0 - p_t).pow(cfg.gamma_focus) * torch.log(p_t)
    return _reduce(loss, reduction)


def deep_supervision_loss(main_logits: torch.Tensor, aux_logits, target: torch.Tensor,
                          lam: float = 0.2, cfg: FocalConfig = FocalConfig()) -> torch.Tensor:
    """Focal loss on the main head plus ``lam`` times the auxiliary heads' focal losses."""
    loss = focal_loss(torch.softmax(main_logits, -1), target, cfg)
    for aux in aux_logits or ():
        loss = loss + lam * focal_loss(torch.softmax(aux, -1), target, cfg)
    return loss


def weighted_bce(logit: torch.Tensor, target: torch.Tensor, w_pos: float = 1.0,
                 reduction: str = "mean") -> torch.Tensor:
    """``-[w_pos * y * log s(x) + (1 - y) * log(1 - s(x))]`` via log-sigmoid."""
    if not w_pos > 0:
        raise ValueError("w_pos must be positive")
    y = target.to(logit.dtype)
    loss = -(w_pos * y * F.logsigmoid(logit) + (1.0 - y) * F.logsigmoid(-logit))
    return _reduce(loss, reduction)


def joint_fusion_loss(diag_logits: torch.Tensor, diag_true: torch.Tensor,
                      plus_logit: torch.Tensor, plus_true: torch.Tensor) -> torch.Tensor:
    """Unweighted sum of 4-class cross-entropy and plus binary cross-entropy."""
    ce = F.cross_entropy(diag_logits, diag_true.long())
    bce = F.binary_cross_entropy_with_logits(plus_logit, plus_true.to(plus_logit.dtype))
    return ce + bce


def positive_weight(labels) -> float:
    """``N_neg / N_pos`` of binary labels."""
    labels = torch.as_tensor(labels).bool()
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("no positive labels")
    return (labels.numel() - n_pos) / n_pos


def _reduce(loss: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")
