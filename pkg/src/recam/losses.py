"""Cross-entropy, label smoothing and uncertainty-weighted loss combination.

Functions accept plain Python/numpy values or torch tensors; torch inputs
stay differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from recam.errors import ValidationError

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class SmoothingConfig:
    alpha: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValidationError(f"smoothing alpha must be in [0, 1), got {self.alpha}")


def smooth_labels(label, num_classes: int = 5, cfg: SmoothingConfig = SmoothingConfig(), dtype=None):
    """``(1 - alpha) * onehot + alpha / K``; the true class also gets alpha/K.

    An int label gives a numpy vector; a 1-D integer tensor gives a
    ``(batch, K)`` float tensor.
    """
    alpha = cfg.alpha
    if isinstance(label, torch.Tensor):
        if label.numel() and (label.min() < 0 or label.max() >= num_classes):
            raise ValidationError(f"labels must lie in [0, {num_classes})")
        onehot = F.one_hot(label.long(), num_classes).to(dtype or torch.get_default_dtype())
        return onehot * (1.0 - alpha) + alpha / num_classes
    if isinstance(label, bool) or not 0 <= int(label) < num_classes or int(label) != label:
        raise ValidationError(f"label {label!r} not in [0, {num_classes})")
    vec = np.full(num_classes, alpha / num_classes)
    vec[int(label)] += 1.0 - alpha
    return vec


def cross_entropy(scores, target):
    """``-sum(target * log(scores))`` with scores floored at 1e-12 inside the log."""
    if isinstance(scores, torch.Tensor):
        target = torch.as_tensor(target, dtype=scores.dtype)
        return -(target * scores.clamp_min(LOG_FLOOR).log()).sum(-1)
    scores = np.asarray(scores, dtype=float)
    target = np.asarray(target, dtype=float)
    return float(-(target * np.log(np.maximum(scores, LOG_FLOOR))).sum(-1))


def soft_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross-entropy of soft targets against logits."""
    return -(target * F.log_softmax(logits, dim=-1)).sum(-1).mean()


def classification_loss(logits: torch.Tensor, labels: torch.Tensor, alpha: float = 0.0) -> torch.Tensor:
    """Plain cross-entropy when ``alpha == 0``; smoothed soft-target CE otherwise."""
    if alpha == 0.0:
        return F.cross_entropy(logits, labels)
    target = smooth_labels(labels, logits.shape[-1], SmoothingConfig(alpha), dtype=logits.dtype)
    return soft_cross_entropy(logits, target)


def uncertainty_combine(loss1, loss2, log_var1, log_var2):
    """``L1/(2 s1^2) + L2/(2 s2^2) + log(s1^2 s2^2)`` with ``s^2 = exp(log_var)``."""
    if any(isinstance(v, torch.Tensor) for v in (loss1, loss2, log_var1, log_var2)):
        lv1 = torch.as_tensor(log_var1)
        lv2 = torch.as_tensor(log_var2)
        return 0.5 * torch.exp(-lv1) * loss1 + 0.5 * torch.exp(-lv2) * loss2 + lv1 + lv2
    return 0.5 * math.exp(-log_var1) * loss1 + 0.5 * math.exp(-log_var2) * loss2 + log_var1 + log_var2


class UncertaintyParams(nn.Module):
    """Trainable log-variances for the two siamese branch losses."""

    def __init__(self, log_var1: float = 0.0, log_var2: float = 0.0):
        super().__init__()
        self.log_var1 = nn.Parameter(torch.tensor(float(log_var1)))
        self.log_var2 = nn.Parameter(torch.tensor(float(log_var2)))

    def forward(self, loss1: torch.Tensor, loss2: torch.Tensor) -> torch.Tensor:
        return uncertainty_combine(loss1, loss2, self.log_var1, self.log_var2)
