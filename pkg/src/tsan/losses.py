"""Dual-supervised training objective.

``Loss_a`` pulls the intermediate frame toward the initial-encode label,
``Loss_g`` pulls the final output toward the raw frame, and the total is
their weighted sum.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .numcore import ContractError


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    beta: float = 0.8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class LossReport:
    loss_a: float
    loss_g: float
    total: float
    alpha: float
    beta: float

    def as_dict(self) -> dict:
        return {"loss_a": self.loss_a, "loss_g": self.loss_g, "total": self.total,
                "alpha": self.alpha, "beta": self.beta}


def _batch_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() <= 2:
        return ((pred - target) ** 2).mean()
    per_item = ((pred - target) ** 2).flatten(1).mean(dim=1)
    return per_item.mean()


def loss_auxiliary(h_re: torch.Tensor, y_init: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-frame MSE between H_re and the initial-encode label."""
    return _batch_mse(h_re, y_init)


def loss_global(y_re: torch.Tensor, y_raw: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-frame MSE between Y_re and the raw frame."""
    return _batch_mse(y_re, y_raw)


def loss_total(loss_a, loss_g, cfg: LossConfig = LossConfig()):
    """``alpha * loss_a + beta * loss_g``.

    Works on tensors (returns a differentiable tensor) or plain floats
    (returns a :class:`LossReport`).
    """
    if isinstance(loss_a, torch.Tensor) or isinstance(loss_g, torch.Tensor):
        return cfg.alpha * loss_a + cfg.beta * loss_g
    return LossReport(float(loss_a), float(loss_g), cfg.alpha * float(loss_a) + cfg.beta * float(loss_g),
                      cfg.alpha, cfg.beta)


def report(loss_a: torch.Tensor | None, loss_g: torch.Tensor, cfg: LossConfig) -> LossReport:
    a = 0.0 if loss_a is None else float(loss_a.detach())
    g = float(loss_g.detach())
    return LossReport(a, g, cfg.alpha * a + cfg.beta * g, cfg.alpha, cfg.beta)
