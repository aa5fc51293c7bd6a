"""Region-based training loss: soft dice (batch or per-sample) plus BCE, with deep supervision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

BCE_EPS = 1e-7


def default_ds_weights(n_heads: int) -> tuple[float, ...]:
    """Weights 2^-h for head h (h=0 is full resolution), normalized to sum 1."""
    w = np.array([2.0**-h for h in range(n_heads)])
    return tuple(float(x) for x in w / w.sum())


@dataclass(frozen=True)
class LossConfig:
    dice_mode: str = "batch"
    dice_smooth: float = 1e-5
    ds_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.dice_mode not in ("batch", "sample"):
            raise ValueError(f"dice_mode must be 'batch' or 'sample', got {self.dice_mode!r}")
        if self.dice_smooth < 0:
            raise ValueError("dice_smooth must be >= 0")
        if self.ds_weights is not None:
            w = np.asarray(self.ds_weights, dtype=float)
            if w.ndim != 1 or len(w) == 0 or (w < 0).any() or w.sum() <= 0:
                raise ValueError(f"invalid deep-supervision weights {self.ds_weights}")
            object.__setattr__(self, "ds_weights", tuple(float(x) for x in w / w.sum()))

    def weights_for(self, n_heads: int) -> tuple[float, ...]:
        if self.ds_weights is None:
            return default_ds_weights(n_heads)
        if len(self.ds_weights) != n_heads:
            raise ValueError(f"{n_heads} output heads but {len(self.ds_weights)} weights")
        return self.ds_weights


def _safe_ratio(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    # 0/0 -> 0
    zero = den == 0
    return torch.where(zero, torch.zeros_like(num), num / torch.where(zero, torch.ones_like(den), den))


def soft_dice(probs: torch.Tensor, targets: torch.Tensor, mode: str = "batch", smooth: float = 1e-5) -> torch.Tensor:
    """Soft dice over ``(B, R, *spatial)`` tensors, averaged over regions.

    ``batch`` mode pools the sums over the whole minibatch before forming the
    ratio for each region; ``sample`` mode forms one ratio per (sample, region)
    and averages them. The loss is ``1 - soft_dice``.
    """
    if probs.shape != targets.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    targets = targets.to(probs.dtype)
    spatial = tuple(range(2, probs.ndim))
    if mode == "batch":
        dims = (0, *spatial)
    elif mode == "sample":
        dims = spatial
    else:
        raise ValueError(f"unknown dice mode {mode!r}")
    inter = (probs * targets).sum(dim=dims)
    denom = probs.sum(dim=dims) + targets.sum(dim=dims)
    return _safe_ratio(2.0 * inter + smooth, denom + smooth).mean()


def bce(probs: torch.Tensor, targets: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    p = probs.clamp(eps, 1.0 - eps)
    t = targets.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()


class LossTerms(NamedTuple):
    total: torch.Tensor
    dice_term: torch.Tensor
    bce_term: torch.Tensor
    dice: torch.Tensor  # soft dice of the full-resolution head


def combine_head_losses(head_losses: Sequence, weights: Sequence[float]):
    if len(head_losses) != len(weights):
        raise ValueError(f"{len(head_losses)} head losses but {len(weights)} weights")
    return sum(w * l for w, l in zip(weights, head_losses))


def combined_loss_terms(outputs: Sequence[torch.Tensor], targets: Sequence[torch.Tensor],
                        config: LossConfig = LossConfig()) -> LossTerms:
    if len(outputs) != len(targets):
        raise ValueError(f"{len(outputs)} heads but {len(targets)} targets")
    weights = config.weights_for(len(outputs))
    dices = [soft_dice(o, t, config.dice_mode, config.dice_smooth) for o, t in zip(outputs, targets)]
    bces = [bce(o, t) for o, t in zip(outputs, targets)]
    dice_term = combine_head_losses([1.0 - d for d in dices], weights)
    bce_term = combine_head_losses(bces, weights)
    return LossTerms(dice_term + bce_term, dice_term, bce_term, dices[0])


def combined_loss(outputs: Sequence[torch.Tensor], targets: Sequence[torch.Tensor],
                  config: LossConfig = LossConfig()) -> torch.Tensor:
    """Sum over heads of ``w_h * ((1 - soft_dice_h) + bce_h)``."""
    return combined_loss_terms(outputs, targets, config).total
