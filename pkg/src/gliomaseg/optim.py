"""SGD with Nesterov momentum and the polynomial learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    poly_power: float = 0.9
    total_steps: int = 1000
    weight_decay: float = 3e-5
    grad_clip: float | None = 12.0

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")


def poly_lr(step: int, total_steps: int, lr0: float = 0.01, power: float = 0.9) -> float:
    """``lr0 * (1 - step / total_steps) ** power``."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * (1.0 - step / total_steps) ** power


@dataclass
class SGDState:
    velocities: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def sgd_nesterov_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: SGDState,
                      lr: float, momentum: float, nesterov: bool = True, weight_decay: float = 0.0) -> SGDState:
    """In-place update of ``params``.

    Nesterov form: ``v <- m*v - lr*g`` then ``w <- w + m*v - lr*g``.
    Without Nesterov: ``w <- w + v``. Momentum 0 is plain gradient descent.
    """
    with torch.no_grad():
        for name, w in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != w.shape:
                raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != parameter {tuple(w.shape)}")
            if weight_decay:
                g = g + weight_decay * w
            v = state.velocities.get(name)
            if v is None:
                v = torch.zeros_like(w)
            elif v.shape != w.shape:
                raise ValueError(f"{name}: velocity shape {tuple(v.shape)} != parameter {tuple(w.shape)}")
            v = momentum * v - lr * g
            state.velocities[name] = v
            if nesterov:
                w.add_(momentum * v - lr * g)
            else:
                w.add_(v)
    state.step += 1
    return state


class NesterovSGD:
    """Thin stateful wrapper over :func:`sgd_nesterov_step` for ``nn.Module`` parameters."""

    def __init__(self, model: torch.nn.Module, config: OptimizerConfig):
        self.model = model
        self.config = config
        self.state = SGDState()

    def lr_at(self, step: int) -> float:
        c = self.config
        return poly_lr(step, c.total_steps, c.lr0, c.poly_power)

    def step(self, lr: float) -> None:
        params = {n: p for n, p in self.model.named_parameters() if p.requires_grad}
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(list(p for p in params.values() if p.grad is not None),
                                           self.config.grad_clip)
        sgd_nesterov_step(params, grads, self.state, lr, self.config.momentum,
                          self.config.nesterov, self.config.weight_decay)

    def zero_grad(self) -> None:
        for p in self.model.parameters():
            p.grad = None
