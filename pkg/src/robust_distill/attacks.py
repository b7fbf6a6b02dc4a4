"""L-infinity gradient-sign attacks (FGSM, PGD)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .models import ModelSpec, forward

LossFn = Callable[[torch.Tensor], torch.Tensor]


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Attack radius and schedule, all in pixel units.

    ``step_size=None`` resolves to ``epsilon / 4``.
    """

    epsilon: float = 4 / 255
    steps: int = 10
    step_size: Optional[float] = None
    random_start: bool = True
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / 4)
        if self.clip_max <= self.clip_min:
            raise ValueError("clip_max must exceed clip_min")
        if not 0 <= self.epsilon <= self.clip_max - self.clip_min:
            raise ValueError(f"epsilon {self.epsilon} outside [0, {self.clip_max - self.clip_min}]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and self.step_size <= 0 and self.epsilon > 0:
            raise ValueError("step_size must be > 0 when steps > 0")

    @classmethod
    def fgsm(cls, epsilon: float) -> "AttackConfig":
        return cls(epsilon=epsilon, steps=1, step_size=epsilon, random_start=False)

    def to_dict(self) -> dict:
        return asdict(self)


def _ce_loss(params, spec, y):
    def loss(x):
        return F.cross_entropy(forward(params, spec, x), y)
    return loss


def _input_grad(loss_fn: LossFn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        (grad,) = torch.autograd.grad(loss_fn(x), x)
    if not torch.isfinite(grad).all():
        raise AttackError("non-finite input gradient; model parameters may have diverged")
    return grad


def fgsm(params, spec: ModelSpec, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig,
         loss_fn: Optional[LossFn] = None) -> torch.Tensor:
    """Single full-radius sign step: ``clip(x + eps * sign(grad))``."""
    x = x.detach()
    if cfg.epsilon == 0:
        return x.clone()
    loss_fn = loss_fn or _ce_loss(params, spec, y)
    grad = _input_grad(loss_fn, x)
    return torch.clamp(x + cfg.epsilon * grad.sign(), cfg.clip_min, cfg.clip_max)


def pgd(params, spec: ModelSpec, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig,
        generator: Optional[torch.Generator] = None, loss_fn: Optional[LossFn] = None,
        init_noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Projected sign-gradient ascent inside the eps-ball intersected with the pixel box.

    ``init_noise`` (uniform in [-1, 1], shape of ``x``) overrides the random
    start draw, which lets callers keep results independent of batching.
    """
    x = x.detach()
    eps = cfg.epsilon
    if eps == 0:
        return x.clone()
    loss_fn = loss_fn or _ce_loss(params, spec, y)
    lo = torch.clamp(x - eps, min=cfg.clip_min)
    hi = torch.clamp(x + eps, max=cfg.clip_max)
    x_adv = x.clone()
    if cfg.random_start:
        if init_noise is None:
            init_noise = 2 * torch.rand(x.shape, generator=generator, dtype=x.dtype) - 1
        x_adv = torch.minimum(torch.maximum(x + eps * init_noise.to(x.dtype), lo), hi)
    for _ in range(cfg.steps):
        grad = _input_grad(loss_fn, x_adv)
        x_adv = torch.minimum(torch.maximum(x_adv + cfg.step_size * grad.sign(), lo), hi)
    return x_adv.detach()


def attack(params, spec, x, y, cfg: AttackConfig, generator=None, loss_fn=None, init_noise=None):
    """Dispatch: single-step, no-random-start configs run as FGSM."""
    if cfg.steps == 1 and not cfg.random_start and cfg.step_size == cfg.epsilon:
        return fgsm(params, spec, x, y, cfg, loss_fn=loss_fn)
    return pgd(params, spec, x, y, cfg, generator=generator, loss_fn=loss_fn,
               init_noise=init_noise)
