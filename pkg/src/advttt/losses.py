"""Training objectives.

Tensors follow the torch ``(N, C, H, W)`` layout; discriminator scores are 1-D.
Every loss returns a :class:`LossValue` whose ``value`` is a differentiable
scalar tensor and whose ``components`` hold detached floats.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import torch

from .errors import ContractError

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class LossValue:
    value: torch.Tensor
    components: Dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())


def class_weights(target: torch.Tensor) -> torch.Tensor:
    """w_i = 1 - n_i / n_tot over the whole batch."""
    if target.numel() == 0:
        raise ContractError("empty target mask")
    counts = target.sum(dim=(0, 2, 3))
    total = counts.sum()
    if total <= 0:
        raise ContractError("target mask has no labelled pixels")
    return 1.0 - counts / total


def weighted_cross_entropy(pred: torch.Tensor, target: torch.Tensor) -> LossValue:
    """Class-weighted cross entropy, averaged over pixels (and batch)."""
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    w = class_weights(target).detach().view(1, -1, 1, 1)
    logp = torch.log(pred.clamp(EPS, 1.0))
    per_pixel = -(w * target * logp).sum(dim=1)
    value = per_pixel.mean()
    return LossValue(value, {"wce": float(value.detach())})


def lsgan_discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> LossValue:
    """½·E[(d(real) - 1)²] + ½·E[(d(fake) + 1)²] with labels +1 real, -1 fake."""
    real = 0.5 * ((d_real - 1.0) ** 2).mean()
    fake = 0.5 * ((d_fake + 1.0) ** 2).mean()
    return LossValue(real + fake, {"real": float(real.detach()), "fake": float(fake.detach())})


def lsgan_generator_loss(d_fake: torch.Tensor) -> LossValue:
    value = 0.5 * (d_fake**2).mean()
    return LossValue(value, {"adv": float(value.detach())})


def dynamic_weight(sup_loss, adv_loss, factor: float = 0.1) -> float:
    """factor·|L_sup| / |V_adv| as a plain float (no gradient through the ratio)."""
    sup = abs(float(sup_loss))
    adv = abs(float(adv_loss))
    if adv == 0.0:
        log.warning("adversarial loss is zero; dynamic weight set to 0")
        return 0.0
    return factor * sup / adv


def gradient_penalty(
    disc: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    lam: float = 10.0,
    generator: Optional[torch.Generator] = None,
    u: Optional[torch.Tensor] = None,
) -> LossValue:
    """λ·E[(‖∇ d(m̂)‖₂ - 1)²] at m̂ = u·real + (1 - u)·fake, u ~ U(0, 1) per sample."""
    if real.shape != fake.shape:
        raise ContractError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    n = real.shape[0]
    if u is None:
        u = torch.rand(n, generator=generator).to(real)
    u = u.view(n, 1, 1, 1)
    interp = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)
    score = disc(interp)
    grad = None
    if score.requires_grad:
        (grad,) = torch.autograd.grad(score.sum(), interp, create_graph=True, allow_unused=True)
    if grad is None:  # score does not depend on its input
        grad = torch.zeros_like(interp)
    norm = grad.reshape(n, -1).norm(2, dim=1)
    value = lam * ((norm - 1.0) ** 2).mean()
    return LossValue(value, {"gp": float(value.detach())})


def mae_reconstruction(x_prime: torch.Tensor, x_rec: torch.Tensor) -> LossValue:
    if x_prime.shape != x_rec.shape:
        raise ContractError(f"shape mismatch: {tuple(x_prime.shape)} vs {tuple(x_rec.shape)}")
    value = (x_prime - x_rec).abs().mean()
    return LossValue(value, {"rec": float(value.detach())})
