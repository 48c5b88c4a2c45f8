"""Adversarial, identity, classification and cycle losses plus weighted totals.

Critic scores are passed around as an (n, 2) matrix whose columns are the
healthy and diseased critics; ``labels`` holds each real sample's class
(0 = h, 1 = p), so ``1 - labels`` is the translation target.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, fields
from typing import Callable

import torch
import torch.nn.functional as F

PROB_EPS = 1e-12


class ShapeMismatch(ValueError):
    pass


@dataclass
class LossWeights:
    adv_d: float = 20.0
    gp: float = 10.0
    id: float = 50.0
    rec: float = 50.0
    adv_g: float = 1.0
    cls_g: float = 1.0
    cls_d: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"weight {f.name} must be nonnegative")


@dataclass
class BatchLossReport:
    adv_d: float = 0.0  # includes the weighted gradient penalty
    gp: float = 0.0  # unweighted penalty expectation
    cls_d: float = 0.0
    total_d: float = 0.0
    adv_g: float = 0.0
    id: float = 0.0
    rec: float = 0.0
    cls_g: float = 0.0
    total_g: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _pick(scores: torch.Tensor, column: torch.Tensor) -> torch.Tensor:
    return scores.gather(1, column.view(-1, 1).long()).squeeze(1)


def _check_same(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    partner: torch.Tensor,
    column: torch.Tensor,
    t: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """E[(||grad D_col(x_hat)||_2 - 1)^2], x_hat = t real + (1 - t) partner.

    One t ~ U[0, 1] per sample. The graph is kept so the penalty can be
    backpropagated into the critic.
    """
    _check_same(real, partner)
    if t is None:
        t = torch.rand(real.shape[0], generator=generator, dtype=real.dtype, device=real.device)
    t = t.view(-1, *([1] * (real.dim() - 1)))
    # the penalty needs input gradients even when called under no_grad
    with torch.enable_grad():
        x_hat = t * real + (1 - t) * partner
        if not x_hat.requires_grad:
            x_hat.requires_grad_(True)
        out = _pick(critic(x_hat), column)
        (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    norm = grad.flatten(1).norm(2, dim=1)
    return ((norm - 1) ** 2).mean()


def adv_loss_d(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    labels: torch.Tensor,
    fake: torch.Tensor,
    lambda_gp: float = 10.0,
    gp_partner: torch.Tensor | None = None,
    fake_critic: str = "target",
    t: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Critic loss -E[D_c(r_c)] + E[D_cbar(G_cbar(r_c))] + lambda_gp * GP.

    ``fake`` is G_cbar(real). ``fake_critic="source"`` scores it with D_c
    instead of D_cbar. The penalty interpolates ``real`` with ``gp_partner``
    (defaults to ``fake``) under D_c. Returns (loss, unweighted penalty).
    """
    _check_same(real, fake)
    target = 1 - labels
    scores_real = critic(real)
    scores_fake = critic(fake)
    fake_col = target if fake_critic == "target" else labels
    loss = -_pick(scores_real, labels).mean() + _pick(scores_fake, fake_col).mean()
    gp = real.new_zeros(())
    if lambda_gp:
        partner = fake if gp_partner is None else gp_partner
        gp = gradient_penalty(critic, real, partner, labels, t=t, generator=generator)
    return loss + lambda_gp * gp, gp


def adv_loss_g(fake_scores: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """-E[D_cbar(G_cbar(r_c))] from the critic matrix of the fakes."""
    return -_pick(fake_scores, target).mean()


def image_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-image, per-pixel mean squared difference."""
    _check_same(a, b)
    return ((a - b) ** 2).flatten(1).mean(dim=1).mean()


def identity_loss(real: torch.Tensor, same_class_output: torch.Tensor) -> torch.Tensor:
    return image_distance(real, same_class_output)


def reconstruction_loss(real: torch.Tensor, cycled: torch.Tensor) -> torch.Tensor:
    return image_distance(real, cycled)


def classification_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """E[-log p(target)] with probabilities clamped at 1e-12."""
    p = _pick(probs, target)
    return -torch.log(p.clamp_min(PROB_EPS)).mean()


def cls_loss_d(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return classification_loss(probs, labels)


def cls_loss_g(probs_of_fakes: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return classification_loss(probs_of_fakes, target)


def probabilities(logits: torch.Tensor) -> torch.Tensor:
    return F.softmax(logits, dim=1)


def total_g(adv_g, rec, id_, cls_g, w: LossWeights):
    return w.adv_g * adv_g + w.rec * rec + w.id * id_ + w.cls_g * cls_g


def total_d(adv_d, cls_d, w: LossWeights):
    return w.adv_d * adv_d + w.cls_d * cls_d
