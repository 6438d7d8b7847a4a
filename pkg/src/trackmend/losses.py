"""Completion-training objective: compositing, reconstruction, adversarial, guider.

The generator objective is

    total = reconstruction + w_adv * (adv_global + adv_local) + w_guide * guidance

with the discriminators trained on their own cross-entropy terms, alternating
1:1 with the generator update.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Balance terms of the total generator loss."""

    adversarial: float = 0.001
    guider: float = 0.1

    def __post_init__(self) -> None:
        if self.adversarial < 0 or self.guider < 0:
            raise ValueError("loss weights must be nonnegative")


def composite(prediction: torch.Tensor, original: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Keep ``prediction`` inside the mask and ``original`` outside it.

    ``mask`` must be binary and broadcastable to the image tensors (1 marks
    the region to fill).
    """
    if prediction.shape != original.shape:
        raise ValueError(f"shape mismatch: {tuple(prediction.shape)} vs {tuple(original.shape)}")
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    mask = mask.to(dtype=prediction.dtype)
    return mask * prediction + (1 - mask) * original


def reconstruction_loss(
    original: torch.Tensor, first_pass: torch.Tensor, second_pass: torch.Tensor
) -> torch.Tensor:
    """Sum of the two L1 distances to the original, normalized by pixel count."""
    if first_pass.shape != original.shape or second_pass.shape != original.shape:
        raise ValueError("all inputs must share one shape")
    return (original - first_pass).abs().mean() + (original - second_pass).abs().mean()


def _check_probabilities(p: torch.Tensor) -> torch.Tensor:
    if torch.any(p < 0) or torch.any(p > 1):
        raise ValueError("discriminator outputs must be probabilities in [0, 1]")
    # clamp away from the endpoints so saturated sigmoids cannot produce -inf
    return p.clamp(PROB_EPS, 1 - PROB_EPS)


def adversarial_losses(
    discriminator, real_input: torch.Tensor, fake_input: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Minimax cross-entropy pair for one discriminator.

    The discriminator loss sees the generated batch detached; the generator
    loss is the non-saturating form -log D(fake), which does receive gradient.
    """
    p_real = _check_probabilities(discriminator(real_input))
    p_fake = _check_probabilities(discriminator(fake_input.detach()))
    d_loss = -(p_real.log() + (1 - p_fake).log()).mean()
    g_loss = -_check_probabilities(discriminator(fake_input)).log().mean()
    return d_loss, g_loss


def guider_loss(guider, completed: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the frozen identity classifier on completed frames."""
    probs = guider(completed)
    labels = torch.as_tensor(labels, device=probs.device).reshape(-1)
    if torch.any(labels < 0) or torch.any(labels >= probs.shape[-1]):
        raise ValueError(f"labels must lie in [0, {probs.shape[-1]})")
    picked = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -picked.clamp_min(PROB_EPS).log().mean()


def total_loss(
    reconstruction: torch.Tensor,
    adversarial_global: torch.Tensor,
    adversarial_local: torch.Tensor,
    guidance: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Weighted generator objective; rejects non-finite terms."""
    terms = (reconstruction, adversarial_global, adversarial_local, guidance)
    for name, term in zip(("reconstruction", "adversarial_global", "adversarial_local", "guidance"), terms):
        if not torch.isfinite(torch.as_tensor(term)).all():
            raise RuntimeError(f"non-finite {name} loss term")
    return (
        reconstruction
        + weights.adversarial * (adversarial_global + adversarial_local)
        + weights.guider * guidance
    )
