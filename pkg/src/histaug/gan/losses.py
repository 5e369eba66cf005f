"""Critic-style adversarial objectives with gradient penalty."""

from __future__ import annotations

import torch

from ..errors import ValidationError


def critic_loss(real_scores, fake_scores, interpolate_grad_norms, gp_weight: float):
    """mean(fake) - mean(real) + gp_weight * mean((norm - 1)^2).

    The penalty term is exactly zero when every interpolate gradient norm
    equals one.
    """
    real_scores = torch.as_tensor(real_scores, dtype=torch.float32) if not torch.is_tensor(real_scores) else real_scores
    fake_scores = torch.as_tensor(fake_scores, dtype=torch.float32) if not torch.is_tensor(fake_scores) else fake_scores
    norms = (
        torch.as_tensor(interpolate_grad_norms, dtype=torch.float32)
        if not torch.is_tensor(interpolate_grad_norms)
        else interpolate_grad_norms
    )
    penalty = ((norms - 1.0) ** 2).mean()
    return fake_scores.mean() - real_scores.mean() + gp_weight * penalty


def generator_loss(fake_scores):
    """Negated mean critic score, summed across stages when given a list."""
    if torch.is_tensor(fake_scores):
        return -fake_scores.mean()
    stages = list(fake_scores)
    if not stages:
        raise ValidationError("generator_loss needs at least one stage's scores")
    total = None
    for scores in stages:
        scores = scores if torch.is_tensor(scores) else torch.as_tensor(scores, dtype=torch.float32)
        term = -scores.mean()
        total = term if total is None else total + term
    return total


def gradient_penalty_norms(discriminator, real, fake, labels):
    """Per-sample gradient norms of the critic at uniform real/fake mixes."""
    eps = torch.rand(real.shape[0], 1, 1, 1, device=real.device)
    mixed = (eps * real + (1.0 - eps) * fake.detach()).requires_grad_(True)
    scores = discriminator(mixed, labels)
    grads = torch.autograd.grad(
        outputs=scores.sum(), inputs=mixed, create_graph=True, retain_graph=True
    )[0]
    return grads.flatten(1).norm(dim=1)
