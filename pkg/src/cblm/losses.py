"""Masked-LM, concept and orthogonality losses and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import EmptyLoss


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = float(getattr(self, name))
            if not (value >= 0 and torch.isfinite(torch.tensor(value))):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


def mlm_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` over masked positions.

    ``logits`` is (..., V); ``mask`` selects the positions that count. Without
    a mask, every row of ``logits`` is a masked position.
    """
    if mask is not None:
        logits, targets = logits[mask], targets[mask]
    if targets.numel() == 0:
        raise EmptyLoss("no masked positions")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def concept_loss(c_hat: torch.Tensor, c: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
    """MSE over observed entries only; 0 when nothing is observed.

    Errors are masked before reduction so unobserved entries get exactly zero
    gradient whatever sentinel they hold.
    """
    observed = observed.to(torch.bool)
    err = torch.where(observed, c_hat - c.to(c_hat.dtype), torch.zeros_like(c_hat))
    count = observed.sum()
    if count == 0:
        return (err * 0).sum()
    return (err ** 2).sum() / count


def _pad_to(z: torch.Tensor, dim: int) -> torch.Tensor:
    if z.shape[-1] >= dim:
        return z[..., :dim]
    return F.pad(z, (0, dim - z.shape[-1]))


def orthogonality_loss(z: torch.Tensor, h_tilde: torch.Tensor, valid: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Mean over valid positions of ``|cos(z, h~_i)|``, then over the batch.

    ``z`` (B, kc) is zero-padded (or truncated) to the width of ``h~`` (B, L, d).
    Near-zero vectors contribute 0 through the epsilon guard.
    """
    if z.dim() == 1:
        z, h_tilde, valid = z[None], h_tilde[None], valid[None]
    zp = _pad_to(z, h_tilde.shape[-1])[:, None, :]
    dot = (zp * h_tilde).sum(-1)
    norms = torch.sqrt((zp ** 2).sum(-1) + eps ** 2) * torch.sqrt((h_tilde ** 2).sum(-1) + eps ** 2)
    cos = dot / norms
    # |x| is non-differentiable at 0; the guarded sqrt keeps gradients finite
    abs_cos = torch.sqrt(cos ** 2 + eps ** 2) - eps
    valid = valid.to(cos.dtype)
    per_sample = (abs_cos * valid).sum(-1) / valid.sum(-1).clamp_min(1.0)
    return per_sample.mean()


def total_loss(mlm, concept, orth, weights: LossWeights):
    return mlm + weights.alpha * concept + weights.beta * orth
