"""Classification and event-contrastive objectives.

All functions take torch tensors (anything ``torch.as_tensor`` accepts) and
stay differentiable. Single-instance inputs are 1-D logits / ``(n, D)``
projections; batched inputs add a leading batch axis and are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

__all__ = [
    "LossConfig",
    "cross_entropy",
    "cosine_sim_exp",
    "event_contrastive",
    "total_loss",
]


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    alpha: float = 1.0
    symmetric: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def _tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]``; batched logits give the batch mean."""
    logits = _tensor(logits)
    label = torch.as_tensor(label, dtype=torch.long)
    n_classes = logits.shape[-1]
    if torch.any((label < 0) | (label >= n_classes)):
        raise ValueError(f"label outside [0, {n_classes})")
    log_p = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    nll = -log_p.gather(-1, label.reshape(*logits.shape[:-1], 1)).squeeze(-1)
    return nll.mean() if nll.dim() else nll


def _unit(z, eps=1e-12):
    norms = torch.linalg.vector_norm(z, dim=-1, keepdim=True)
    if torch.any(norms == 0):
        raise ValueError("zero-norm vector in similarity")
    return z / norms.clamp_min(eps)


def cosine_sim_exp(u1, u2, tau: float):
    """``exp(cos(u1, u2) / tau)``."""
    u1, u2 = _tensor(u1), _tensor(u2)
    return torch.exp((_unit(u1) * _unit(u2)).sum(-1) / tau)


def _ec_single(z, zt, tau):
    # Rows: anchor t1 from the first view. Columns t2 != t1 of both views form
    # the denominator; the positive (z_t1, zt_t1) sits only in the numerator.
    n = z.shape[-2]
    a, b = _unit(z), _unit(zt)
    same = a @ a.transpose(-1, -2) / tau
    cross = a @ b.transpose(-1, -2) / tau
    positive = torch.diagonal(cross, dim1=-2, dim2=-1)
    off = ~torch.eye(n, dtype=torch.bool, device=z.device)
    neg_same = same.masked_fill(~off, float("-inf"))
    neg_cross = cross.masked_fill(~off, float("-inf"))
    denom = torch.logsumexp(torch.cat([neg_same, neg_cross], dim=-1), dim=-1)
    return -(positive - denom).sum(-1)


def event_contrastive(proj1, proj2, tau: float = 0.1, symmetric: bool = False):
    """Within-instance contrastive loss over frame projections.

    ``proj1``/``proj2`` are ``(n, D)`` (or ``(B, n, D)``, averaged over B).
    For each anchor frame of the first view, the same-position frame of the
    second view is the positive; every other position of either view is a
    negative. ``symmetric=True`` averages with the roles of the views swapped.
    The value is not sign-constrained.
    """
    z, zt = _tensor(proj1), _tensor(proj2)
    if z.shape != zt.shape:
        raise ValueError(f"projection shapes differ: {tuple(z.shape)} vs {tuple(zt.shape)}")
    if z.dim() < 2 or z.shape[-2] < 2:
        raise ValueError("event_contrastive needs at least 2 frames per view")
    if not tau > 0:
        raise ValueError("tau must be positive")
    loss = _ec_single(z, zt, tau)
    if symmetric:
        loss = 0.5 * (loss + _ec_single(zt, z, tau))
    return loss.mean() if loss.dim() else loss


def total_loss(logits, label, proj1, proj2, config: LossConfig = LossConfig()) -> dict:
    """``ce + alpha * ec`` with both parts reported. With ``alpha == 0`` and no
    projections, the contrastive part is skipped and reported as 0."""
    ce = cross_entropy(logits, label)
    if proj1 is None or proj2 is None:
        if config.alpha != 0:
            raise ValueError("projections are required when alpha > 0")
        ec = torch.zeros((), dtype=ce.dtype)
    else:
        ec = event_contrastive(proj1, proj2, config.tau, config.symmetric)
    return {"total": ce + config.alpha * ec, "ce_part": ce, "ec_part": ec}
