"""Case-level InfoNCE and image<->segment optimal-transport alignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .layers import init_linear

ALPHA_MIN, ALPHA_MAX = 1.0, 2.7


class NonFiniteCost(ValueError):
    pass


class DegenerateMarginal(ValueError):
    pass


class ZeroNormEmbedding(ValueError):
    pass


@dataclass
class TransportPlan:
    plan: torch.Tensor
    eps: float
    iterations: int


def sinkhorn(C, eps: float = 0.05, iterations: int = 3, row_marginal=None, col_marginal=None) -> TransportPlan:
    """Log-domain Sinkhorn-Knopp.

    One iteration is a row scaling followed by a column scaling, so the column
    marginal is met to rounding after any number of iterations. The returned
    plan carries no autograd history.
    """
    C = torch.as_tensor(C, dtype=torch.float64).detach()
    if C.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {tuple(C.shape)}")
    if not torch.isfinite(C).all():
        raise NonFiniteCost("cost matrix contains non-finite entries")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    J, L = C.shape
    a = torch.full((J,), 1.0 / J, dtype=C.dtype) if row_marginal is None else torch.as_tensor(row_marginal, dtype=C.dtype)
    b = torch.full((L,), 1.0 / L, dtype=C.dtype) if col_marginal is None else torch.as_tensor(col_marginal, dtype=C.dtype)
    if (a <= 0).any() or (b <= 0).any():
        raise DegenerateMarginal("marginals must be strictly positive")
    log_a, log_b = a.log(), b.log()
    log_k = -C / eps
    log_u = torch.zeros(J, dtype=C.dtype)
    log_v = torch.zeros(L, dtype=C.dtype)
    for _ in range(iterations):
        log_u = log_a - torch.logsumexp(log_k + log_v[None, :], dim=1)
        log_v = log_b - torch.logsumexp(log_k + log_u[:, None], dim=0)
    plan = torch.exp(log_u[:, None] + log_k + log_v[None, :])
    return TransportPlan(plan, eps, iterations)


def cosine_cost(R: torch.Tensor, S: torch.Tensor) -> torch.Tensor:
    return 1.0 - F.normalize(R, dim=-1) @ F.normalize(S, dim=-1).T


def local_ot_loss(pairs: Sequence[tuple[torch.Tensor, torch.Tensor]], eps: float = 0.05, iterations: int = 3,
                  plans: Optional[list[Optional[torch.Tensor]]] = None):
    """Mean of <T*, C> / min(J, L) over the cases with J > 1 and L > 1.

    ``pairs`` holds (per-image R_c (J, d), segment s_c (L, d)). The plan is
    treated as a constant; pass ``plans`` to reuse previously solved plans.
    Returns (loss, plans) where ``plans`` has None for skipped cases.
    """
    terms = []
    used: list[Optional[torch.Tensor]] = []
    for i, (R, S) in enumerate(pairs):
        J, L = R.shape[0], S.shape[0]
        if J <= 1 or L <= 1:
            used.append(None)
            continue
        C = cosine_cost(R, S)
        T = plans[i] if plans is not None and plans[i] is not None else sinkhorn(C, eps, iterations).plan
        used.append(T)
        terms.append((T * C).sum() / min(J, L))
    if not terms:
        dtype = pairs[0][0].dtype if len(pairs) else torch.float64
        return torch.zeros((), dtype=dtype), used
    return torch.stack(terms).mean(), used


def clamp_alpha(alpha: torch.Tensor) -> torch.Tensor:
    return torch.clamp(alpha, ALPHA_MIN, ALPHA_MAX)


def global_infonce(z_vis: torch.Tensor, z_txt: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Symmetric InfoNCE with logit scale exp(clamp(alpha))."""
    if (z_vis.norm(dim=-1) == 0).any() or (z_txt.norm(dim=-1) == 0).any():
        raise ZeroNormEmbedding("zero-norm row in contrastive inputs")
    S = F.normalize(z_vis, dim=-1) @ F.normalize(z_txt, dim=-1).T
    logits = S * torch.exp(clamp_alpha(alpha))
    target = torch.arange(S.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def hicl_loss(global_loss, local_loss, lambda_local: float = 0.5):
    return global_loss + lambda_local * local_loss


class TextProjector(nn.Module):
    """Two-layer MLP mapping segment embeddings to the case-level and segment-level text vectors."""

    def __init__(self, d_txt: int, d: int, hidden: Optional[int] = None, shared_trunk: bool = True):
        super().__init__()
        hidden = hidden or 2 * d
        self.shared_trunk = shared_trunk
        self.trunk = nn.Linear(d_txt, hidden)
        self.case_trunk = None if shared_trunk else nn.Linear(d_txt, hidden)
        self.case_head = nn.Linear(hidden, d)
        self.seg_head = nn.Linear(hidden, d)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for layer in (self.trunk, self.case_trunk, self.case_head, self.seg_head):
            if layer is not None:
                init_linear(layer, generator)

    def forward(self, segments: torch.Tensor, mask: Optional[torch.Tensor] = None):
        """segments (B, L, D_txt) -> z_txt (B, d), s (B, L, d)."""
        if mask is None:
            mean = segments.mean(1)
        else:
            w = mask.to(segments.dtype)
            mean = (segments * w[..., None]).sum(1) / w.sum(1, keepdim=True)
        case_trunk = self.trunk if self.case_trunk is None else self.case_trunk
        z_txt = self.case_head(F.gelu(case_trunk(mean)))
        s = self.seg_head(F.gelu(self.trunk(segments)))
        return z_txt, s
