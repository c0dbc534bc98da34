"""Typed slot queries decoded against visual features and scored by cosine against frozen term embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .layers import FeedForward, MultiHeadAttention, init_linear
from .report import SlotType, Template

# large finite logit penalty: exp() underflows to exactly 0 without producing inf * 0 in backward
_NEG = -1e30

FOCAL_SMOOTHED = "smoothed"  # modulation inside the smoothed-target sum
FOCAL_TRUE_CLASS = "true_class"  # modulation by (1 - p_truth) on the whole smoothed CE


class TooManySlots(ValueError):
    pass


class ZeroNormProjection(ValueError):
    pass


class TruthOutOfVocabulary(ValueError):
    pass


@dataclass
class SlotDistribution:
    slot_index: int
    slot_type: SlotType
    probs: np.ndarray  # over the full vocabulary; zero outside the slot type


def _inv_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class SlotMDP(nn.Module):
    def __init__(self, d: int, d_txt: int, n_heads: int, max_slots: int, n_coarse: int,
                 vocab_table: np.ndarray, type_mask: np.ndarray, beta_init: float = 10.0,
                 self_attention: bool = True):
        super().__init__()
        self.d, self.max_slots = d, max_slots
        self.E_pos = nn.Parameter(torch.zeros(max_slots, d))
        self.E_type = nn.Parameter(torch.zeros(len(SlotType), d))
        self.cross_attn = MultiHeadAttention(d, n_heads)
        self.self_attn = MultiHeadAttention(d, n_heads) if self_attention else None
        self.ffn = FeedForward(d, 2 * d, d_txt)
        self.beta_raw = nn.Parameter(torch.tensor(_inv_softplus(beta_init)))
        self.aux_head = nn.Linear(d, n_coarse)
        table = torch.as_tensor(np.array(vocab_table, dtype=np.float64), dtype=torch.float64)
        self.register_buffer("vocab", F.normalize(table, dim=-1))
        self.register_buffer("type_mask", torch.as_tensor(np.asarray(type_mask), dtype=torch.bool))
        self.beta_init = beta_init

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            self.E_pos.normal_(0.0, 1.0, generator=generator)
            self.E_type.normal_(0.0, 1.0, generator=generator)
            self.beta_raw.fill_(_inv_softplus(self.beta_init))
        self.cross_attn.reset_parameters(generator)
        if self.self_attn is not None:
            self.self_attn.reset_parameters(generator)
        self.ffn.reset_parameters(generator)
        init_linear(self.aux_head, generator)

    @property
    def beta(self) -> torch.Tensor:
        return F.softplus(self.beta_raw)

    def build_slot_queries(self, slot_types: torch.Tensor) -> torch.Tensor:
        """slot_types (B, K) long -> (B, K, d) queries E_pos(k) + E_type(type)."""
        K = slot_types.shape[-1]
        if K > self.max_slots:
            raise TooManySlots(f"{K} slots > max_slots={self.max_slots}")
        return self.E_pos[:K] + self.E_type[slot_types]

    def decode_slots(self, queries: torch.Tensor, per_image: torch.Tensor, image_mask: Optional[torch.Tensor] = None,
                     slot_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        q_hat = queries + self.cross_attn(queries, per_image, image_mask)
        if self.self_attn is None:
            return q_hat
        return q_hat + self.self_attn(q_hat, q_hat, slot_mask)

    def logits(self, decoded: torch.Tensor, slot_types: torch.Tensor) -> torch.Tensor:
        """(..., d) decoded slots -> (..., |V|) type-restricted logits beta * cos."""
        p = self.ffn(decoded)
        if (p.norm(dim=-1) == 0).any():
            raise ZeroNormProjection("slot projection has zero norm")
        cos = F.normalize(p, dim=-1) @ self.vocab.T
        allowed = self.type_mask[slot_types]
        return torch.where(allowed, self.beta * cos, torch.full_like(cos, _NEG))

    def forward(self, slot_types, per_image, image_mask=None, slot_mask=None) -> torch.Tensor:
        q = self.build_slot_queries(slot_types)
        return self.logits(self.decode_slots(q, per_image, image_mask, slot_mask), slot_types)

    def aux_logits(self, z_vis: torch.Tensor) -> torch.Tensor:
        return self.aux_head(z_vis)


def template_types(template: Template) -> torch.Tensor:
    return torch.tensor([int(t) for t in template.slot_types], dtype=torch.long)


def score_slot(decoded: torch.Tensor, slot_type: SlotType, vocab_emb: np.ndarray, beta: float,
               ffn: Optional[nn.Module] = None, type_mask: Optional[np.ndarray] = None) -> SlotDistribution:
    """Single-slot distribution: softmax of beta * cos(FFN(decoded), e_w) over the slot type's terms."""
    p = decoded if ffn is None else ffn(decoded)
    p = torch.as_tensor(p, dtype=torch.float64)
    if p.norm() == 0:
        raise ZeroNormProjection("slot projection has zero norm")
    E = F.normalize(torch.as_tensor(np.array(vocab_emb, dtype=np.float64), dtype=torch.float64), dim=-1)
    cos = F.normalize(p, dim=-1) @ E.T
    allowed = torch.ones(E.shape[0], dtype=torch.bool) if type_mask is None else \
        torch.as_tensor(np.asarray(type_mask)[int(slot_type)], dtype=torch.bool)
    logits = torch.where(allowed, beta * cos, torch.full_like(cos, _NEG))
    probs = torch.softmax(logits, dim=-1).detach().numpy()
    return SlotDistribution(-1, slot_type, probs)


def focal_loss_from_logits(logits: torch.Tensor, truth: torch.Tensor, allowed: torch.Tensor, gamma: float = 2.0,
                           smoothing: float = 0.1, mode: str = FOCAL_SMOOTHED) -> torch.Tensor:
    """Per-slot focal loss with label smoothing over the allowed (type) vocabulary.

    logits (..., V); truth (...) long; allowed (..., V) bool. Returns (...).
    """
    logp = torch.log_softmax(logits, dim=-1)
    logp = torch.where(allowed, logp, torch.zeros_like(logp))
    p = logp.exp()
    n_type = allowed.sum(-1, keepdim=True).to(logits.dtype)
    onehot = F.one_hot(truth.clamp(min=0), logits.shape[-1]).to(logits.dtype)
    target = ((1 - smoothing) * onehot + smoothing / n_type) * allowed.to(logits.dtype)
    if mode == FOCAL_SMOOTHED:
        return -(target * (1 - p) ** gamma * logp).sum(-1)
    if mode == FOCAL_TRUE_CLASS:
        p_true = (onehot * p).sum(-1)
        return -(1 - p_true) ** gamma * (target * logp).sum(-1)
    raise ValueError(f"unknown focal mode {mode!r}")


def focal_slot_loss(dist: SlotDistribution, truth: int, type_mask: np.ndarray, gamma: float = 2.0,
                    smoothing: float = 0.1, mode: str = FOCAL_SMOOTHED) -> float:
    allowed = np.asarray(type_mask)[int(dist.slot_type)]
    if not allowed[truth]:
        raise TruthOutOfVocabulary(f"term {truth} is not a {dist.slot_type.name} term")
    probs = torch.as_tensor(dist.probs, dtype=torch.float64)
    logits = torch.where(torch.as_tensor(allowed), torch.log(probs.clamp_min(1e-300)), torch.full_like(probs, _NEG))
    return float(focal_loss_from_logits(logits, torch.tensor(truth), torch.as_tensor(allowed), gamma, smoothing, mode))


def aux_coarse_loss(logits: torch.Tensor, coarse_labels: torch.Tensor) -> torch.Tensor:
    if logits.shape != coarse_labels.shape:
        raise ValueError(f"aux logits {tuple(logits.shape)} vs labels {tuple(coarse_labels.shape)}")
    return F.binary_cross_entropy_with_logits(logits, coarse_labels.to(logits.dtype))


def total_loss(hicl, mdp, aux, w_hicl: float = 1.0, w_mdp: float = 0.5, w_aux: float = 0.1):
    return w_hicl * hicl + w_mdp * mdp + w_aux * aux
