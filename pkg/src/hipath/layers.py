"""Attention primitives shared by the aggregator and the slot decoder."""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F

LN_EPS = 1e-5


def init_linear(layer: nn.Linear, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.zero_()


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; ``mask`` is (B, M) with True for valid keys.

    Every query row must see at least one valid key.
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"n_heads={n_heads} does not divide d={d}")
        self.d, self.n_heads, self.d_head = d, n_heads, d // n_heads
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for layer in (self.wq, self.wk, self.wv, self.wo):
            init_linear(layer, generator)

    def weights(self, query: torch.Tensor, keys: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Attention weights of shape (B, heads, Q, M)."""
        B, Q, _ = query.shape
        M = keys.shape[1]
        q = self.wq(query).view(B, Q, self.n_heads, self.d_head).transpose(1, 2)
        k = self.wk(keys).view(B, M, self.n_heads, self.d_head).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if mask is not None:
            logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
        return torch.softmax(logits, dim=-1)

    def forward(self, query: torch.Tensor, keys: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, Q, _ = query.shape
        M = keys.shape[1]
        attn = self.weights(query, keys, mask)
        v = self.wv(keys).view(B, M, self.n_heads, self.d_head).transpose(1, 2)
        out = (attn @ v).transpose(1, 2).reshape(B, Q, self.d)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_linear(self.fc1, generator)
        init_linear(self.fc2, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransBlock(nn.Module):
    """Pre-norm block where the query tokens attend to the key tokens only.

    ``x = q + MHA(LN1(q), LN1(kv)); x = x + FFN(LN2(x))``
    """

    def __init__(self, d: int, n_heads: int, ffn_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(d, eps=LN_EPS)
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d, eps=LN_EPS)
        self.ffn = FeedForward(d, ffn_ratio * d, d)

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.attn.reset_parameters(generator)
        self.ffn.reset_parameters(generator)
        for ln in (self.ln1, self.ln2):
            nn.init.ones_(ln.weight)
            nn.init.zeros_(ln.bias)

    def forward(self, query: torch.Tensor, keys: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = query + self.attn(self.ln1(query), self.ln1(keys), mask)
        return x + self.ffn(self.ln2(x))
