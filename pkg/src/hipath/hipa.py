"""Hierarchical patch aggregation: patch -> image -> case with learnable query tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .layers import LN_EPS, TransBlock, init_linear
from .report import Case

# pooling modes
HIERARCHICAL = "hierarchical"
NO_LEVEL2 = "no_level2"  # level 1 kept, images mean-pooled into the case vector
FLAT = "flat"  # one CLS over all patches of all images
MEAN = "mean"  # no attention at all: mean of projected patches


class DimensionMismatch(ValueError):
    pass


@dataclass
class CaseRepresentation:
    z_vis: torch.Tensor
    per_image: torch.Tensor  # (J', d); J' = 1 for flat/mean modes
    image_mask: Optional[torch.Tensor] = None


class HiPA(nn.Module):
    def __init__(self, d_vis: int, d: int, n_heads: int, ffn_ratio: int = 4, mode: str = HIERARCHICAL):
        super().__init__()
        if mode not in (HIERARCHICAL, NO_LEVEL2, FLAT, MEAN):
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.d_vis, self.d, self.mode = d_vis, d, mode
        self.proj = nn.Linear(d_vis, d)
        self.ln = nn.LayerNorm(d, eps=LN_EPS)
        self.q_patch = nn.Parameter(torch.zeros(d))
        self.q_case = nn.Parameter(torch.zeros(d))
        self.level1 = TransBlock(d, n_heads, ffn_ratio)
        self.level2 = TransBlock(d, n_heads, ffn_ratio)

    def reset_parameters(self, generator: torch.Generator) -> None:
        init_linear(self.proj, generator)
        nn.init.ones_(self.ln.weight)
        nn.init.zeros_(self.ln.bias)
        with torch.no_grad():
            self.q_patch.normal_(0.0, 0.02, generator=generator)
            self.q_case.normal_(0.0, 0.02, generator=generator)
        self.level1.reset_parameters(generator)
        self.level2.reset_parameters(generator)

    def project_patches(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != self.d_vis:
            raise DimensionMismatch(f"expected patch dim {self.d_vis}, got {patches.shape[-1]}")
        return self.ln(self.proj(patches))

    def aggregate_image(self, H: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(..., N, d) projected patches -> (..., d) image vector."""
        lead = H.shape[:-2]
        N = H.shape[-2]
        flat = H.reshape(-1, N, self.d)
        m = None if mask is None else mask.reshape(-1, N)
        q = self.q_patch.expand(flat.shape[0], 1, self.d)
        return self.level1(q, flat, m)[:, 0].reshape(*lead, self.d)

    def aggregate_case(self, R: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, J, d) image vectors -> (B, d) case vector."""
        q = self.q_case.expand(R.shape[0], 1, self.d)
        return self.level2(q, R, mask)[:, 0]

    def forward(self, patches: torch.Tensor, patch_mask: torch.Tensor, image_mask: torch.Tensor) -> CaseRepresentation:
        """Batched forward over padded inputs.

        patches (B, J, N, D_vis); patch_mask (B, J, N); image_mask (B, J).
        Padded images and patches never enter an attention softmax.
        """
        B, J, N, _ = patches.shape
        if self.mode in (FLAT, MEAN):
            valid = (patch_mask & image_mask[:, :, None]).reshape(B, J * N)
            counts = valid.sum(1)
            P = int(counts.max())
            # stable sort moves each case's valid patches to the front in their original order
            order = torch.sort((~valid).to(torch.int8), dim=1, stable=True).indices[:, :P]
            flat = torch.gather(patches.reshape(B, J * N, -1), 1, order[..., None].expand(-1, -1, patches.shape[-1]))
            mask = torch.arange(P)[None, :] < counts[:, None]
            H = self.project_patches(flat)
            if self.mode == FLAT:
                z = self.aggregate_image(H, mask)
            else:
                w = mask.to(H.dtype)
                z = (H * w[..., None]).sum(1) / w.sum(1, keepdim=True)
            return CaseRepresentation(z, z[:, None, :], torch.ones(B, 1, dtype=torch.bool))
        b_idx, j_idx = image_mask.nonzero(as_tuple=True)
        r_valid = self.aggregate_image(self.project_patches(patches[b_idx, j_idx]), patch_mask[b_idx, j_idx])
        R = torch.zeros(B, J, self.d, dtype=r_valid.dtype).index_put((b_idx, j_idx), r_valid)
        if self.mode == NO_LEVEL2:
            w = image_mask.to(R.dtype)
            z = (R * w[..., None]).sum(1) / w.sum(1, keepdim=True)
        else:
            z = self.aggregate_case(R, image_mask)
        return CaseRepresentation(z, R, image_mask)

    def forward_case(self, case: Case) -> CaseRepresentation:
        from .model import collate_images

        patches, pmask, imask = collate_images([case], dtype=self.proj.weight.dtype)
        rep = self(patches, pmask, imask)
        n = int(rep.image_mask[0].sum())
        return CaseRepresentation(rep.z_vis[0], rep.per_image[0, :n], None)
