"""Full model: aggregator + text projection + slot decoder, over padded case batches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import hicl as hicl_mod
from .config import TrainConfig
from .hipa import FLAT, HIERARCHICAL, MEAN, NO_LEVEL2, HiPA
from .report import Case, SlotType, Vocabulary
from .slot_mdp import SlotMDP, aux_coarse_loss, focal_loss_from_logits, total_loss

DTYPE = torch.float64


def collate_images(cases: Sequence[Case], dtype=DTYPE):
    B = len(cases)
    J = max(c.n_images for c in cases)
    N = max(img.patches.shape[0] for c in cases for img in c.images)
    D = cases[0].images[0].patches.shape[1]
    patches = np.zeros((B, J, N, D))
    pmask = np.zeros((B, J, N), dtype=bool)
    imask = np.zeros((B, J), dtype=bool)
    for b, case in enumerate(cases):
        for j, img in enumerate(case.images):
            n = img.patches.shape[0]
            patches[b, j, :n] = img.patches
            pmask[b, j, :n] = True
            imask[b, j] = True
    return torch.as_tensor(patches, dtype=dtype), torch.as_tensor(pmask), torch.as_tensor(imask)


@dataclass
class Batch:
    patches: torch.Tensor  # (B, J, N, D_vis)
    patch_mask: torch.Tensor
    image_mask: torch.Tensor  # (B, J)
    segments: torch.Tensor  # (B, L, D_txt)
    segment_mask: torch.Tensor
    slot_types: torch.Tensor  # (B, K) long
    slot_mask: torch.Tensor
    truths: torch.Tensor  # (B, K) long, -1 where absent
    coarse: torch.Tensor  # (B, n_coarse)
    case_ids: list[str]

    @property
    def n_images(self) -> torch.Tensor:
        return self.image_mask.sum(1)


def collate(cases: Sequence[Case], dtype=DTYPE) -> Batch:
    patches, pmask, imask = collate_images(cases, dtype)
    B = len(cases)
    L = max(max(len(c.segments), 1) for c in cases)
    K = max(len(c.slots) for c in cases)
    d_txt = next((c.segments[0].embedding.shape[0] for c in cases if c.segments), 1)
    seg = np.zeros((B, L, d_txt))
    smask = np.zeros((B, L), dtype=bool)
    types = np.zeros((B, K), dtype=np.int64)
    kmask = np.zeros((B, K), dtype=bool)
    truths = np.full((B, K), -1, dtype=np.int64)
    n_coarse = len(cases[0].coarse_labels)
    coarse = np.zeros((B, n_coarse))
    for b, case in enumerate(cases):
        for l, s in enumerate(case.segments):
            seg[b, l] = s.embedding
            smask[b, l] = True
        if not case.segments:
            smask[b, 0] = True
        for k, slot in enumerate(case.slots):
            types[b, k] = int(slot.slot_type)
            kmask[b, k] = True
            if slot.truth_term is not None:
                truths[b, k] = slot.truth_term
        coarse[b] = case.coarse_labels
    return Batch(patches, pmask, imask, torch.as_tensor(seg, dtype=dtype), torch.as_tensor(smask),
                 torch.as_tensor(types), torch.as_tensor(kmask), torch.as_tensor(truths),
                 torch.as_tensor(coarse, dtype=dtype), [c.case_id for c in cases])


@dataclass
class ForwardOutput:
    z_vis: torch.Tensor
    per_image: torch.Tensor
    image_mask: torch.Tensor
    slot_logits: torch.Tensor  # (B, K, V)
    aux_logits: torch.Tensor
    z_txt: Optional[torch.Tensor] = None
    seg_proj: Optional[torch.Tensor] = None


@dataclass
class LossParts:
    total: torch.Tensor
    global_: torch.Tensor
    local: torch.Tensor
    hicl: torch.Tensor
    mdp: torch.Tensor
    aux: torch.Tensor
    plans: list

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "global_", "local", "hicl", "mdp", "aux")}


def pooling_mode(cfg: TrainConfig) -> str:
    abl = cfg.ablation.resolved()
    if abl.no_hipa:
        return MEAN
    if abl.flat_crossattn:
        return FLAT
    if abl.no_hipa_level2:
        return NO_LEVEL2
    return HIERARCHICAL


class HiPath(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab: Vocabulary, vocab_table: np.ndarray):
        super().__init__()
        m = cfg.model
        self.cfg = cfg
        self.ablation = cfg.ablation.resolved()
        self.hipa = HiPA(m.d_vis, m.d, m.n_heads, m.ffn_ratio, mode=pooling_mode(cfg))
        self.text = hicl_mod.TextProjector(m.d_txt, m.d, m.text_hidden, m.shared_trunk)
        self.alpha = nn.Parameter(torch.tensor(float(cfg.hicl.alpha_init)))
        self.mdp = SlotMDP(m.d, m.d_txt, m.n_heads, m.max_slots, m.n_coarse, vocab_table, vocab.type_mask(),
                           beta_init=cfg.mdp.beta_init, self_attention=cfg.mdp.self_attention)
        self.to(DTYPE)
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        self.hipa.reset_parameters(g)
        self.text.reset_parameters(g)
        self.mdp.reset_parameters(g)
        with torch.no_grad():
            self.alpha.fill_(float(self.cfg.hicl.alpha_init))

    def forward(self, batch: Batch, with_text: bool = True) -> ForwardOutput:
        rep = self.hipa(batch.patches, batch.patch_mask, batch.image_mask)
        logits = self.mdp(batch.slot_types, rep.per_image, rep.image_mask, batch.slot_mask)
        aux = self.mdp.aux_logits(rep.z_vis)
        out = ForwardOutput(rep.z_vis, rep.per_image, rep.image_mask, logits, aux)
        if with_text:
            out.z_txt, out.seg_proj = self.text(batch.segments, batch.segment_mask)
        return out

    def local_pairs(self, out: ForwardOutput, batch: Batch):
        pairs = []
        n_img = out.image_mask.sum(1)
        n_seg = batch.segment_mask.sum(1)
        for b in range(batch.patches.shape[0]):
            pairs.append((out.per_image[b, : int(n_img[b])], out.seg_proj[b, : int(n_seg[b])]))
        return pairs

    def losses(self, batch: Batch, plans: Optional[list] = None) -> LossParts:
        cfg, abl = self.cfg, self.ablation
        need_text = not (abl.no_hicl_global and abl.no_hicl_local)
        out = self(batch, with_text=need_text)
        zero = torch.zeros((), dtype=DTYPE)

        g = zero if abl.no_hicl_global else hicl_mod.global_infonce(out.z_vis, out.z_txt, self.alpha)
        if abl.no_hicl_local:
            loc, used = zero, []
        else:
            loc, used = hicl_mod.local_ot_loss(self.local_pairs(out, batch), cfg.hicl.eps, cfg.hicl.iterations, plans)
        h = hicl_mod.hicl_loss(g, loc, cfg.hicl.lambda_local)

        allowed = self.mdp.type_mask[batch.slot_types]
        per_slot = focal_loss_from_logits(out.slot_logits, batch.truths, allowed, cfg.mdp.gamma,
                                          cfg.mdp.smoothing, cfg.mdp.focal_mode)
        valid = (batch.slot_mask & (batch.truths >= 0)).to(DTYPE)
        per_case = (per_slot * valid).sum(1) / valid.sum(1).clamp_min(1.0)
        mdp = per_case.mean()

        aux = zero if abl.no_aux else aux_coarse_loss(out.aux_logits, batch.coarse)
        w_aux = 0.0 if abl.no_aux else cfg.loss.w_aux
        tot = total_loss(h, mdp, aux, cfg.loss.w_hicl, cfg.loss.w_mdp, w_aux)
        return LossParts(tot, g, loc, h, mdp, aux, used)

    @torch.no_grad()
    def predict(self, batch: Batch) -> tuple[torch.Tensor, ForwardOutput]:
        """Per-slot probabilities (B, K, V) plus the forward output (text included)."""
        out = self(batch, with_text=True)
        return torch.softmax(out.slot_logits, dim=-1), out
