"""Full model: teacher/student vision encoders, text encoder, FEM and decoder,
plus the batched training-path forward."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterable, Optional

import torch
import torch.nn as nn

from .decoder import DecoderConfig, DescriptionDecoder
from .encoders import EncoderConfig, FeatureBundle, TextEncoder, VisionEncoder, pool_text
from .fem import FeatureEnhancement, FemConfig
from .nn import cosine_similarity, pairwise_cosine
from .objectives import (
    DEFAULT_TAU, contrastive_from_similarity, description_loss, patch_coherence_loss,
)

PAIRINGS = ("pairwise", "fixed")


@dataclass
class Batch:
    """Model inputs for B samples; padded rows are flagged by the *_valid masks."""

    full_patches: torch.Tensor   # (B, N_P, s*s*3), every grid cell, for the teacher
    patches: torch.Tensor        # (B, Ns, s*s*3), retained cells, for the student
    patch_index: torch.Tensor    # (B, Ns) flat grid index of each retained cell
    patch_valid: torch.Tensor    # (B, Ns)
    text_ids: torch.Tensor       # (B, N_T)
    text_valid: torch.Tensor     # (B, N_T)
    desc_ids: Optional[torch.Tensor] = None  # (B, M)

    @property
    def size(self) -> int:
        return self.full_patches.shape[0]

    def to(self, dtype) -> "Batch":
        def cast(t):
            return t.to(dtype) if t is not None and t.is_floating_point() else t
        return Batch(**{k: cast(v) for k, v in self.__dict__.items()})


class DefendModel(nn.Module):
    def __init__(self, enc: EncoderConfig, fem: FemConfig = FemConfig(),
                 dec: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.enc_cfg, self.fem_cfg, self.dec_cfg = enc, fem, dec
        self.student = VisionEncoder(enc)
        self.teacher = copy.deepcopy(self.student)
        self.teacher.requires_grad_(False)
        self.text = TextEncoder(enc)
        self.fem = FeatureEnhancement(enc.attention, fem, enc.dropout)
        self.decoder = DescriptionDecoder(enc.attention, enc.vocab_size, dec,
                                          max_positions=max(64, dec.max_length + 2), dropout=enc.dropout)

    def trainable_parameters(self) -> Iterable[tuple[str, nn.Parameter]]:
        return ((n, p) for n, p in self.named_parameters() if not n.startswith("teacher."))

    # -- features ---------------------------------------------------------

    def features(self, batch: Batch, with_patches: bool = True) -> FeatureBundle:
        with torch.no_grad():
            f_G = self.teacher.encode_global(batch.full_patches)
        f_T = self.text(batch.text_ids, batch.text_valid)
        bundle = FeatureBundle(f_G=f_G, f_T=f_T, text_valid=batch.text_valid)
        if with_patches and self.student is not None:
            bundle.f_P = self.student.encode_patches(batch.patches, batch.patch_index, batch.patch_valid)
            bundle.patch_valid = batch.patch_valid
        return self.fem(bundle)

    def pair_similarity(self, batch: Batch) -> torch.Tensor:
        """s[i, k]: text i against image k, each enhanced in the context of the other."""
        fem = self.fem
        with torch.no_grad():
            f_G = self.teacher.encode_global(batch.full_patches)
        f_T = self.text(batch.text_ids, batch.text_valid)
        h_T = fem.self_enhance(f_T, "T", batch.text_valid)
        h_G = fem.self_enhance(f_G, "G")
        b, n, d = h_T.shape
        hT = h_T.unsqueeze(1).expand(b, b, n, d)
        hG = h_G.unsqueeze(0).expand(b, b, 1, d)
        tv = batch.text_valid.unsqueeze(1).expand(b, b, n)
        text_vec = pool_text(fem.cross_enhance_text(hT, hG))
        img_vec = fem.cross_enhance_visual(hG, hT, "G", tv).squeeze(-2)
        return cosine_similarity(text_vec, img_vec)

    # -- losses -----------------------------------------------------------

    def loss_terms(self, batch: Batch, active=("cont", "pc", "desc"), tau: float = DEFAULT_TAU,
                   pairing: str = "pairwise", symmetric: bool = False) -> dict[str, torch.Tensor]:
        if pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")
        terms = {}
        need_fixed = "pc" in active or "desc" in active or pairing == "fixed"
        bundle = self.features(batch, with_patches="pc" in active) if need_fixed else None
        if "cont" in active:
            if pairing == "pairwise":
                sim = self.pair_similarity(batch)
            else:
                sim = pairwise_cosine(pool_text(bundle.f_T_star), bundle.f_G_star[:, 0])
            terms["cont"] = contrastive_from_similarity(sim, tau, symmetric)
        if "pc" in active:
            terms["pc"] = patch_coherence_loss(bundle.f_G_star, bundle.f_P_star, bundle.patch_valid)
        if "desc" in active:
            if batch.desc_ids is None:
                raise ValueError("description loss needs desc_ids")
            logits = self.decoder(batch.desc_ids, bundle.f_T_star, bundle.f_G_star, batch.text_valid)
            terms["desc"] = description_loss(logits, batch.desc_ids)
        return terms
