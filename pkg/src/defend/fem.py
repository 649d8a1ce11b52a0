"""Feature Enhancement Module: intra-modal self-attention, cross-modal attention,
feed-forward refinement."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import torch
import torch.nn as nn

from .encoders import FeatureBundle
from .nn import AttentionConfig, FeedForward, LayerNorm, MultiHeadAttention


@dataclass(frozen=True)
class FemConfig:
    residual: bool = True
    text_attends_to: str = "global"  # or "concat" (global + patch rows)

    def __post_init__(self):
        if self.text_attends_to not in ("global", "concat"):
            raise ValueError(f"text_attends_to must be 'global' or 'concat', got {self.text_attends_to!r}")


class AttentionStage(nn.Module):
    """q + MHA(LN(q), LN(kv)); the residual can be switched off."""

    def __init__(self, cfg: AttentionConfig, cross: bool, residual: bool = True,
                 dropout: float = 0.0):
        super().__init__()
        self.residual = residual
        self.norm_q = LayerNorm(cfg.model_dim)
        self.norm_kv = LayerNorm(cfg.model_dim) if cross else None
        self.attn = MultiHeadAttention(cfg, dropout)

    def forward(self, q, kv, kv_valid: Optional[torch.Tensor] = None):
        mask = kv_valid.unsqueeze(-2) if kv_valid is not None else None
        q_in = self.norm_q(q)
        if self.norm_kv is not None:
            kv_in = self.norm_kv(kv)
        else:
            kv_in = q_in if kv is q else self.norm_q(kv)
        out = self.attn(q_in, kv_in, mask=mask)
        return q + out if self.residual else out


class Refinement(nn.Module):
    """x + FFN(LN(x)); the residual can be switched off."""

    def __init__(self, dim: int, residual: bool = True, dropout: float = 0.0):
        super().__init__()
        self.residual = residual
        self.norm = LayerNorm(dim)
        self.ffn = FeedForward(dim, dropout=dropout)

    def forward(self, x):
        out = self.ffn(self.norm(x))
        return x + out if self.residual else out


class FeatureEnhancement(nn.Module):
    def __init__(self, attn_cfg: AttentionConfig, cfg: FemConfig = FemConfig(), dropout: float = 0.0):
        super().__init__()
        self.cfg = cfg
        r = cfg.residual
        d = attn_cfg.model_dim

        def stage(cross):
            return AttentionStage(attn_cfg, cross, r, dropout)

        self.self_T, self.self_G, self.self_P = stage(False), stage(False), stage(False)
        self.cross_TV, self.cross_VT = stage(True), stage(True)
        self.refine_T = Refinement(d, r, dropout)
        self.refine_G = Refinement(d, r, dropout)
        self.refine_P = Refinement(d, r, dropout)

    def self_enhance(self, f: torch.Tensor, which: str, valid: Optional[torch.Tensor] = None):
        block = {"T": self.self_T, "G": self.self_G, "P": self.self_P}[which]
        return block(f, f, valid)

    def cross_enhance_text(self, h_T: torch.Tensor, h_V: torch.Tensor,
                           v_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """f_T* = F_T(A_TV(h_T, h_V, h_V))."""
        return self.refine_T(self.cross_TV(h_T, h_V, v_valid))

    def cross_enhance_visual(self, h_V: torch.Tensor, h_T: torch.Tensor, which: str,
                             t_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """f_V* = F_V(A_VT(h_V, h_T, h_T)) for V in {G, P}."""
        refine = {"G": self.refine_G, "P": self.refine_P}[which]
        return refine(self.cross_VT(h_V, h_T, t_valid))

    def forward(self, bundle: FeatureBundle) -> FeatureBundle:
        if bundle.f_G is None or bundle.f_T is None:
            raise ValueError("FEM needs f_G and f_T")
        h_T = self.self_enhance(bundle.f_T, "T", bundle.text_valid)
        h_G = self.self_enhance(bundle.f_G, "G")
        h_P = None
        if bundle.f_P is not None:
            h_P = self.self_enhance(bundle.f_P, "P", bundle.patch_valid)

        if self.cfg.text_attends_to == "concat" and h_P is not None:
            keys = torch.cat([h_G, h_P], dim=-2)
            g_valid = torch.ones(h_G.shape[:-1], dtype=torch.bool, device=h_G.device)
            p_valid = bundle.patch_valid if bundle.patch_valid is not None else torch.ones(
                h_P.shape[:-1], dtype=torch.bool, device=h_P.device)
            f_T_star = self.cross_enhance_text(h_T, keys, torch.cat([g_valid, p_valid], -1))
        else:
            f_T_star = self.cross_enhance_text(h_T, h_G)
        f_G_star = self.cross_enhance_visual(h_G, h_T, "G", bundle.text_valid)
        f_P_star = None
        if h_P is not None:
            f_P_star = self.cross_enhance_visual(h_P, h_T, "P", bundle.text_valid)
        return replace(bundle, f_T_star=f_T_star, f_G_star=f_G_star, f_P_star=f_P_star)
