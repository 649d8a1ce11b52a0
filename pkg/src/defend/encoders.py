"""Vision (teacher/student) and text encoders."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import torch
import torch.nn as nn

from .nn import INIT_STD, AttentionConfig, ShapeError, TransformerBlock, init_linear, key_padding_mask
from .patching import num_patches

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 128
    num_layers: int = 4
    text_layers: int = 4
    num_heads: int = 4
    patch_size: int = 8
    image_size: int = 64
    max_tokens: int = 32
    vocab_size: int = 512
    dropout: float = 0.0
    position_encoding: str = "absolute"  # or "relative"

    def __post_init__(self):
        for name in ("model_dim", "num_layers", "text_layers", "num_heads", "patch_size",
                     "image_size", "max_tokens", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.position_encoding not in ("absolute", "relative"):
            raise ValueError(f"unknown position_encoding {self.position_encoding!r}")
        AttentionConfig(self.model_dim, self.num_heads)
        num_patches(self.image_size, self.image_size, self.patch_size)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.model_dim, self.num_heads)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class FeatureBundle:
    """Raw and FEM-enhanced features for a batch.

    Shapes carry a leading batch axis: f_G (B, 1, D), f_P (B, Ns, D), f_T (B, N_T, D).
    ``patch_valid`` / ``text_valid`` flag real rows in the padded tensors.
    """

    f_G: torch.Tensor
    f_T: torch.Tensor
    text_valid: torch.Tensor
    f_P: Optional[torch.Tensor] = None
    patch_valid: Optional[torch.Tensor] = None
    f_G_star: Optional[torch.Tensor] = None
    f_P_star: Optional[torch.Tensor] = None
    f_T_star: Optional[torch.Tensor] = None


class RelativeBias2D(nn.Module):
    """Learned per-head bias indexed by (d_row, d_col) between grid positions.

    A prefix class token (flat index -1) gets zero bias to and from everything.
    """

    def __init__(self, grid: int, num_heads: int):
        super().__init__()
        self.grid = grid
        self.table = nn.Parameter(torch.zeros(num_heads, (2 * grid - 1) ** 2))

    def forward(self, q_index: torch.Tensor, k_index: torch.Tensor) -> torch.Tensor:
        g = self.grid
        qr, qc = q_index.clamp(min=0) // g, q_index.clamp(min=0) % g
        kr, kc = k_index.clamp(min=0) // g, k_index.clamp(min=0) % g
        dr = qr.unsqueeze(-1) - kr.unsqueeze(-2) + g - 1
        dc = qc.unsqueeze(-1) - kc.unsqueeze(-2) + g - 1
        bias = self.table[:, dr * (2 * g - 1) + dc]  # (H, ..., q, k)
        bias = bias.movedim(0, -3)
        real = (q_index >= 0).unsqueeze(-1) & (k_index >= 0).unsqueeze(-2)
        return bias * real.unsqueeze(-3)


class RelativeBias1D(nn.Module):
    def __init__(self, length: int, num_heads: int):
        super().__init__()
        self.length = length
        self.table = nn.Parameter(torch.zeros(num_heads, 2 * length - 1))

    def forward(self, n: int) -> torch.Tensor:
        pos = torch.arange(n, device=self.table.device)
        return self.table[:, pos.unsqueeze(1) - pos.unsqueeze(0) + self.length - 1]


class VisionEncoder(nn.Module):
    """ViT-style encoder used for both the teacher (global) and student (patch) roles."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.patch_proj = init_linear(nn.Linear(cfg.patch_dim, d))
        self.pos_embed = nn.Parameter(torch.randn(cfg.num_patches, d) * INIT_STD)
        self.cls_token = nn.Parameter(torch.randn(1, d) * INIT_STD)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.attention, cfg.dropout) for _ in range(cfg.num_layers)
        )
        self.rel_bias = (
            nn.ModuleList(RelativeBias2D(cfg.grid, cfg.num_heads) for _ in range(cfg.num_layers))
            if cfg.position_encoding == "relative" else None
        )

    def _run(self, x, flat_index, valid=None, return_weights=False):
        mask = key_padding_mask(valid) if valid is not None else None
        weights = None
        for i, block in enumerate(self.blocks):
            bias = self.rel_bias[i](flat_index, flat_index) if self.rel_bias is not None else None
            x, weights = block(x, mask=mask, bias=bias, return_weights=True)
        if return_weights:
            return x, weights
        return x

    def embed(self, patches: torch.Tensor, flat_index: torch.Tensor) -> torch.Tensor:
        """x_i = patch_proj(p_i) + e_p(flat_index_i)."""
        if patches.shape[-1] != self.cfg.patch_dim:
            raise ShapeError(
                f"patch vectors have {patches.shape[-1]} values, expected {self.cfg.patch_dim}"
            )
        return self.patch_proj(patches) + self.pos_embed[flat_index]

    def encode_global(self, patches: torch.Tensor, return_weights: bool = False):
        """Full patch grid (B, N_P, s*s*3) plus class token -> f_G (B, 1, D)."""
        b, n, _ = patches.shape
        if n != self.cfg.num_patches:
            raise ShapeError(f"global view needs all {self.cfg.num_patches} patches, got {n}")
        idx = torch.arange(n, device=patches.device).expand(b, n)
        x = self.embed(patches, idx)
        cls = self.cls_token.expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1)
        full_idx = torch.cat([torch.full((b, 1), -1, device=idx.device, dtype=idx.dtype), idx], 1)
        out, weights = self._run(x, full_idx, return_weights=True)
        if return_weights:
            return out[:, :1], weights
        return out[:, :1]

    def encode_patches(self, patches: torch.Tensor, flat_index: torch.Tensor,
                       valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Retained patches (B, Ns, s*s*3) at original grid positions -> f_P (B, Ns, D)."""
        if patches.shape[-2] == 0:
            raise ValueError("encode_patches needs at least one retained patch")
        x = self.embed(patches, flat_index)
        return self._run(x, flat_index, valid)


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.token_embed = nn.Parameter(torch.randn(cfg.vocab_size, d) * INIT_STD)
        self.pos_embed = nn.Parameter(torch.randn(cfg.max_tokens, d) * INIT_STD)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.attention, cfg.dropout) for _ in range(cfg.text_layers)
        )
        self.rel_bias = (
            nn.ModuleList(RelativeBias1D(cfg.max_tokens, cfg.num_heads) for _ in range(cfg.text_layers))
            if cfg.position_encoding == "relative" else None
        )

    def forward(self, token_ids: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, N_T) ids -> f_T (B, N_T, D). Over-long inputs are truncated with a warning."""
        if token_ids.shape[-1] > self.cfg.max_tokens:
            log.warning("text of %d tokens truncated to %d", token_ids.shape[-1], self.cfg.max_tokens)
            token_ids = token_ids[..., : self.cfg.max_tokens]
            valid = valid[..., : self.cfg.max_tokens] if valid is not None else None
        if (token_ids >= self.cfg.vocab_size).any() or (token_ids < 0).any():
            raise ValueError("token id outside the vocabulary; map it to UNK first")
        n = token_ids.shape[-1]
        x = self.token_embed[token_ids] + self.pos_embed[:n]
        mask = key_padding_mask(valid) if valid is not None else None
        for i, block in enumerate(self.blocks):
            bias = self.rel_bias[i](n) if self.rel_bias is not None else None
            x = block(x, mask=mask, bias=bias)
        return x


def pool_text(f_T_star: torch.Tensor) -> torch.Tensor:
    """First-token (BOS position) row: (..., N_T, D) -> (..., D)."""
    if f_T_star.shape[-2] < 1:
        raise ShapeError("cannot pool an empty token sequence")
    return f_T_star[..., 0, :]


def tiny_config(**overrides) -> EncoderConfig:
    base = EncoderConfig(model_dim=8, num_layers=1, text_layers=1, num_heads=2, patch_size=4,
                         image_size=8, max_tokens=8, vocab_size=16)
    return replace(base, **overrides)
