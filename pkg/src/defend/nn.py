"""Transformer building blocks shared by the encoders, the FEM and the decoder.

Everything here works on tensors shaped ``(..., tokens, dim)`` so the same code
serves a single 2D matrix and a padded batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-5
INIT_STD = 0.02


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0:
            raise ValueError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(
                f"model_dim={self.model_dim} is not divisible by num_heads={self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite value in attention input")


def scaled_dot_product_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    causal_mask: bool = False,
    mask: Optional[torch.Tensor] = None,
    bias: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """softmax(Q K^T / sqrt(d)) V.

    ``mask`` is a boolean "may attend" tensor broadcastable to
    ``(..., q_len, k_len)``. ``bias`` is added to the logits before masking.
    With ``causal_mask`` query ``j`` only sees keys ``<= j``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    _check_finite(q, k, v)

    d = q.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(d)
    if bias is not None:
        logits = logits + bias
    if causal_mask:
        nq, nk = logits.shape[-2:]
        allowed = torch.ones(nq, nk, dtype=torch.bool, device=q.device).tril()
        mask = allowed if mask is None else mask & allowed
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def init_linear(layer: nn.Linear) -> nn.Linear:
    nn.init.normal_(layer.weight, mean=0.0, std=INIT_STD)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS):
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = LN_EPS):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    """Per-head scaled dot-product attention, concatenated, then projected."""

    def __init__(self, cfg: AttentionConfig, dropout: float = 0.0):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.q_proj = init_linear(nn.Linear(d, d))
        self.k_proj = init_linear(nn.Linear(d, d))
        self.v_proj = init_linear(nn.Linear(d, d))
        self.out_proj = init_linear(nn.Linear(d, d))
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        *lead, n, _ = x.shape
        h = self.cfg.num_heads
        return x.reshape(*lead, n, h, self.cfg.head_dim).transpose(-3, -2)

    def forward(self, x_q, x_kv, mask=None, causal_mask=False, bias=None, return_weights=False):
        d = self.cfg.model_dim
        if x_q.shape[-1] != d or x_kv.shape[-1] != d:
            raise ShapeError(
                f"expected feature dim {d}, got {x_q.shape[-1]} and {x_kv.shape[-1]}"
            )
        q = self._split(self.q_proj(x_q))
        k = self._split(self.k_proj(x_kv))
        v = self._split(self.v_proj(x_kv))
        if mask is not None:
            # (..., q, k) -> (..., 1, q, k) so it broadcasts over heads
            mask = mask.unsqueeze(-3)
        out, weights = scaled_dot_product_attention(
            q, k, v, causal_mask=causal_mask, mask=mask, bias=bias, return_weights=True
        )
        out = out.transpose(-3, -2)
        out = out.reshape(*out.shape[:-2], d)
        out = self.dropout(self.out_proj(out))
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.fc1 = init_linear(nn.Linear(dim, hidden_mult * dim))
        self.fc2 = init_linear(nn.Linear(hidden_mult * dim, dim))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.dropout(self.fc2(F.gelu(self.fc1(x))))


class TransformerBlock(nn.Module):
    """Pre-norm block: x' = x + MSA(LN(x)); out = x' + FFN(LN(x'))."""

    def __init__(self, cfg: AttentionConfig, dropout: float = 0.0):
        super().__init__()
        self.norm1 = LayerNorm(cfg.model_dim)
        self.attn = MultiHeadAttention(cfg, dropout)
        self.norm2 = LayerNorm(cfg.model_dim)
        self.ffn = FeedForward(cfg.model_dim, dropout=dropout)

    def forward(self, x, mask=None, causal_mask=False, bias=None, return_weights=False):
        h = self.norm1(x)
        attn_out, weights = self.attn(
            h, h, mask=mask, causal_mask=causal_mask, bias=bias, return_weights=True
        )
        x = x + attn_out
        x = x + self.ffn(self.norm2(x))
        if return_weights:
            return x, weights
        return x


def key_padding_mask(valid: torch.Tensor) -> torch.Tensor:
    """(..., k) validity flags -> (..., 1, k) attention mask."""
    return valid.unsqueeze(-2)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Cosine similarity along the last axis. Zero-norm inputs raise NumericError."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if (na <= eps).any() or (nb <= eps).any():
        raise NumericError("cosine similarity of a zero-norm vector")
    return (a * b).sum(dim=-1) / (na * nb)


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """(B, D) x (C, D) -> (B, C) cosine similarity matrix."""
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    if (na <= eps).any() or (nb <= eps).any():
        raise NumericError("cosine similarity of a zero-norm vector")
    return (a / na) @ (b / nb).transpose(-2, -1)
