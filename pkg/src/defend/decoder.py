"""Description decoder conditioned on enhanced text and global features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .nn import INIT_STD, AttentionConfig, LayerNorm, TransformerBlock, init_linear

BOS, EOS = 2, 3


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 2
    max_length: int = 30
    beam_size: int = 4

    def __post_init__(self):
        if self.num_layers < 1 or self.max_length < 1 or self.beam_size < 1:
            raise ValueError("decoder num_layers, max_length and beam_size must be >= 1")


@dataclass(frozen=True)
class GenerationResult:
    tokens: list[int]
    log_prob: float
    terminated_by: str  # "EOS" or "max_length"


def prefix_lm_mask(prefix_valid: torch.Tensor, n_tokens: int) -> torch.Tensor:
    """Boolean may-attend mask over [prefix; y].

    Prefix rows see the (valid) prefix only; y row j sees the prefix and y_<=j.
    prefix_valid: (B, P) -> mask (B, P + M, P + M).
    """
    b, p = prefix_valid.shape
    m = n_tokens
    total = p + m
    mask = torch.zeros(b, total, total, dtype=torch.bool, device=prefix_valid.device)
    mask[:, :, :p] = prefix_valid.unsqueeze(1)
    mask[:, p:, p:] = torch.ones(m, m, dtype=torch.bool, device=prefix_valid.device).tril()
    return mask


class DescriptionDecoder(nn.Module):
    def __init__(self, attn_cfg: AttentionConfig, vocab_size: int, cfg: DecoderConfig,
                 max_positions: int = 64, dropout: float = 0.0):
        super().__init__()
        self.cfg = cfg
        d = attn_cfg.model_dim
        self.vocab_size = vocab_size
        self.max_positions = max_positions
        self.token_embed = nn.Parameter(torch.randn(vocab_size, d) * INIT_STD)
        self.pos_embed = nn.Parameter(torch.randn(max_positions, d) * INIT_STD)
        self.text_proj = init_linear(nn.Linear(d, d))
        self.global_proj = init_linear(nn.Linear(d, d))
        self.segment = nn.Parameter(torch.randn(2, d) * INIT_STD)
        self.blocks = nn.ModuleList(TransformerBlock(attn_cfg, dropout) for _ in range(cfg.num_layers))
        self.norm = LayerNorm(d)
        self.out = init_linear(nn.Linear(d, vocab_size))

    def forward(self, target: torch.Tensor, f_T_star: torch.Tensor, f_G_star: torch.Tensor,
                text_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Teacher-forced pass: (B, M) ids -> (B, M, V) logits; row j predicts token j + 1."""
        if target.ndim == 1:
            return self.forward(target[None], f_T_star[None], f_G_star[None],
                                None if text_valid is None else text_valid[None])[0]
        b, m = target.shape
        if m == 0:
            raise ValueError("target sequence is empty")
        if m > self.max_positions:
            raise ValueError(f"target length {m} exceeds {self.max_positions} positions")
        if text_valid is None:
            text_valid = torch.ones(f_T_star.shape[:-1], dtype=torch.bool, device=target.device)
        prefix = torch.cat([
            self.text_proj(f_T_star) + self.segment[0],
            self.global_proj(f_G_star) + self.segment[1],
        ], dim=1)
        prefix_valid = torch.cat(
            [text_valid, torch.ones(b, f_G_star.shape[1], dtype=torch.bool, device=target.device)], 1)
        y = self.token_embed[target] + self.pos_embed[:m]
        x = torch.cat([prefix, y], dim=1)
        mask = prefix_lm_mask(prefix_valid, m)
        for block in self.blocks:
            x = block(x, mask=mask)
        h = self.norm(x[:, prefix.shape[1]:])
        return self.out(h)

    @torch.no_grad()
    def generate(self, f_T_star: torch.Tensor, f_G_star: torch.Tensor,
                 cfg: Optional[DecoderConfig] = None, mode: str = "beam",
                 allowed: Optional[Sequence[Sequence[int]]] = None) -> GenerationResult:
        """Decode one sample; f_T_star (N_T, D), f_G_star (1, D)."""
        cfg = cfg or self.cfg
        beam = 1 if mode == "greedy" else cfg.beam_size
        return beam_search(self, f_T_star, f_G_star, beam, cfg.max_length, allowed)


class _Trie:
    def __init__(self, sequences):
        self.root: dict = {}
        for seq in sequences:
            node = self.root
            for t in list(seq) + [EOS]:
                node = node.setdefault(int(t), {})

    def allowed(self, prefix: Sequence[int]):
        node = self.root
        for t in prefix:
            node = node.get(t)
            if node is None:
                return []
        return sorted(node)


def beam_search(decoder: DescriptionDecoder, f_T_star, f_G_star, beam_size: int,
                max_length: int, allowed: Optional[Sequence[Sequence[int]]] = None) -> GenerationResult:
    """Beam search scored by total log-probability, no length normalisation.

    Ties between candidates are broken by lower token id, then by beam order.
    ``allowed`` restricts outputs to the given token sequences (each implicitly
    followed by EOS).
    """
    trie = _Trie(allowed) if allowed is not None else None
    f_T = f_T_star.unsqueeze(0)
    f_G = f_G_star.unsqueeze(0)
    beams: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(max_length):
        seqs = torch.tensor([[BOS] + toks for toks, _ in beams], device=f_T.device)
        logits = decoder(seqs, f_T.expand(len(beams), -1, -1), f_G.expand(len(beams), -1, -1))
        logp = torch.log_softmax(logits[:, -1].double(), dim=-1)
        candidates = []
        for bi, (toks, score) in enumerate(beams):
            if trie is not None:
                ids = trie.allowed(toks)
                if not ids:
                    continue
                ids_t = torch.tensor(ids, device=logp.device)
                # renormalise over the permitted tokens
                row = torch.log_softmax(logp[bi, ids_t], dim=-1)
                pairs = zip(ids, row.tolist())
            else:
                pairs = enumerate(logp[bi].tolist())
            for tok, lp in pairs:
                candidates.append((score + lp, tok, bi))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        beams = []
        for score, tok, bi in candidates[:beam_size]:
            toks = seqs[bi, 1:].tolist() + [tok]
            if tok == EOS:
                finished.append((toks, score))
            else:
                beams.append((toks, score))
        if not beams:
            break
        # scores only fall as tokens are added, so no live beam can overtake this
        if finished and max(s for _, s in finished) >= beams[0][1]:
            break
    pool = finished + [(t, s) for t, s in beams]
    best_toks, best_score = max(pool, key=lambda c: (c[1], -len(c[0])))
    term = "EOS" if best_toks and best_toks[-1] == EOS else "max_length"
    return GenerationResult(best_toks, float(best_score), term)

