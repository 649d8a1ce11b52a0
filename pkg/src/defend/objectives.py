"""Training objectives: image-text contrastive, patch coherence, description NLL."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import torch
import torch.nn.functional as F

from .nn import pairwise_cosine

DEFAULT_TAU = 0.07
TERMS = ("cont", "pc", "desc")


class NonFiniteLossError(ArithmeticError):
    def __init__(self, term: str, value: float, report: Optional[dict] = None):
        self.term = term
        self.value = value
        self.report = report or {}
        super().__init__(f"loss term {term!r} is not finite ({value}); terms: {self.report}")


@dataclass(frozen=True)
class LossWeights:
    w_cont: float = 1.0
    w_pc: float = 1.0
    w_desc: float = 1.0

    def __post_init__(self):
        ws = (self.w_cont, self.w_pc, self.w_desc)
        if any(w < 0 for w in ws):
            raise ValueError("loss weights must be non-negative")
        if not any(ws):
            raise ValueError("at least one loss weight must be positive")

    def of(self, term: str) -> float:
        return getattr(self, f"w_{term}")


@dataclass(frozen=True)
class LossReport:
    cont: float
    pc: float
    desc: float
    total: float
    batch_size: int
    active: tuple = TERMS


def contrastive_from_similarity(sim: torch.Tensor, tau: float = DEFAULT_TAU,
                                symmetric: bool = False) -> torch.Tensor:
    """Mean over rows i of -log softmax_k(sim[i, k] / tau)[i].

    ``sim[i, k]`` compares text i with image k; the diagonal holds matched pairs.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    logits = sim / tau
    target = torch.arange(sim.shape[0], device=sim.device)
    loss = F.cross_entropy(logits, target)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.T, target))
    return loss


def contrastive_loss(text_vecs: torch.Tensor, global_vecs: torch.Tensor,
                     tau: float = DEFAULT_TAU, symmetric: bool = False) -> torch.Tensor:
    """Text-to-image InfoNCE over cosine similarities with in-batch negatives."""
    if text_vecs.shape != global_vecs.shape or text_vecs.ndim != 2:
        raise ValueError("text and global vectors must both be (B, D)")
    return contrastive_from_similarity(pairwise_cosine(text_vecs, global_vecs), tau, symmetric)


def patch_coherence_loss(f_G_star: torch.Tensor, f_P_star: torch.Tensor,
                         valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """||f_G* - mean(f_P*)||^2, averaged over any leading batch axis.

    f_G* is (..., 1, D) or (..., D); f_P* is (..., N, D) with optional (..., N) validity.
    """
    if f_P_star.shape[-2] < 1:
        raise ValueError("need at least one patch row")
    g = f_G_star.squeeze(-2) if f_G_star.ndim == f_P_star.ndim else f_G_star
    if valid is None:
        pooled = f_P_star.mean(dim=-2)
    else:
        w = valid.to(f_P_star.dtype).unsqueeze(-1)
        pooled = (f_P_star * w).sum(-2) / w.sum(-2).clamp(min=1.0)
    per_sample = ((g - pooled) ** 2).sum(dim=-1)
    return per_sample.mean()


def description_loss(logits: torch.Tensor, targets: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
    """Teacher-forced NLL: sum over tokens, mean over the batch.

    ``logits[:, j]`` is the distribution for ``targets[:, j + 1]``; the first target
    (BOS) is never predicted and PAD targets are skipped.
    """
    if logits.ndim == 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
    vocab = logits.shape[-1]
    if (targets >= vocab).any() or (targets < 0).any():
        raise ValueError(f"target id outside vocabulary of size {vocab}")
    pred = logits[:, :-1]
    gold = targets[:, 1:]
    logp = torch.log_softmax(pred, dim=-1).gather(-1, gold.unsqueeze(-1)).squeeze(-1)
    keep = gold != pad_id
    nll = -(logp * keep).sum(dim=1)
    return nll.mean()


def combine(terms: Mapping[str, torch.Tensor], weights: LossWeights, batch_size: int = 0):
    """Weighted sum of the active terms; returns (total tensor, LossReport).

    Inactive terms are reported as 0.0 so the report total stays the weighted sum.
    """
    values = {}
    for name, t in terms.items():
        if name not in TERMS:
            raise KeyError(f"unknown loss term {name!r}")
        v = float(t.detach())
        values[name] = v
    for name, v in values.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v, values)
    total = None
    for name, t in terms.items():
        part = weights.of(name) * t
        total = part if total is None else total + part
    if total is None:
        raise ValueError("no loss terms to combine")
    report = LossReport(
        cont=values.get("cont", 0.0),
        pc=values.get("pc", 0.0),
        desc=values.get("desc", 0.0),
        total=float(total.detach()),
        batch_size=batch_size,
        active=tuple(n for n in TERMS if n in values),
    )
    return total, report

