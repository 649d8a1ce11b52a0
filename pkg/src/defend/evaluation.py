"""Linear probe, zero-shot classification, toy VQA and attention maps."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PAD, SyntheticSample, Vocab, prompt_text, tokenize, vqa_pairs
from .decoder import DecoderConfig
from .encoders import pool_text
from .model import DefendModel
from .nn import cosine_similarity
from .objectives import description_loss
from .patching import patch_array

log = logging.getLogger(__name__)

FLAT_TOLERANCE = 1e-12


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricReport:
    acc_top1: float
    acc_top5: float
    precision: float
    recall: float
    f1: float
    per_class: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dict(self.__dict__)


def topk_accuracy(scores, labels, k: int) -> float:
    """Share of rows whose label is among the k best scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if not 1 <= k <= scores.shape[1]:
        raise EvaluationError(f"k={k} outside [1, {scores.shape[1]}]")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float((order == labels[:, None]).any(axis=1).mean())


def classification_report(pred, labels, classes: Optional[Sequence] = None) -> tuple[float, float, float, dict]:
    """Macro precision, recall, F1 (harmonic mean of the two macros) and per-class rows."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    if classes is None:
        classes = sorted(set(labels.tolist()) | set(pred.tolist()))
    per_class, ps, rs = {}, [], []
    for c in classes:
        tp = int(((pred == c) & (labels == c)).sum())
        n_pred = int((pred == c).sum())
        n_true = int((labels == c).sum())
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_true if n_true else 0.0
        per_class[str(c)] = {"precision": p, "recall": r, "support": n_true}
        ps.append(p)
        rs.append(r)
    precision, recall = float(np.mean(ps)), float(np.mean(rs))
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1, per_class


def metric_report(scores, labels, class_names: Optional[Sequence[str]] = None) -> MetricReport:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    c = scores.shape[1]
    pred = np.argsort(-scores, axis=1, kind="stable")[:, 0]
    p, r, f1, per_class = classification_report(pred, labels, list(range(c)))
    if class_names is not None:
        per_class = {class_names[int(k)]: v for k, v in per_class.items()}
    return MetricReport(topk_accuracy(scores, labels, 1), topk_accuracy(scores, labels, min(5, c)),
                        p, r, f1, per_class)


def balanced_accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean([(pred[labels == c] == c).mean() for c in np.unique(labels)]))


# ---------------------------------------------------------------------------
# inference path (teacher only)

def _device_tensor(model: DefendModel, array) -> torch.Tensor:
    ref = next(model.teacher.parameters())
    return torch.as_tensor(np.asarray(array), dtype=ref.dtype, device=ref.device)


@torch.no_grad()
def infer_features(model: DefendModel, image: np.ndarray, text_ids: Optional[Sequence[int]] = None):
    """(f_G* (1, D), f_T* (N_T, D) or None) from the teacher branch alone.

    Without text, f_G* = F_G(A_VT(h_G, h_G, h_G)): the global row attends to itself.
    """
    fem, teacher = model.fem, model.teacher
    p = patch_array(np.asarray(image), model.enc_cfg.patch_size)
    x = _device_tensor(model, p.reshape(1, p.shape[0], -1))
    f_G = teacher.encode_global(x)[0]                       # (1, D)
    h_G = fem.self_enhance(f_G, "G")
    if text_ids is None:
        return fem.refine_G(fem.cross_VT(h_G, h_G)), None
    ids = torch.as_tensor(list(text_ids), dtype=torch.long, device=x.device)
    valid = ids != PAD
    ids, valid = ids[valid], valid[valid]                   # drop padding
    f_T = model.text(ids[None], valid[None])[0]
    h_T = fem.self_enhance(f_T, "T", valid)
    f_T_star = fem.cross_enhance_text(h_T, h_G)
    f_G_star = fem.cross_enhance_visual(h_G, h_T, "G", valid)
    return f_G_star, f_T_star


@torch.no_grad()
def global_features(model: DefendModel, images: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Batched no-text f_G* for many images: (n, D)."""
    fem = model.fem
    out = []
    s = model.enc_cfg.patch_size
    for i in range(0, len(images), batch_size):
        p = np.stack([patch_array(np.asarray(im), s) for im in images[i:i + batch_size]])
        x = _device_tensor(model, p.reshape(p.shape[0], p.shape[1], -1))
        h_G = fem.self_enhance(model.teacher.encode_global(x), "G")
        out.append(fem.refine_G(fem.cross_VT(h_G, h_G))[:, 0].double().cpu().numpy())
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# linear probe

@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 300
    lr: float = 0.05
    weight_decay: float = 1e-3
    seed: int = 0


def linear_probe(train_x, train_y, test_x, test_y, cfg: ProbeConfig = ProbeConfig(),
                 class_names: Optional[Sequence[str]] = None):
    """Affine softmax classifier on frozen features -> (probe, MetricReport on the test split).

    Labels are remapped to the classes present in training; a test label outside
    that set is an error.
    """
    train_x, test_x = np.asarray(train_x, dtype=np.float64), np.asarray(test_x, dtype=np.float64)
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    classes = np.unique(train_y)
    missing = sorted(set(test_y.tolist()) - set(classes.tolist()))
    if missing:
        raise EvaluationError(f"classes {missing} appear in the test split but not in training")
    remap = {int(c): i for i, c in enumerate(classes)}
    ytr = torch.tensor([remap[int(c)] for c in train_y])
    yte = np.array([remap[int(c)] for c in test_y])

    mean, std = train_x.mean(0), train_x.std(0) + 1e-8
    xtr = torch.tensor((train_x - mean) / std)
    xte = torch.tensor((test_x - mean) / std)
    gen = torch.Generator().manual_seed(cfg.seed)
    probe = nn.Linear(xtr.shape[1], len(classes)).double()
    with torch.no_grad():
        probe.weight.normal_(0.0, 0.01, generator=gen)
        probe.bias.zero_()
    opt = torch.optim.Adam(probe.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    for _ in range(cfg.epochs):
        opt.zero_grad()
        F.cross_entropy(probe(xtr), ytr).backward()
        opt.step()
    with torch.no_grad():
        scores = probe(xte).numpy()
    names = [class_names[int(c)] for c in classes] if class_names is not None else None
    probe.mean, probe.std, probe.classes = mean, std, classes
    return probe, metric_report(scores, yte, names)


# ---------------------------------------------------------------------------
# zero-shot

def zero_shot_prompts(classes: Sequence[str]) -> list[str]:
    from .data import CATEGORY_OF
    return [prompt_text(CATEGORY_OF[c], c) for c in classes]


@torch.no_grad()
def zero_shot_scores(model: DefendModel, vocab: Vocab, images: Sequence[np.ndarray],
                     prompts: Sequence[str]) -> np.ndarray:
    """(n_images, n_prompts) cosine scores between pooled f_T* and f_G* per pair."""
    max_tokens = model.enc_cfg.max_tokens
    ids = [tokenize(p, vocab, max_tokens) for p in prompts]
    out = np.zeros((len(images), len(prompts)))
    for i, img in enumerate(images):
        for j, t in enumerate(ids):
            f_G_star, f_T_star = infer_features(model, img, t)
            out[i, j] = float(cosine_similarity(pool_text(f_T_star), f_G_star[0]))
    return out


def zero_shot_classify(model: DefendModel, vocab: Vocab, image: np.ndarray,
                       prompts: Sequence[str]) -> tuple[list[int], np.ndarray]:
    """Prompt indices ranked by descending score (ties to the lower index), and the scores."""
    scores = zero_shot_scores(model, vocab, [image], prompts)[0]
    return np.argsort(-scores, kind="stable").tolist(), scores


# ---------------------------------------------------------------------------
# toy VQA

def answer_vocabulary(samples: Sequence[SyntheticSample]) -> list[str]:
    return sorted({a for s in samples for _, a in vqa_pairs(s.record)})


@torch.no_grad()
def toy_vqa(model: DefendModel, vocab: Vocab, image: np.ndarray, question: str,
            answers: Sequence[str]) -> tuple[str, float]:
    """Greedy answer restricted to ``answers``; returns (answer, log-probability)."""
    if not answers:
        raise EvaluationError("answer vocabulary is empty")
    q = tokenize(question, vocab, model.enc_cfg.max_tokens)
    f_G_star, f_T_star = infer_features(model, image, q)
    allowed = [vocab.encode(a) for a in answers]
    cfg = DecoderConfig(model.dec_cfg.num_layers, max(len(a) for a in allowed) + 1, 1)
    model.eval()
    res = model.decoder.generate(f_T_star, f_G_star, cfg, mode="greedy", allowed=allowed)
    return vocab.decode(res.tokens), res.log_prob


def finetune_vqa(model: DefendModel, vocab: Vocab, samples: Sequence[SyntheticSample],
                 steps: int = 150, lr: float = 1e-3, batch_size: int = 32, seed: int = 0) -> DefendModel:
    """Copy of ``model`` whose decoder is tuned on (image, question) -> answer pairs.

    Encoders and FEM stay frozen; features come from the inference path.
    """
    tuned = copy.deepcopy(model)
    tuned.student = None
    triples = [(s.image, q, a) for s in samples for q, a in vqa_pairs(s.record)]
    feats = []
    for img, q, a in triples:
        f_G_star, f_T_star = infer_features(tuned, img, tokenize(q, vocab, tuned.enc_cfg.max_tokens))
        feats.append((f_T_star, f_G_star, tokenize(a, vocab, 8)))
    opt = torch.optim.AdamW(tuned.decoder.parameters(), lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    tuned.decoder.train()
    for _ in range(steps):
        idx = rng.choice(len(feats), size=min(batch_size, len(feats)), replace=False)
        n_t = max(feats[i][0].shape[0] for i in idx)
        d = feats[0][0].shape[1]
        f_T = torch.zeros(len(idx), n_t, d, dtype=feats[0][0].dtype)
        valid = torch.zeros(len(idx), n_t, dtype=torch.bool)
        for r, i in enumerate(idx):
            n = feats[i][0].shape[0]
            f_T[r, :n], valid[r, :n] = feats[i][0], True
        f_G = torch.stack([feats[i][1] for i in idx])
        tgt = torch.tensor([feats[i][2] for i in idx])
        opt.zero_grad()
        loss = description_loss(tuned.decoder(tgt, f_T, f_G, valid), tgt)
        loss.backward()
        opt.step()
    tuned.decoder.eval()
    return tuned


def vqa_scores(pred: Sequence[str], gold: Sequence[str]) -> dict:
    labels = sorted(set(gold) | set(pred))
    index = {a: i for i, a in enumerate(labels)}
    p_ids = [index[a] for a in pred]
    g_ids = [index[a] for a in gold]
    precision, recall, f1, _ = classification_report(p_ids, g_ids, sorted(set(g_ids)))
    acc = float(np.mean([p == g for p, g in zip(pred, gold)])) if gold else 0.0
    return {"accuracy": acc, "precision": precision, "recall": recall, "f1": f1, "n": len(gold)}


# ---------------------------------------------------------------------------
# attention maps

@dataclass
class AttentionMap:
    image_id: str
    scores: np.ndarray      # (rows, cols) in [0, 1]
    overlay: np.ndarray     # H x W x 3 uint8


@torch.no_grad()
def class_token_attention(model: DefendModel, image: np.ndarray) -> np.ndarray:
    """Final-block class-token attention over patches, averaged over heads: (N_P,)."""
    p = patch_array(np.asarray(image), model.enc_cfg.patch_size)
    x = _device_tensor(model, p.reshape(1, p.shape[0], -1))
    _, weights = model.teacher.encode_global(x, return_weights=True)
    return weights[0, :, 0, 1:].mean(dim=0).double().cpu().numpy()


def export_attention_map(model: DefendModel, image: np.ndarray, image_id: str = "") -> AttentionMap:
    """Min-max normalised class-token attention and a 50% heat-map overlay.

    A constant image, or a map whose range is below FLAT_TOLERANCE, is exported
    as all 0.5.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    s = model.enc_cfg.patch_size
    rows, cols = h // s, w // s
    raw = class_token_attention(model, image)
    span = raw.max() - raw.min()
    if np.ptp(image) < FLAT_TOLERANCE or span < FLAT_TOLERANCE:
        scores = np.full(rows * cols, 0.5)
    else:
        scores = (raw - raw.min()) / span
    grid = scores.reshape(rows, cols)
    heat = np.kron(grid, np.ones((s, s)))
    colour = np.stack([heat, np.zeros_like(heat), 1.0 - heat], axis=-1)
    overlay = np.round((0.5 * image + 0.5 * colour) * 255).astype(np.uint8)
    return AttentionMap(image_id, grid, overlay)
