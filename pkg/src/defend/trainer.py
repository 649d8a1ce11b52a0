"""Three-phase training loop with EMA teacher updates and augmentation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .data import PAD, UNK, SyntheticSample, Vocab, prompt_text, tokenize
from .model import Batch, DefendModel
from .objectives import TERMS, LossReport, LossWeights, combine
from .patching import SamplerConfig, adaptive_sample, patch_array, score_image

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "phase", "cont", "pc", "desc", "total", "lr")
PHASES = ("warmup", "main", "finetune")


class ContractError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class PhaseSpec:
    name: str
    epochs: int
    base_lr: float
    active_losses: tuple
    grad_accum: int = 1


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    max_rotation: float = 10.0
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    crop_scale: tuple = (0.85, 1.0)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, (1.0, 1.0), (1.0, 1.0), (1.0, 1.0))


@dataclass(frozen=True)
class TrainConfig:
    warmup_epochs: int = 2
    main_epochs: int = 20
    finetune_epochs: int = 8
    base_lr: float = 1e-3
    finetune_lr: float = 1e-4
    ema_alpha: float = 0.999
    batch_size: int = 32
    weight_decay: float = 0.05
    grad_accum_steps: int = 4       # fine-tune phase only
    seed: int = 0
    tau: float = 0.07
    symmetric: bool = False
    pairing: str = "pairwise"
    finetune_desc: bool = True
    unk_dropout: float = 0.15
    augment: bool = True
    w_cont: float = 1.0
    w_pc: float = 1.0
    w_desc: float = 1.0

    def __post_init__(self):
        for name in ("warmup_epochs", "main_epochs", "finetune_epochs"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ContractError("ema_alpha must lie in [0, 1]")
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ContractError("batch_size and grad_accum_steps must be >= 1")
        if not 0.0 <= self.unk_dropout < 1.0:
            raise ContractError("unk_dropout must lie in [0, 1)")
        LossWeights(self.w_cont, self.w_pc, self.w_desc)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_cont, self.w_pc, self.w_desc)

    @property
    def phases(self) -> list[PhaseSpec]:
        ft = TERMS if self.finetune_desc else ("cont", "pc")
        return [
            PhaseSpec("warmup", self.warmup_epochs, self.base_lr, ("cont",)),
            PhaseSpec("main", self.main_epochs, self.base_lr, TERMS),
            PhaseSpec("finetune", self.finetune_epochs, self.finetune_lr, ft, self.grad_accum_steps),
        ]


@dataclass(frozen=True)
class PhaseSchedule:
    """Phase lengths in optimizer steps."""

    warmup_steps: int
    main_steps: int
    finetune_steps: int
    base_lr: float = 1e-3
    finetune_lr: float = 1e-4

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.main_steps + self.finetune_steps

    def phase_of(self, step: int) -> str:
        if step <= self.warmup_steps:
            return "warmup"
        if step <= self.warmup_steps + self.main_steps:
            return "main"
        return "finetune"


def steps_per_epoch(n_samples: int, batch_size: int, accum: int = 1) -> int:
    return math.ceil(math.ceil(n_samples / batch_size) / accum)


def schedule_for(cfg: TrainConfig, n_samples: int) -> PhaseSchedule:
    spe = steps_per_epoch(n_samples, cfg.batch_size)
    return PhaseSchedule(
        cfg.warmup_epochs * spe,
        cfg.main_epochs * spe,
        cfg.finetune_epochs * steps_per_epoch(n_samples, cfg.batch_size, cfg.grad_accum_steps),
        cfg.base_lr, cfg.finetune_lr,
    )


def lr_at(step: int, schedule: PhaseSchedule) -> float:
    """Linear ramp 0 -> base_lr over warm-up, cosine base_lr -> 0 over main, then constant."""
    if step < 0 or step > schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    w, m = schedule.warmup_steps, schedule.main_steps
    if step <= w:
        return schedule.base_lr * step / w if w else schedule.base_lr
    if step <= w + m:
        t = (step - w) / m
        return 0.5 * schedule.base_lr * (1.0 + math.cos(math.pi * t))
    return schedule.finetune_lr


# ---------------------------------------------------------------------------
# EMA

@torch.no_grad()
def ema_update(teacher_params: Sequence[torch.Tensor], student_params: Sequence[torch.Tensor],
               alpha: float) -> None:
    """In place: teacher <- alpha * teacher + (1 - alpha) * student."""
    teacher_params, student_params = list(teacher_params), list(student_params)
    if len(teacher_params) != len(student_params):
        raise ContractError(f"{len(teacher_params)} teacher vs {len(student_params)} student tensors")
    for t, s in zip(teacher_params, student_params):
        if t.shape != s.shape:
            raise ContractError(f"shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must lie in [0, 1]")
    for t, s in zip(teacher_params, student_params):
        if alpha == 0.0:
            t.copy_(s)
        elif alpha != 1.0:
            t.mul_(alpha).add_(s, alpha=1.0 - alpha)


def update_teacher(model: DefendModel, alpha: float) -> None:
    ema_update(model.teacher.parameters(), model.student.parameters(), alpha)


# ---------------------------------------------------------------------------
# augmentation and batching

def _resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w, _ = img.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([
        ndimage.map_coordinates(img[..., c], [yy, xx], order=1, mode="nearest") for c in range(img.shape[2])
    ], axis=-1)


def augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Flip, rotate, brightness, contrast, crop-resize (in that order); clipped to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    if rng.random() < cfg.flip_p:
        img = img[:, ::-1]
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    if angle != 0.0:
        img = ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    b = rng.uniform(*cfg.brightness)
    if b != 1.0:
        img = img * b
    c = rng.uniform(*cfg.contrast)
    if c != 1.0:
        mean = img.mean()
        img = (img - mean) * c + mean
    scale = rng.uniform(*cfg.crop_scale)
    if scale != 1.0:
        ch, cw = max(1, round(h * math.sqrt(scale))), max(1, round(w * math.sqrt(scale)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = _resize(img[top:top + ch, left:left + cw], h, w)
    return np.clip(img, 0.0, 1.0)


def _trim(ids: np.ndarray) -> np.ndarray:
    used = (ids != PAD).any(axis=0)
    last = int(np.flatnonzero(used).max()) + 1 if used.any() else 1
    return ids[:, :last]


def make_batch(images: Sequence[np.ndarray], prompts: Sequence[str], vocab: Vocab, patch_size: int,
               sampler: SamplerConfig, max_tokens: int, descriptions: Optional[Sequence[str]] = None,
               desc_len: int = 32) -> Batch:
    """Patchify and sample each image, tokenise the texts; pads to the batch maximum."""
    full, kept = [], []
    for img in images:
        p = patch_array(img, patch_size)
        full.append(p.reshape(p.shape[0], -1))
        kept.append(adaptive_sample(score_image(img, patch_size, sampler)[:, 3], sampler))
    full = np.stack(full)
    b, n_p, pd = full.shape
    ns = max(len(k) for k in kept)
    patches = np.zeros((b, ns, pd))
    index = np.zeros((b, ns), dtype=np.int64)
    valid = np.zeros((b, ns), dtype=bool)
    for i, k in enumerate(kept):
        patches[i, :len(k)] = full[i, k]
        index[i, :len(k)] = k
        valid[i, :len(k)] = True
    text = _trim(np.array([tokenize(t, vocab, max_tokens) for t in prompts]))
    desc = None
    if descriptions is not None:
        desc = torch.from_numpy(_trim(np.array([tokenize(t, vocab, desc_len) for t in descriptions])))
    dtype = torch.get_default_dtype()
    return Batch(
        full_patches=torch.from_numpy(full).to(dtype),
        patches=torch.from_numpy(patches).to(dtype),
        patch_index=torch.from_numpy(index),
        patch_valid=torch.from_numpy(valid),
        text_ids=torch.from_numpy(text),
        text_valid=torch.from_numpy(text != PAD),
        desc_ids=desc,
    )


def training_prompt(sample: SyntheticSample, rng: np.random.Generator, unk_dropout: float) -> str:
    """Prompt text, with the product name masked to <unk> at rate ``unk_dropout``.

    Masking teaches the text side what an unnamed product of a known category
    looks like, which is how names missing from the vocabulary are read later.
    """
    if unk_dropout > 0 and rng.random() < unk_dropout:
        return prompt_text(sample.record.category, "<unk>")
    return sample.prompt_text


def sample_batch(samples: Sequence[SyntheticSample], ids: Sequence[int], vocab: Vocab, model_cfg,
                 sampler: SamplerConfig, cfg: TrainConfig, epoch: int,
                 aug: Optional[AugmentConfig] = None) -> Batch:
    images, prompts = [], []
    for idx in ids:
        rng = np.random.default_rng([cfg.seed, epoch, idx])
        s = samples[idx]
        images.append(augment(s.image, rng, aug or AugmentConfig()) if cfg.augment else s.image)
        prompts.append(training_prompt(s, rng, cfg.unk_dropout))
    return make_batch(images, prompts, vocab, model_cfg.patch_size, sampler, model_cfg.max_tokens,
                      [samples[i].description_text for i in ids])


def plain_batch(samples: Sequence[SyntheticSample], vocab: Vocab, model_cfg, sampler: SamplerConfig) -> Batch:
    """Un-augmented batch with unmasked prompts."""
    return make_batch([s.image for s in samples], [s.prompt_text for s in samples], vocab,
                      model_cfg.patch_size, sampler, model_cfg.max_tokens,
                      [s.description_text for s in samples])


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class ModelState:
    model: DefendModel
    optimizer: torch.optim.Optimizer
    step: int = 0


def make_optimizer(model: DefendModel, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for _, p in model.trainable_parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.base_lr, betas=(0.9, 0.999), eps=1e-8,
    )


def new_state(model: DefendModel, cfg: TrainConfig) -> ModelState:
    return ModelState(model, make_optimizer(model, cfg))


def compute_loss(model: DefendModel, batch: Batch, active, cfg: TrainConfig):
    terms = model.loss_terms(batch, active, cfg.tau, cfg.pairing, cfg.symmetric)
    return combine(terms, cfg.weights, batch.size)


def train_step(batches, state: ModelState, cfg: TrainConfig, active=TERMS,
               lr: Optional[float] = None) -> LossReport:
    """One optimizer step over one batch, or several accumulated micro-batches.

    The teacher is excluded from the graph and only moves through the EMA
    applied after the update.
    """
    if isinstance(batches, Batch):
        batches = [batches]
    if not batches or any(b.size == 0 for b in batches):
        raise ContractError("train_step needs a non-empty batch")
    model, opt = state.model, state.optimizer
    if lr is not None:
        for g in opt.param_groups:
            g["lr"] = lr
    model.train()
    opt.zero_grad(set_to_none=True)
    reports = []
    for batch in batches:
        total, report = compute_loss(model, batch, active, cfg)
        (total / len(batches)).backward()
        reports.append(report)
    opt.step()
    update_teacher(model, cfg.ema_alpha)
    state.step += 1
    if len(reports) == 1:
        return reports[0]
    k = len(reports)
    return LossReport(
        cont=sum(r.cont for r in reports) / k, pc=sum(r.pc for r in reports) / k,
        desc=sum(r.desc for r in reports) / k, total=sum(r.total for r in reports) / k,
        batch_size=sum(r.batch_size for r in reports), active=reports[0].active,
    )


@torch.no_grad()
def evaluate_loss(model: DefendModel, batch: Batch, cfg: TrainConfig, active=TERMS) -> LossReport:
    was_training = model.training
    model.eval()
    try:
        return compute_loss(model, batch, active, cfg)[1]
    finally:
        model.train(was_training)


# ---------------------------------------------------------------------------
# loop

class LossLog:
    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not append or not self.path.exists()
        self._fh = open(self.path, "a" if append else "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh)
        if fresh:
            self._w.writerow(LOG_COLUMNS)

    def write(self, step: int, phase: str, r: LossReport, lr: float) -> None:
        self._w.writerow([step, phase, f"{r.cont:.8g}", f"{r.pc:.8g}", f"{r.desc:.8g}",
                          f"{r.total:.8g}", f"{lr:.8g}"])
        self._fh.flush()

    def close(self):
        self._fh.close()


def epoch_order(n: int, seed: int, phase_index: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 1000 + phase_index, epoch]).permutation(n)


@dataclass
class TrainProgress:
    step: int = 0
    phase_index: int = 0   # index of the next phase to run
    reports: list = field(default_factory=list)


def run_training(state: ModelState, samples: Sequence[SyntheticSample], vocab: Vocab,
                 sampler: SamplerConfig, cfg: TrainConfig, log_path,
                 start_phase: int = 0, max_steps: Optional[int] = None,
                 on_phase_end: Optional[Callable[[str, ModelState], None]] = None) -> TrainProgress:
    """Runs the phases from ``start_phase`` on; appends one CSV row per optimizer step."""
    model = state.model
    enc = model.enc_cfg
    schedule = schedule_for(cfg, len(samples))
    progress = TrainProgress(step=state.step, phase_index=start_phase)
    loss_log = LossLog(log_path, append=start_phase > 0)
    try:
        for pi, phase in enumerate(cfg.phases):
            if pi < start_phase:
                continue
            for epoch in range(phase.epochs):
                order = epoch_order(len(samples), cfg.seed, pi, epoch)
                chunks = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
                for j in range(0, len(chunks), phase.grad_accum):
                    if max_steps is not None and state.step >= max_steps:
                        return progress
                    epoch_key = pi * 10_000 + epoch
                    micro = [sample_batch(samples, ids, vocab, enc, sampler, cfg, epoch_key)
                             for ids in chunks[j:j + phase.grad_accum]]
                    lr = lr_at(state.step + 1, schedule)
                    report = train_step(micro, state, cfg, phase.active_losses, lr)
                    loss_log.write(state.step, phase.name, report, lr)
                    progress.step = state.step
                    progress.reports.append(report)
            progress.phase_index = pi + 1
            log.info("phase %s done at step %d", phase.name, state.step)
            if on_phase_end is not None:
                on_phase_end(phase.name, state)
    finally:
        loss_log.close()
    return progress


def read_loss_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def unk_rate(batch: Batch) -> float:
    return float((batch.text_ids == UNK).any(dim=1).float().mean())
