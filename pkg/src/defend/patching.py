"""Patch grid extraction, saliency scoring and the adaptive patch sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Max |Sobel| per axis on [0, 1] data is 4 (1 + 2 + 1), so the magnitude tops out at 4*sqrt(2).
SOBEL_MAX_MAGNITUDE = 4.0 * math.sqrt(2.0)
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class PatchGridError(ValueError):
    pass


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray
    grid_index: tuple[int, int]
    flat_index: int


@dataclass(frozen=True)
class SaliencyScore:
    edge: float
    text: float
    contrast: float
    total: float


@dataclass(frozen=True)
class SamplerConfig:
    lambda_threshold: float = 0.3
    alpha: float = 0.4
    beta: float = 0.4
    gamma: float = 0.2
    min_retention_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.lambda_threshold <= 1.0:
            raise ValueError("lambda_threshold must lie in [0, 1]")
        if not 0.0 < self.min_retention_fraction <= 1.0:
            raise ValueError("min_retention_fraction must lie in (0, 1]")
        if not math.isclose(self.alpha + self.beta + self.gamma, 1.0, abs_tol=1e-9):
            raise ValueError(
                f"saliency weights must sum to 1, got {self.alpha + self.beta + self.gamma}"
            )


def grid_shape(height: int, width: int, patch_size: int) -> tuple[int, int]:
    if patch_size <= 0 or height % patch_size or width % patch_size:
        raise PatchGridError(
            f"image {height}x{width} is not divisible by patch size {patch_size}"
        )
    return height // patch_size, width // patch_size


def num_patches(height: int, width: int, patch_size: int) -> int:
    rows, cols = grid_shape(height, width, patch_size)
    return rows * cols


def patch_array(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, C) -> (N_P, s, s, C) in row-major grid order."""
    h, w, c = image.shape
    rows, cols = grid_shape(h, w, patch_size)
    s = patch_size
    return image.reshape(rows, s, cols, s, c).transpose(0, 2, 1, 3, 4).reshape(rows * cols, s, s, c)


def patchify(image: np.ndarray, patch_size: int) -> list[Patch]:
    h, w, _ = image.shape
    _, cols = grid_shape(h, w, patch_size)
    blocks = patch_array(image, patch_size)
    return [Patch(blocks[i], divmod(i, cols), i) for i in range(len(blocks))]


def reassemble(patches: list[Patch], height: int, width: int) -> np.ndarray:
    s = patches[0].pixels.shape[0]
    out = np.zeros((height, width, patches[0].pixels.shape[2]), dtype=patches[0].pixels.dtype)
    for p in patches:
        r, c = p.grid_index
        out[r * s:(r + 1) * s, c * s:(c + 1) * s] = p.pixels
    return out


def luminance(pixels: np.ndarray) -> np.ndarray:
    return pixels @ LUMA_WEIGHTS


def sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel responses over the last two axes with edge-replicate padding.

    Returns (gx, gy): gx responds to vertical edges, gy to horizontal ones.
    """
    pad = [(0, 0)] * (gray.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(gray, pad, mode="edge")
    tl, tc, tr = p[..., :-2, :-2], p[..., :-2, 1:-1], p[..., :-2, 2:]
    ml, mr = p[..., 1:-1, :-2], p[..., 1:-1, 2:]
    bl, bc, br = p[..., 2:, :-2], p[..., 2:, 1:-1], p[..., 2:, 2:]
    gx = (tr + 2 * mr + br) - (tl + 2 * ml + bl)
    gy = (bl + 2 * bc + br) - (tl + 2 * tc + tr)
    return gx, gy


def _edge_and_text(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx, gy = sobel(gray)
    edge = np.hypot(gx, gy).mean(axis=(-2, -1)) / SOBEL_MAX_MAGNITUDE
    # stroke-density proxy for text: share of pixels with a strong horizontal-edge response
    resp = np.abs(gy)
    peak = resp.max(axis=(-2, -1), keepdims=True)
    strong = (resp > 0.5 * peak) & (peak > 1e-9)
    text = np.clip(strong.mean(axis=(-2, -1)), 0.0, 1.0)
    return np.clip(edge, 0.0, 1.0), text


def saliency_score(patch: Patch, neighbors: list[Patch], cfg: SamplerConfig) -> SaliencyScore:
    gray = luminance(patch.pixels)
    edge, text = _edge_and_text(gray)
    if neighbors:
        neighbor_luma = np.mean([luminance(n.pixels).mean() for n in neighbors])
        contrast = float(np.clip(abs(gray.mean() - neighbor_luma), 0.0, 1.0))
    else:
        contrast = 0.0
    edge, text = float(edge), float(text)
    total = cfg.alpha * edge + cfg.beta * text + cfg.gamma * contrast
    return SaliencyScore(edge, text, contrast, total)


def grid_neighbors(flat_index: int, rows: int, cols: int) -> list[int]:
    r, c = divmod(flat_index, cols)
    out = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if (dr or dc) and 0 <= r + dr < rows and 0 <= c + dc < cols:
                out.append((r + dr) * cols + c + dc)
    return out


def score_image(image: np.ndarray, patch_size: int, cfg: SamplerConfig) -> np.ndarray:
    """Vectorised saliency totals for every patch of ``image``; shape (N_P, 4).

    Columns are edge, text, contrast, total and agree with ``saliency_score``.
    """
    h, w, _ = image.shape
    rows, cols = grid_shape(h, w, patch_size)
    gray = luminance(patch_array(image, patch_size))
    edge, text = _edge_and_text(gray)

    # neighbour mean luminance via a 3x3 box sum over the grid of patch means
    means = gray.mean(axis=(-2, -1)).reshape(rows, cols)
    padded = np.pad(means, 1)
    ones = np.pad(np.ones_like(means), 1)
    box = sum(padded[1 + dr:1 + dr + rows, 1 + dc:1 + dc + cols]
              for dr in (-1, 0, 1) for dc in (-1, 0, 1)) - means
    count = sum(ones[1 + dr:1 + dr + rows, 1 + dc:1 + dc + cols]
                for dr in (-1, 0, 1) for dc in (-1, 0, 1)) - 1
    neighbor = np.divide(box, count, out=np.zeros_like(box), where=count > 0)
    contrast = np.where(count > 0, np.abs(means - neighbor), 0.0).reshape(-1)
    contrast = np.clip(contrast, 0.0, 1.0)

    total = cfg.alpha * edge + cfg.beta * text + cfg.gamma * contrast
    return np.stack([edge, text, contrast, total], axis=1)


def adaptive_sample(totals, cfg: SamplerConfig) -> np.ndarray:
    """Indices of retained patches, ascending.

    Keeps every patch scoring strictly above the threshold; if that leaves fewer
    than ceil(min_retention_fraction * N) patches, keeps that many top scorers
    instead (ties go to the lower index).
    """
    totals = np.asarray(
        [s.total if isinstance(s, SaliencyScore) else s for s in totals], dtype=float
    )
    n = len(totals)
    keep = np.flatnonzero(totals > cfg.lambda_threshold)
    floor = max(1, math.ceil(cfg.min_retention_fraction * n - 1e-9))
    if len(keep) < floor:
        order = np.lexsort((np.arange(n), -totals))
        keep = np.sort(order[:floor])
    return keep


def sample_image(image: np.ndarray, patch_size: int, cfg: SamplerConfig) -> tuple[np.ndarray, np.ndarray]:
    """(retained indices, per-patch totals) for one image."""
    totals = score_image(image, patch_size, cfg)[:, 3]
    return adaptive_sample(totals, cfg), totals
