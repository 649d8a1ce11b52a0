"""Synthetic product dataset in the hierarchical annotation format, plus
validation, vocabulary and tokenisation."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
from PIL import Image

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")

TAXONOMY = {
    "Combustible": ["Cigarettes", "Cigars", "Pipe Tobacco", "Hookah/Shisha"],
    "Non-Combustible": ["E-cigarettes/Vapes", "Smokeless Tobacco", "Heated Tobacco"],
    "Nicotine Replacement": ["Patches", "Gums", "Lozenges"],
}
CATEGORY_OF = {sub: cat for cat, subs in TAXONOMY.items() for sub in subs}

# Interleaved by category so any prefix mixes categories; the last selected
# class(es) become the zero-shot hold-out.
CLASS_ORDER = [
    "Cigarettes", "E-cigarettes/Vapes", "Patches", "Cigars", "Smokeless Tobacco",
    "Gums", "Pipe Tobacco", "Lozenges", "Heated Tobacco", "Hookah/Shisha",
]

PROMPT_TEMPLATE = "a photo of a {sub_category} product , {category}"

MIN_CLASSES = 4
ZERO_SHOT_FRACTION = 0.1
SPLIT_FRACTIONS = (0.7, 0.1, 0.1)  # train / val / test, of the seen classes' share


class DataConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schema

_STR_LIST = [str]
RECORD_SCHEMA: dict = {
    "query": str,
    "image_id": str,
    "category": str,
    "sub-category": str,
    "health_impact_labels": {
        "severity": [{"level": str, "impact": str, "visual_cues": _STR_LIST}],
        "duration": [{"type": str, "effects": _STR_LIST, "visual_indicators": _STR_LIST}],
    },
    "usage_context": {
        "settings": [{"type": str, "visual_cues": _STR_LIST}],
        "regulatory_zones": [{"type": str, "visual_cues": _STR_LIST}],
    },
    "content_purpose": {
        "marketing": [{"type": str, "visual_elements": _STR_LIST}],
        "regulatory": [{"type": str, "visual_elements": _STR_LIST}],
    },
    "environmental_impact": {
        "type": str,
        "description": str,
        "visual_indicators": {"litter": _STR_LIST, "pollution": _STR_LIST},
    },
}
OPTIONAL_FIELDS = {"imageUrl": str}


def _type_name(value) -> str:
    return {dict: "object", list: "list", str: "string"}.get(type(value), type(value).__name__)


def _check(value, schema, path: str, errors: list[str]) -> None:
    if isinstance(schema, dict):
        if not isinstance(value, dict):
            errors.append(f"wrong type for {path}: expected object, got {_type_name(value)}")
            return
        for key, sub in schema.items():
            sub_path = f"{path}.{key}" if path else key
            if key not in value:
                errors.append(f"missing field: {sub_path}")
            else:
                _check(value[key], sub, sub_path, errors)
    elif isinstance(schema, list):
        if not isinstance(value, list):
            errors.append(f"wrong type for {path}: expected list, got {_type_name(value)}")
            return
        for i, item in enumerate(value):
            _check(item, schema[0], f"{path}[{i}]", errors)
    elif not isinstance(value, schema):
        errors.append(f"wrong type for {path}: expected {_type_name(schema())}, got {_type_name(value)}")


def validate_record(obj: Any) -> list[str]:
    """Every schema violation in ``obj``; an empty list means the record is valid."""
    errors: list[str] = []
    _check(obj, RECORD_SCHEMA, "", errors)
    if not isinstance(obj, dict):
        return errors
    for key, typ in OPTIONAL_FIELDS.items():
        if key in obj and not isinstance(obj[key], typ):
            errors.append(f"wrong type for {key}: expected {_type_name(typ())}, got {_type_name(obj[key])}")
    cat = obj.get("category")
    if isinstance(cat, str) and cat not in TAXONOMY:
        errors.append(f"invalid value for category: {cat!r} (allowed: {', '.join(TAXONOMY)})")
    sub = obj.get("sub-category")
    if isinstance(sub, str) and isinstance(cat, str) and cat in TAXONOMY and sub not in TAXONOMY[cat]:
        errors.append(
            f"invalid value for sub-category: {sub!r} (allowed for {cat}: {', '.join(TAXONOMY[cat])})"
        )
    return errors


class RecordError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


@dataclass
class AnnotationRecord:
    query: str
    image_id: str
    category: str
    sub_category: str
    health_impact_labels: dict
    usage_context: dict
    content_purpose: dict
    environmental_impact: dict
    image_url: Optional[str] = None

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotationRecord":
        errors = validate_record(obj)
        if errors:
            raise RecordError(errors)
        return cls(
            query=obj["query"], image_id=obj["image_id"], category=obj["category"],
            sub_category=obj["sub-category"],
            health_impact_labels=obj["health_impact_labels"], usage_context=obj["usage_context"],
            content_purpose=obj["content_purpose"], environmental_impact=obj["environmental_impact"],
            image_url=obj.get("imageUrl"),
        )

    def to_json(self) -> dict:
        out = {"query": self.query}
        if self.image_url is not None:
            out["imageUrl"] = self.image_url
        out.update({
            "image_id": self.image_id,
            "category": self.category,
            "sub-category": self.sub_category,
            "health_impact_labels": self.health_impact_labels,
            "usage_context": self.usage_context,
            "content_purpose": self.content_purpose,
            "environmental_impact": self.environmental_impact,
        })
        return out

    @property
    def has_warning(self) -> bool:
        return any(r["type"] == "warning labels" for r in self.content_purpose["regulatory"])


# ---------------------------------------------------------------------------
# text

def prompt_text(category: str, sub_category: str) -> str:
    return PROMPT_TEMPLATE.format(sub_category=sub_category, category=category).lower()


def description_text(rec: AnnotationRecord) -> str:
    sev = rec.health_impact_labels["severity"][0]
    dur = rec.health_impact_labels["duration"][0]
    setting = rec.usage_context["settings"][0]["type"]
    marketing = rec.content_purpose["marketing"][0]["type"]
    regulatory = rec.content_purpose["regulatory"][0]["type"]
    text = (
        f"{rec.sub_category} , a {rec.category} product . {sev['level']} severity {sev['impact']} . "
        f"{dur['type']} effects . used in {setting} . {marketing} with {regulatory} ."
    )
    return text.lower()


def vqa_pairs(rec: AnnotationRecord) -> list[tuple[str, str]]:
    return [
        ("what type of product is this ?", rec.sub_category.lower()),
        ("which category does this product belong to ?", rec.category.lower()),
        ("is there a health warning on the package ?", "yes" if rec.has_warning else "no"),
    ]


def words(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the four reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)

    def encode(self, text: str) -> list[int]:
        return [self.id(w) for w in words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return " ".join(out)


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Reserved ids first, then words by descending frequency, ties alphabetical."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for text in corpus for w in words(text))
    for s in SPECIALS:
        counts.pop(s, None)
    kept = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    return Vocab(list(SPECIALS) + kept)


def tokenize(text: str, vocab: Vocab, max_len: int) -> list[int]:
    """[BOS] words [EOS], truncated so EOS survives, then right-padded to ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must leave room for BOS and EOS")
    ids = [BOS] + vocab.encode(text) + [EOS]
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS]
    return ids + [PAD] * (max_len - len(ids))


# ---------------------------------------------------------------------------
# per-class annotation templates

_ANNOTATIONS = {
    "Cigarettes": dict(severity=("high", "lung cancer"), duration="long-term",
                       settings=["social settings", "public spaces"], marketing="direct advertisement",
                       env=("solid waste", "cigarette butts")),
    "Cigars": dict(severity=("high", "oral cancer"), duration="long-term",
                   settings=["social settings", "private spaces"], marketing="product placement",
                   env=("air pollution", "smoke emissions")),
    "Pipe Tobacco": dict(severity=("high", "cardiovascular disease"), duration="long-term",
                         settings=["private spaces", "individual use"], marketing="product placement",
                         env=("solid waste", "packaging materials")),
    "Hookah/Shisha": dict(severity=("medium", "respiratory issues"), duration="short-term",
                          settings=["social settings", "recreational venues"], marketing="direct advertisement",
                          env=("air pollution", "indoor air quality")),
    "E-cigarettes/Vapes": dict(severity=("medium", "respiratory issues"), duration="short-term",
                               settings=["public spaces", "social settings"], marketing="direct advertisement",
                               env=("electronic waste", "battery disposal")),
    "Smokeless Tobacco": dict(severity=("high", "oral cancer"), duration="long-term",
                              settings=["individual use", "private spaces"], marketing="product placement",
                              env=("chemical waste", "nicotine solutions")),
    "Heated Tobacco": dict(severity=("medium", "cardiovascular disease"), duration="long-term",
                           settings=["private spaces", "public spaces"], marketing="direct advertisement",
                           env=("electronic waste", "cartridge disposal")),
    "Patches": dict(severity=("low", "skin irritation"), duration="short-term",
                    settings=["individual use", "private spaces"], marketing="product placement",
                    env=("solid waste", "packaging materials")),
    "Gums": dict(severity=("low", "mouth irritation"), duration="short-term",
                 settings=["individual use", "social settings"], marketing="direct advertisement",
                 env=("solid waste", "packaging materials")),
    "Lozenges": dict(severity=("low", "mouth irritation"), duration="short-term",
                     settings=["individual use", "private spaces"], marketing="product placement",
                     env=("solid waste", "packaging materials")),
}


def make_record(image_id: str, sub_category: str, has_warning: bool, setting_choice: int) -> AnnotationRecord:
    info = _ANNOTATIONS[sub_category]
    category = CATEGORY_OF[sub_category]
    level, impact = info["severity"]
    setting = info["settings"][setting_choice % len(info["settings"])]
    env_type, litter = info["env"]
    regulatory = (
        [{"type": "warning labels", "visual_elements": ["mandatory text content", "visual warning elements"]}]
        if has_warning else
        [{"type": "compliance indicators", "visual_elements": ["minimum age requirements"]}]
    )
    return AnnotationRecord(
        query=f"{sub_category.lower()} product photo",
        image_id=image_id,
        category=category,
        sub_category=sub_category,
        health_impact_labels={
            "severity": [{"level": level, "impact": impact, "visual_cues": [f"{sub_category.lower()} packaging"]}],
            "duration": [{"type": info["duration"], "effects": [impact],
                          "visual_indicators": ["product in use"]}],
        },
        usage_context={
            "settings": [{"type": setting, "visual_cues": ["background scene"]}],
            "regulatory_zones": [{"type": "designated areas", "visual_cues": []}],
        },
        content_purpose={
            "marketing": [{"type": info["marketing"], "visual_elements": ["brand prominence"]}],
            "regulatory": regulatory,
        },
        environmental_impact={
            "type": env_type,
            "description": f"{env_type} from {sub_category.lower()}",
            "visual_indicators": {"litter": [litter], "pollution": []},
        },
        image_url=f"images/{image_id}.png",
    )


# ---------------------------------------------------------------------------
# procedural images

# shape, body rgb, accent rgb, body pattern, warning band (centre y, height) relative to the object
_ARCHETYPES = {
    "Cigarettes": ("box", (0.78, 0.12, 0.10), (0.95, 0.93, 0.90), "pinstripe", (0.78, 0.22)),
    "Cigars": ("stick", (0.45, 0.27, 0.12), (0.85, 0.65, 0.20), "diagonal", (0.50, 0.45)),
    "Pipe Tobacco": ("pouch", (0.35, 0.20, 0.10), (0.90, 0.75, 0.30), "dots", (0.25, 0.25)),
    "Hookah/Shisha": ("vase", (0.85, 0.55, 0.15), (0.60, 0.15, 0.35), "rings", (0.65, 0.18)),
    "E-cigarettes/Vapes": ("pen", (0.12, 0.18, 0.45), (0.20, 0.85, 0.85), "plain", (0.45, 0.15)),
    "Smokeless Tobacco": ("tin", (0.40, 0.48, 0.58), (0.85, 0.88, 0.92), "rings", (0.50, 0.22)),
    "Heated Tobacco": ("device", (0.15, 0.50, 0.55), (0.90, 0.90, 0.95), "hatch", (0.20, 0.20)),
    "Patches": ("square", (0.92, 0.95, 0.90), (0.20, 0.60, 0.30), "grid", (0.82, 0.20)),
    "Gums": ("blister", (0.25, 0.65, 0.35), (0.95, 0.97, 0.95), "plain", (0.15, 0.20)),
    "Lozenges": ("pills", (0.60, 0.85, 0.60), (0.98, 0.98, 0.92), "plain", (0.85, 0.18)),
}

# (half-width, half-height) of the object's bounding box, relative to the image
_SHAPE_EXTENT = {
    "box": (0.26, 0.38), "stick": (0.44, 0.13), "pouch": (0.40, 0.30), "vase": (0.26, 0.42),
    "pen": (0.10, 0.42), "tin": (0.36, 0.36), "device": (0.22, 0.38), "square": (0.32, 0.32),
    "blister": (0.38, 0.28), "pills": (0.40, 0.30),
}

GRAIN_PERIOD_PX = (4, 4)
GRAIN_WAVE = 2.0
GRAIN_AMPLITUDE = 0.2
PATTERN_STRENGTH = 0.9

_BACKGROUNDS = [(0.82, 0.78, 0.70), (0.55, 0.58, 0.62), (0.30, 0.28, 0.26), (0.70, 0.76, 0.72)]


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Object silhouette; u, v in [-1, 1] across the bounding box."""
    if kind in ("box", "square", "device", "pouch"):
        r = 0.25 if kind == "pouch" else 0.08
        du, dv = np.maximum(np.abs(u) - (1 - r), 0), np.maximum(np.abs(v) - (1 - r), 0)
        return (du ** 2 + dv ** 2 <= r ** 2) & (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if kind in ("stick", "pen"):
        # capsule along the long axis
        if kind == "stick":
            du = np.maximum(np.abs(u) - 0.7, 0) / 0.3
            return du ** 2 + v ** 2 <= 1
        dv = np.maximum(np.abs(v) - 0.75, 0) / 0.25
        return u ** 2 + dv ** 2 <= 1
    if kind == "tin":
        return u ** 2 + v ** 2 <= 1
    if kind == "vase":
        body = u ** 2 + ((v - 0.45) / 0.55) ** 2 <= 1
        neck = (np.abs(u) <= 0.22) & (v > -1) & (v <= 0.2)
        bowl = (u / 0.6) ** 2 + ((v + 0.85) / 0.15) ** 2 <= 1
        return body | neck | bowl
    if kind == "blister":
        pack = (np.abs(u) <= 1) & (np.abs(v) <= 1)
        return pack
    if kind == "pills":
        pack = (np.abs(u) <= 1) & (np.abs(v) <= 1)
        return pack
    raise ValueError(kind)


def _pattern(kind: str, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Printed packaging texture in [0, 1]; px, py are pixel offsets from the object centre."""
    if kind == "pinstripe":
        return (np.floor(py) % 4 < 2).astype(float)
    if kind == "diagonal":
        return (np.floor(px + py) % 4 < 2).astype(float)
    if kind == "dots":
        return ((np.floor(px) % 4 < 2) & (np.floor(py) % 4 < 2)).astype(float)
    if kind == "rings":
        return (np.floor(np.hypot(px, py)) % 4 < 2).astype(float)
    if kind == "vertical":
        return (np.floor(px) % 4 < 2).astype(float)
    if kind == "grid":
        return ((np.floor(px) % 4 < 2) ^ (np.floor(py) % 4 < 2)).astype(float)
    if kind == "hatch":
        return ((np.floor(px + py) % 4 == 0) | (np.floor(px - py) % 4 == 0)).astype(float)
    return np.zeros_like(px)


def render_image(sub_category: str, size: int, rng: np.random.Generator, has_warning: bool) -> np.ndarray:
    """Procedural H x W x 3 image, quantised to 8-bit levels so PNG round-trips exactly."""
    return render_with_band(sub_category, size, rng, has_warning)[0]


def render_with_band(sub_category: str, size: int, rng: np.random.Generator, has_warning: bool):
    """(image, H x W bool mask of the warning band); the mask is all False without a band."""
    shape, body, accent, pattern, (band_y, band_h) = _ARCHETYPES[sub_category]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy, xx = (yy + 0.5) / size, (xx + 0.5) / size

    # background: base tone with a wood-grain or checker texture
    bg = np.array(_BACKGROUNDS[rng.integers(len(_BACKGROUNDS))]) + rng.uniform(-0.05, 0.05, 3)
    period = int(rng.integers(GRAIN_PERIOD_PX[0], GRAIN_PERIOD_PX[1] + 1))
    phase = rng.uniform(0, 2 * np.pi)
    wave = GRAIN_WAVE * np.sin(xx * 2 * np.pi * rng.uniform(1, 2) + phase)
    tex = (np.floor(yy * size + wave) % period < period / 2) * 2.0 - 1.0
    img = bg + GRAIN_AMPLITUDE * tex[..., None]

    hw, hh = _SHAPE_EXTENT[shape]
    scale = rng.uniform(0.88, 1.05)
    hw, hh = hw * scale, hh * scale
    cx = 0.5 + rng.uniform(-0.06, 0.06)
    cy = 0.5 + rng.uniform(-0.06, 0.06)
    u = (xx - cx) / hw
    v = (yy - cy) / hh
    mask = _shape_mask(shape, u, v)
    body_rgb = np.clip(np.array(body) + rng.uniform(-0.04, 0.04, 3), 0, 1)
    accent_rgb = np.array(accent)
    tex = _pattern(pattern, (xx - cx) * size, (yy - cy) * size)
    obj = body_rgb + PATTERN_STRENGTH * tex[..., None] * (accent_rgb - body_rgb)
    # shading along the vertical axis
    obj = obj * (1.0 - 0.12 * v[..., None])
    img = np.where(mask[..., None], obj, img)

    if shape == "blister":
        cells = (np.abs(((u + 1) * 1.5) % 1 - 0.5) < 0.32) & (np.abs(((v + 1) * 1.0) % 1 - 0.5) < 0.3)
        img = np.where((mask & cells)[..., None], accent_rgb * 0.95, img)
    elif shape == "pills":
        pu, pv = ((u + 1) * 1.5) % 1 - 0.5, ((v + 1) * 1.0) % 1 - 0.5
        pills = np.abs(pu) / 0.36 + np.abs(pv) / 0.34 <= 1  # diamonds
        img = np.where((mask & pills)[..., None], accent_rgb, img)
    elif shape == "device":
        button = ((u) / 0.35) ** 2 + ((v - 0.55) / 0.18) ** 2 <= 1
        img = np.where((mask & button)[..., None], accent_rgb, img)
    elif shape == "box":
        lid = mask & (v < -0.62)
        img = np.where(lid[..., None], accent_rgb, img)

    band = np.zeros((size, size), dtype=bool)
    if has_warning:
        # light band with rows of short dark strokes standing in for printed text
        top = cy + (band_y * 2 - 1 - band_h) * hh
        bottom = cy + (band_y * 2 - 1 + band_h) * hh
        band = mask & (yy >= top) & (yy <= bottom)
        img = np.where(band[..., None], np.array([0.96, 0.96, 0.93]), img)
        rows = np.arange(size)
        y0, y1 = int(np.ceil(top * size - 0.5)), int(np.floor(bottom * size - 0.5))
        for r in rows[y0 + 1:y1:2]:
            x = 0
            while x < size:
                run = int(rng.integers(1, 4))
                if rng.random() < 0.7:
                    seg = band[r, x:x + run]
                    img[r, x:x + run][seg] = (0.08, 0.08, 0.08)
                x += run + 1

    img = img + rng.normal(0.0, 0.01, img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255) / 255, band


# ---------------------------------------------------------------------------
# generation, splits, persistence

@dataclass
class SyntheticSample:
    image: np.ndarray
    record: AnnotationRecord
    prompt_text: str
    description_text: str
    class_id: int


@dataclass
class SplitManifest:
    classes: list[str]
    zeroshot_classes: list[str]
    train: list[str]
    val: list[str]
    test: list[str]
    zeroshot: list[str]

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("classes", "zeroshot_classes", "train", "val", "test", "zeroshot")}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitManifest":
        return cls(**{k: list(obj[k]) for k in ("classes", "zeroshot_classes", "train", "val", "test", "zeroshot")})

    @property
    def seen_classes(self) -> list[str]:
        return [c for c in self.classes if c not in self.zeroshot_classes]

    def check(self) -> None:
        parts = [self.train, self.val, self.test, self.zeroshot]
        seen: set[str] = set()
        for part in parts:
            overlap = seen.intersection(part)
            if overlap:
                raise DataConfigError(f"ids in more than one split: {sorted(overlap)[:5]}")
            seen.update(part)


def sample_from_record(record: AnnotationRecord, image: np.ndarray, classes: list[str]) -> SyntheticSample:
    return SyntheticSample(
        image=image,
        record=record,
        prompt_text=prompt_text(record.category, record.sub_category),
        description_text=description_text(record),
        class_id=classes.index(record.sub_category),
    )


def generate_synthetic_dataset(n_per_class: int, n_classes: int, image_size: int = 64,
                               seed: int = 0, patch_size: int = 8):
    """Deterministic synthetic corpus -> (samples, SplitManifest)."""
    if not MIN_CLASSES <= n_classes <= len(CLASS_ORDER):
        raise DataConfigError(f"n_classes must be in [{MIN_CLASSES}, {len(CLASS_ORDER)}], got {n_classes}")
    if n_per_class < 1:
        raise DataConfigError("n_per_class must be positive")
    if image_size <= 0 or patch_size <= 0 or image_size % patch_size:
        raise DataConfigError(f"image_size {image_size} is not divisible by patch size {patch_size}")

    classes = CLASS_ORDER[:n_classes]
    n_zero = math.ceil(ZERO_SHOT_FRACTION * n_classes - 1e-9)
    zero_classes = classes[-n_zero:]
    rng = np.random.default_rng(seed)

    samples = []
    split = {"train": [], "val": [], "test": [], "zeroshot": []}
    idx = 0
    for sub in classes:
        ids = []
        for _ in range(n_per_class):
            image_id = f"syn{idx:05d}"
            idx += 1
            has_warning = bool(rng.random() < 0.85)
            record = make_record(image_id, sub, has_warning, int(rng.integers(2)))
            image = render_image(sub, image_size, rng, has_warning)
            samples.append(sample_from_record(record, image, classes))
            ids.append(image_id)
        if sub in zero_classes:
            split["zeroshot"].extend(ids)
            continue
        order = rng.permutation(len(ids))
        total = sum(SPLIT_FRACTIONS)
        n_train = round(len(ids) * SPLIT_FRACTIONS[0] / total)
        n_val = round(len(ids) * SPLIT_FRACTIONS[1] / total)
        split["train"].extend(ids[i] for i in sorted(order[:n_train]))
        split["val"].extend(ids[i] for i in sorted(order[n_train:n_train + n_val]))
        split["test"].extend(ids[i] for i in sorted(order[n_train + n_val:]))

    manifest = SplitManifest(classes=list(classes), zeroshot_classes=list(zero_classes), **split)
    manifest.check()
    return samples, manifest


def save_dataset(samples: list[SyntheticSample], manifest: SplitManifest, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "dataset.jsonl", "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.record.to_json(), ensure_ascii=False) + "\n")
    with open(out / "splits.json", "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=1)
    for s in samples:
        pixels = np.round(s.image * 255).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(out / "images" / f"{s.record.image_id}.png")
    return out


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class Dataset:
    root: Path
    manifest: SplitManifest
    samples: dict[str, SyntheticSample]

    def split(self, name: str) -> list[SyntheticSample]:
        return [self.samples[i] for i in getattr(self.manifest, name)]

    @property
    def classes(self) -> list[str]:
        return self.manifest.classes


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "dataset.jsonl").exists() or not (root / "splits.json").exists():
        raise FileNotFoundError(f"no dataset.jsonl/splits.json under {root}")
    with open(root / "splits.json", encoding="utf-8") as fh:
        manifest = SplitManifest.from_json(json.load(fh))
    manifest.check()
    samples = {}
    for obj in read_records(root / "dataset.jsonl"):
        rec = AnnotationRecord.from_json(obj)
        samples[rec.image_id] = sample_from_record(
            rec, load_image(root / "images" / f"{rec.image_id}.png"), manifest.classes)
    return Dataset(root, manifest, samples)


def training_corpus(samples: Iterable[SyntheticSample]) -> list[str]:
    out = []
    for s in samples:
        out.append(s.prompt_text)
        out.append(s.description_text)
        for q, a in vqa_pairs(s.record):
            out.extend((q, a))
    return out


def pixel_centroid_baseline(train: list[SyntheticSample], test: list[SyntheticSample], size: int = 8) -> float:
    """Nearest class centroid on block-averaged pixels; returns test accuracy."""
    def feats(samples):
        out = []
        for s in samples:
            h = s.image.shape[0] // size
            out.append(s.image.reshape(size, h, size, h, 3).mean(axis=(1, 3)).ravel())
        return np.array(out)

    xtr, xte = feats(train), feats(test)
    ytr = np.array([s.class_id for s in train])
    yte = np.array([s.class_id for s in test])
    labels = np.unique(ytr)
    centroids = np.stack([xtr[ytr == c].mean(0) for c in labels])
    d = ((xte[:, None, :] - centroids[None]) ** 2).sum(-1)
    pred = labels[d.argmin(1)]
    return float((pred == yte).mean())


_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


def safe_image_id(image_id: str) -> bool:
    return bool(_ID_RE.match(image_id))
