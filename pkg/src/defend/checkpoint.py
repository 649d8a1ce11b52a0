"""Checkpoints as a single .npz: named parameter arrays plus a JSON header."""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import Vocab
from .model import DefendModel

HEADER_KEY = "__header__"
OPTIM_PREFIX = "optim."
SHAPE_KEYS = ("model_dim", "num_layers", "num_heads", "patch_size", "vocab_size")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: DefendModel, vocab: Vocab, config: dict, step: int = 0,
                    phase: str = "init", next_phase: int = 0, lambda_threshold: float = 0.3,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> Path:
    enc = model.enc_cfg
    header = {
        "model_dim": enc.model_dim,
        "num_layers": enc.num_layers,
        "num_heads": enc.num_heads,
        "patch_size": enc.patch_size,
        "vocab_size": enc.vocab_size,
        "lambda_threshold": lambda_threshold,
        "step": step,
        "phase": phase,
        "next_phase": next_phase,
        "config": config,
        "vocab": vocab.tokens,
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        state = optimizer.state_dict()
        header["optim_groups"] = state["param_groups"]
        for pid, slots in state["state"].items():
            for name, value in slots.items():
                arrays[f"{OPTIM_PREFIX}{pid}.{name}"] = value.detach().cpu().numpy()
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """(header, arrays) without building a model."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    if HEADER_KEY not in arrays:
        raise CheckpointError(f"{path} has no header")
    header = json.loads(arrays.pop(HEADER_KEY).tobytes().decode("utf-8"))
    return header, arrays


def check_header(header: dict, expected: dict) -> None:
    """Raise CheckpointError when a shape-defining field disagrees with ``expected``."""
    bad = [f"{k}: checkpoint {header.get(k)} vs config {expected[k]}"
           for k in SHAPE_KEYS if k in expected and header.get(k) != expected[k]]
    if bad:
        raise CheckpointError("checkpoint does not match the configuration (" + "; ".join(bad) + ")")


def load_into(model: DefendModel, arrays: dict, optimizer: Optional[torch.optim.Optimizer] = None,
              header: Optional[dict] = None) -> None:
    params = {k: v for k, v in arrays.items() if not k.startswith(OPTIM_PREFIX)}
    own = model.state_dict()
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in own.items():
        if tuple(v.shape) != params[k].shape:
            raise CheckpointError(f"{k}: shape {params[k].shape} vs model {tuple(v.shape)}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)).to(own[k].dtype) for k, v in params.items()})
    if optimizer is not None and header is not None and "optim_groups" in header:
        state: dict = {}
        for k, v in arrays.items():
            if k.startswith(OPTIM_PREFIX):
                pid, name = k[len(OPTIM_PREFIX):].split(".", 1)
                state.setdefault(int(pid), {})[name] = torch.from_numpy(np.array(v))
        optimizer.load_state_dict({"state": state, "param_groups": header["optim_groups"]})
