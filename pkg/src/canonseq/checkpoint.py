"""Self-describing stage checkpoints.

Each file is a ``torch.save`` dict holding a format tag and version, the
stage letter, the stage's own config section, the full pipeline config it
was trained under, the parameter tensors, the seed and the loss history.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import torch

from .config import CAEConfig, GroupConfig, TransformerConfig, VQConfig
from .errors import FormatError

FORMAT = "canonseq-checkpoint"
VERSION = 1

STAGES = {
    "A": CAEConfig,
    "B": GroupConfig,
    "C": VQConfig,
    "D": TransformerConfig,
}


def save_checkpoint(path, stage, model, pipeline_config=None, extra=None):
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "stage": stage,
        "config": dataclasses.asdict(model.cfg),
        "pipeline_config": pipeline_config or {},
        "extra": extra or {},
        "seed": model.cfg.seed,
        "history": model.history,
        "state": model.state_dict(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return Path(path)


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise FormatError(f"{path} is not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_state(model, state):
    """``load_state_dict`` that first resizes buffers stored with another shape."""
    buffers = dict(model.named_buffers())
    for name, value in state.items():
        if name in buffers and buffers[name].shape != value.shape:
            owner = model.get_submodule(name.rpartition(".")[0]) if "." in name else model
            setattr(owner, name.rpartition(".")[2], value.clone())
    model.load_state_dict(state)
    return model


def build_model(payload):
    """Instantiate the stage's module from a checkpoint payload."""
    from .autoregressive import TokenTransformer
    from .canonical_ae import CanonicalAE
    from .grouping import Grouper
    from .vq import VQCodec

    stage = payload["stage"]
    cfg = STAGES[stage](**payload["config"])
    extra = payload["extra"]
    if stage == "A":
        model = CanonicalAE(cfg)
    elif stage == "B":
        model = Grouper(cfg)
    elif stage == "C":
        model = VQCodec(cfg, extra["num_groups"])
    else:
        model = TokenTransformer(cfg, extra["num_groups"], extra["codebook_size"])
    load_state(model, payload["state"])
    model.history = payload["history"]
    model.eval()
    return model


def load_checkpoint(path):
    payload = read_checkpoint(path)
    return build_model(payload), payload
