"""Four-stage training pipeline and the inference paths built on it.

Stages: A canonical auto-encoder, B grouping, C grouped VQ codec, D token
transformer. Every stage writes its own checkpoint plus a JSON sidecar with
the loss history, so any stage can be retrained in isolation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autoregressive as ar
from .canonical_ae import correspondence_from_reconstruction, reconstruct, train_canonical_ae
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .errors import DependencyError, DomainError
from .geometry import fibonacci_sphere
from .grouping import train_grouping
from .pcio import ShapeDataset, render_depth, synth_dataset
from .vq import decode_groups, encode_groups, quantize, tokens_to_features, train_vqvae

logger = logging.getLogger(__name__)

STAGE_NAMES = {"A": "cae", "B": "group", "C": "vqvae", "D": "transformer"}
UPSTREAM = {"A": "", "B": "A", "C": "AB", "D": "ABC"}


def checkpoint_path(out_dir, stage) -> Path:
    return Path(out_dir) / "checkpoints" / f"stage_{stage}_{STAGE_NAMES[stage]}.pt"


def data_dir(out_dir, split) -> Path:
    return Path(out_dir) / "data" / split


def make_data(cfg: PipelineConfig, out_dir):
    d = cfg.data
    train = synth_dataset(d.family, d.train_count, d.points, seed=d.seed, split="train")
    test = synth_dataset(d.family, d.test_count, d.points, seed=d.seed + 1, split="test")
    train.save(data_dir(out_dir, "train"))
    test.save(data_dir(out_dir, "test"))
    return train, test


def load_split(out_dir, split) -> ShapeDataset:
    path = data_dir(out_dir, split)
    if not path.is_dir():
        raise DependencyError(f"no {split} data under {path}; run synth-data first", missing="data")
    return ShapeDataset.load(path, split)


@dataclass
class Models:
    """Trained stages loaded from an output directory."""

    cae: object
    grouper: object
    codec: object = None
    transformer: object = None

    @property
    def sphere(self):
        return fibonacci_sphere(int(self.cae.num_points))

    def assignment(self, sphere=None):
        sphere = self.sphere if sphere is None else sphere
        return self.grouper.assignment(sphere)


def load_models(out_dir, stages="ABCD") -> Models:
    loaded = {}
    for s in stages:
        path = checkpoint_path(out_dir, s)
        if not path.exists():
            raise DependencyError(f"stage {s} checkpoint missing at {path}", missing=s)
        model, _ = load_checkpoint(path)
        loaded[s] = model
    return Models(loaded.get("A"), loaded.get("B"), loaded.get("C"), loaded.get("D"))


def trace_dataset(cae, data, sphere):
    """Correspondences for every shape of a ``(B, N, 3)`` array."""
    return [correspondence_from_reconstruction(x, reconstruct(cae, x, sphere)) for x in data]


def point_labels_for(models: Models, pc, sphere=None):
    sphere = models.sphere if sphere is None else sphere
    recon = reconstruct(models.cae, pc, sphere)
    corr = correspondence_from_reconstruction(pc, recon)
    return models.grouper.labels(sphere)[corr.forward], corr


def encode_to_tokens(models: Models, pc) -> np.ndarray:
    """Token sequence (in group order) for one cloud."""
    labels, _ = point_labels_for(models, pc)
    z, _ = encode_groups(models.codec, pc, labels)
    idx, _, _, _ = quantize(models.codec, z)
    return idx[models.grouper.order.numpy()]


def decode_tokens(models: Models, tokens, resolution=None) -> np.ndarray:
    sphere = models.sphere if not resolution else fibonacci_sphere(resolution)
    zq = tokens_to_features(models.codec, tokens, models.grouper.order.numpy())
    return decode_groups(models.codec, sphere, zq, models.grouper.labels(sphere))


def reconstruct_shape(models: Models, pc, quantized=True) -> np.ndarray:
    """``decode(encode(pc))``; with ``quantized=False`` the codebook is bypassed."""
    import torch

    labels, _ = point_labels_for(models, pc)
    z, _ = encode_groups(models.codec, pc, labels)
    if quantized:
        _, zq, _, _ = quantize(models.codec, z)
    else:
        with torch.no_grad():
            zq = models.codec.up(models.codec.down(torch.as_tensor(z).unsqueeze(0)))[0].numpy()
    sphere = models.sphere
    return decode_groups(models.codec, sphere, zq, models.grouper.labels(sphere))


def generate_shape(models: Models, top_p=0.92, temperature=1.0, seed=0, condition=None,
                   resolution=None, top_k=0):
    """Sample tokens and decode them; returns ``(points, tokens)``."""
    cond = None
    if condition is not None:
        cond = ar.encode_condition(models.transformer, condition)
    tokens = ar.sample_sequence(models.transformer, top_p, temperature, seed, cond, top_k)
    return decode_tokens(models, tokens, resolution), tokens


def _history_finite(history):
    return all(math.isfinite(v) for values in history.values() for v in values)


def run_stage(stage, cfg: PipelineConfig, out_dir, data=None) -> Path:
    """Train one stage from its upstream checkpoints and write its checkpoint."""
    if stage not in STAGE_NAMES:
        raise DomainError(f"unknown stage {stage!r}")
    out_dir = Path(out_dir)
    for up in UPSTREAM[stage]:
        if not checkpoint_path(out_dir, up).exists():
            raise DependencyError(
                f"stage {stage} needs stage {up} ({STAGE_NAMES[up]}) first", missing=up
            )
    train = data if data is not None else load_split(out_dir, "train")
    x = train.stacked()
    n_points = x.shape[1]
    sphere = fibonacci_sphere(n_points)
    flat_cfg = cfg.to_flat()
    extra = {}

    if stage == "A":
        model = train_canonical_ae(x, cfg.cae, sphere)
    else:
        models = load_models(out_dir, UPSTREAM[stage])
        if int(models.cae.num_points) != n_points:
            raise DomainError("training data resolution differs from stage A")
        corrs = trace_dataset(models.cae, x, sphere)
        if stage == "B":
            mapped = np.stack([xi[c.inverse] for xi, c in zip(x, corrs)])
            model = train_grouping(x, mapped, cfg.group, sphere)
        else:
            sphere_labels = models.grouper.labels(sphere)
            plabels = np.stack([sphere_labels[c.forward] for c in corrs])
            G = models.grouper.num_groups
            if stage == "C":
                model = train_vqvae(x, plabels, sphere, sphere_labels, cfg.vq, G)
                extra = {"num_groups": G}
            else:
                tokens = np.stack([encode_to_tokens(models, xi) for xi in x])
                conds = None
                if cfg.transformer.conditional:
                    conds = np.stack([render_depth(xi, cfg.transformer.depth_res) for xi in x])
                K = models.codec.codebook.size
                model = ar.train_transformer(tokens, cfg.transformer, G, K, conds)
                extra = {"num_groups": G, "codebook_size": K}
    if not _history_finite(model.history):
        logger.warning("stage %s recorded a non-finite loss", stage)
    path = checkpoint_path(out_dir, stage)
    save_checkpoint(path, stage, model, flat_cfg, extra)
    sidecar = path.with_name(path.stem + "_history.json")
    sidecar.write_text(json.dumps({"stage": stage, "history": model.history, "config": flat_cfg}))
    logger.info("stage %s written to %s", stage, path)
    return path
