"""Canonical auto-encoder and the point-to-sphere correspondence it induces.

The encoder summarizes a cloud as a global latent; the decoder deforms the
canonical sphere conditioned on that latent, so reconstructed point ``j``
always comes from sphere point ``j``. Nearest-neighbor tracing through the
reconstruction then links input points to sphere indices and back.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import CAEConfig
from .errors import DomainError
from .geometry import chamfer_loss, emd_loss, fibonacci_sphere
from .nets import PointEncoder, SphereDecoder
from .training import FiniteGuard, as_tensor, minibatches, seeded

logger = logging.getLogger(__name__)


class CanonicalAE(nn.Module):
    def __init__(self, cfg: CAEConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PointEncoder(cfg.k, cfg.edge_width, cfg.feat_dim, cfg.latent_dim)
        self.decoder = SphereDecoder(
            cfg.latent_dim, cfg.hidden, attention=cfg.decoder == "graph-attention"
        )
        self.register_buffer("num_points", torch.tensor(0))
        self.history = {"loss": [], "cd": [], "emd": []}

    def forward(self, x, sphere):
        return self.decoder(sphere, self.encoder(x))


@dataclass
class Correspondence:
    """``forward[i]``: sphere index of input point ``i``;
    ``inverse[j]``: input index traced from sphere point ``j``."""

    forward: np.ndarray
    inverse: np.ndarray


def encode_shape(model: CanonicalAE, pc) -> np.ndarray:
    pts = np.asarray(pc)
    if len(pts) < model.cfg.k + 1:
        raise DomainError(f"need at least {model.cfg.k + 1} points for the k-NN graph, got {len(pts)}")
    model.eval()
    with torch.no_grad():
        z = model.encoder(as_tensor(pts).unsqueeze(0))
    return z[0].numpy()


def decode_from_sphere(model: CanonicalAE, sphere, z) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        out = model.decoder(as_tensor(sphere), as_tensor(z).reshape(1, -1))
    return out[0].numpy()


def reconstruct(model: CanonicalAE, pc, sphere) -> np.ndarray:
    return decode_from_sphere(model, sphere, encode_shape(model, pc))


def nearest_index(queries, points, chunk=1024) -> np.ndarray:
    """For each query row, the index of the nearest point (lowest index on ties)."""
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    out = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), chunk):
        d = ((q[s:s + chunk, None, :] - p[None, :, :]) ** 2).sum(-1)
        out[s:s + chunk] = np.argmin(d, axis=1)
    return out


def correspondence_from_reconstruction(pc, recon) -> Correspondence:
    return Correspondence(forward=nearest_index(pc, recon), inverse=nearest_index(recon, pc))


def trace_correspondence(model: CanonicalAE, pc, sphere) -> Correspondence:
    return correspondence_from_reconstruction(pc, reconstruct(model, pc, sphere))


def train_canonical_ae(dataset, cfg: CAEConfig, sphere=None) -> CanonicalAE:
    """Fit encoder and decoder to minimize CD (+ EMD) reconstruction error.

    ``dataset`` is a ShapeDataset or a ``(B, N, 3)`` array. The returned
    module carries per-epoch means in ``history``.
    """
    data = as_tensor(dataset.stacked() if hasattr(dataset, "stacked") else dataset)
    if len(data) == 0:
        raise DomainError("empty dataset")
    if sphere is None:
        sphere = fibonacci_sphere(data.shape[1])
    sphere_t = as_tensor(sphere)
    with seeded(cfg.seed):
        model = CanonicalAE(cfg)
    model.num_points.fill_(len(sphere))
    if cfg.epochs == 0:
        return model
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    guard = FiniteGuard(model)
    model.train()
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        for idx in minibatches(len(data), cfg.batch_size, rng):
            x = data[torch.as_tensor(idx)]
            recon = model(x, sphere_t)
            cd = chamfer_loss(recon, x)
            loss = cd
            em = torch.zeros(())
            if cfg.use_emd:
                em = emd_loss(recon, x)
                loss = loss + em
            guard.check(loss.item(), epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            guard.commit()
            sums += np.array([loss.item(), cd.item(), em.item()]) * len(idx)
        for key, v in zip(("loss", "cd", "emd"), sums / len(data)):
            model.history[key].append(float(v))
        logger.debug("cae epoch %d loss %.5f", epoch, model.history["loss"][-1])
    model.eval()
    return model


def config_dict(model: CanonicalAE) -> dict:
    return asdict(model.cfg)
