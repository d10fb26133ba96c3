"""Grouped vector-quantized auto-encoder.

Point features are max-pooled inside each shape composition, projected to a
small lookup space, snapped to the nearest entry of that composition's own
codebook and projected back up. Codebook entries follow exponential moving
averages of the features assigned to them instead of receiving gradients.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn

from .config import VQConfig
from .errors import DomainError
from .geometry import chamfer_loss, emd_loss
from .nets import PointEncoder, SphereDecoder
from .training import FiniteGuard, as_tensor, minibatches, seeded

logger = logging.getLogger(__name__)


class GroupCodebook(nn.Module):
    """``num_groups`` codebooks of ``size`` entries in ``dim`` dimensions.

    With ``shared=True`` every group looks up one common codebook holding
    ``num_groups * size`` entries (the ablation baseline).
    """

    def __init__(self, num_groups, size=50, dim=4, decay=0.99, eps=1e-5, shared=False,
                 dead_threshold=1e-3, dead_patience=100, seed=0):
        super().__init__()
        self.num_groups = num_groups
        self.shared = shared
        self.decay = decay
        self.eps = eps
        self.dead_threshold = dead_threshold
        self.dead_patience = dead_patience
        books, entries = (1, num_groups * size) if shared else (num_groups, size)
        self.size = entries
        self.register_buffer("embed", torch.randn(books, entries, dim))
        self.register_buffer("cluster_size", torch.zeros(books, entries))
        self.register_buffer("embed_sum", torch.zeros(books, entries, dim))
        self.register_buffer("dead_steps", torch.zeros(books, entries, dtype=torch.long))
        self.register_buffer("initialized", torch.tensor(False))
        self._gen = torch.Generator().manual_seed(seed)

    @property
    def num_books(self):
        return self.embed.shape[0]

    def book_of(self, groups):
        return torch.zeros_like(groups) if self.shared else groups

    def _group_books(self, G, device=None):
        return self.book_of(torch.arange(G, device=device))

    def nearest(self, zhat):
        """Entry indices ``(B, G)`` nearest to ``zhat`` ``(B, G, dim)``; lowest index on ties."""
        books = self.embed[self._group_books(zhat.shape[1])]  # (G, K, D)
        d = ((zhat.unsqueeze(2) - books.unsqueeze(0)) ** 2).sum(-1)
        return d.argmin(dim=-1)

    def lookup(self, idx):
        G = idx.shape[1]
        books = self._group_books(G).unsqueeze(0).expand_as(idx)
        return self.embed[books, idx]

    @torch.no_grad()
    def init_from(self, zhat):
        """Spread entries around the statistics of a first batch of features."""
        for c in range(self.num_books):
            feats = zhat.reshape(-1, zhat.shape[-1]) if self.shared else zhat[:, c]
            mean = feats.mean(0)
            std = feats.std(0, unbiased=False) + 1e-3 if len(feats) > 1 else torch.ones_like(mean) * 0.1
            noise = torch.randn(self.size, feats.shape[-1], generator=self._gen)
            self.embed[c] = mean + std * noise
        self.initialized.fill_(True)

    @torch.no_grad()
    def ema_update(self, groups, zhat, idx):
        """Fold one batch of ``(group, feature, chosen entry)`` triples into the codebooks.

        Only entries that received at least one feature are recomputed, so an
        unused entry keeps its value while its statistics decay.
        """
        groups = torch.as_tensor(groups).reshape(-1)
        idx = torch.as_tensor(idx).reshape(-1)
        zhat = torch.as_tensor(zhat, dtype=self.embed.dtype).reshape(len(idx), self.embed.shape[-1])
        books = self.book_of(groups)
        flat = books * self.size + idx
        n_slots = self.num_books * self.size
        counts = torch.bincount(flat, minlength=n_slots).view(self.num_books, self.size).to(self.embed.dtype)
        sums = torch.zeros(n_slots, zhat.shape[1], dtype=self.embed.dtype)
        sums.index_add_(0, flat, zhat)
        sums = sums.view(self.num_books, self.size, -1)

        g = self.decay
        self.cluster_size.mul_(g).add_((1 - g) * counts)
        self.embed_sum.mul_(g).add_((1 - g) * sums)
        n = self.cluster_size.sum(-1, keepdim=True)
        smoothed = (self.cluster_size + self.eps) / (n + self.size * self.eps) * n
        hit = counts > 0
        self.embed[hit] = self.embed_sum[hit] / smoothed[hit].unsqueeze(-1)

    @torch.no_grad()
    def revive_dead(self, groups, zhat):
        """Reseed entries whose usage stayed below threshold for ``dead_patience`` steps.

        Each stale entry is replaced by a random feature of the current batch
        from its own codebook. Called once per training step after the EMA.
        """
        groups = torch.as_tensor(groups).reshape(-1)
        zhat = torch.as_tensor(zhat, dtype=self.embed.dtype).reshape(len(groups), self.embed.shape[-1])
        books = self.book_of(groups)
        dead = self.cluster_size < self.dead_threshold
        self.dead_steps.copy_(torch.where(dead, self.dead_steps + 1, torch.zeros_like(self.dead_steps)))
        stale = (self.dead_steps >= self.dead_patience).nonzero()
        for c, k in stale.tolist():
            pool = zhat[books == c]
            if len(pool) == 0:
                continue
            pick = torch.randint(len(pool), (1,), generator=self._gen).item()
            self.embed[c, k] = pool[pick]
            self.embed_sum[c, k] = 0
            self.cluster_size[c, k] = 0
            self.dead_steps[c, k] = 0


class GroupProjection(nn.Module):
    """Linear map shared by all groups, or one map per group."""

    def __init__(self, num_groups, d_in, d_out, per_group=False):
        super().__init__()
        self.per_group = per_group
        if per_group:
            self.weight = nn.Parameter(torch.randn(num_groups, d_in, d_out) / d_in**0.5)
            self.bias = nn.Parameter(torch.zeros(num_groups, d_out))
        else:
            self.lin = nn.Linear(d_in, d_out)

    def forward(self, x):
        if self.per_group:
            return torch.einsum("bgi,gio->bgo", x, self.weight) + self.bias
        return self.lin(x)


def pool_groups(feats, point_labels, num_groups):
    """Max-pool ``(B, N, F)`` features by label; empty groups get a zero row and a false mask."""
    B, N, F = feats.shape
    labels = torch.as_tensor(point_labels).long()
    pooled = torch.full((B, num_groups, F), float("-inf"), dtype=feats.dtype)
    pooled = pooled.scatter_reduce(1, labels.unsqueeze(-1).expand(-1, -1, F), feats, "amax")
    counts = torch.zeros(B, num_groups).scatter_add_(1, labels, torch.ones(B, N))
    mask = counts > 0
    return torch.where(mask.unsqueeze(-1), pooled, torch.zeros_like(pooled)), mask


class VQCodec(nn.Module):
    def __init__(self, cfg: VQConfig, num_groups: int):
        super().__init__()
        self.cfg = cfg
        self.num_groups = num_groups
        self.encoder = PointEncoder(cfg.k, cfg.edge_width, cfg.feat_dim, latent_dim=0)
        self.down = GroupProjection(num_groups, cfg.feat_dim, cfg.code_dim, cfg.per_group_projection)
        self.up = GroupProjection(num_groups, cfg.code_dim, cfg.feat_dim, cfg.per_group_projection)
        self.codebook = GroupCodebook(
            num_groups, cfg.codebook_size, cfg.code_dim, cfg.decay, cfg.eps,
            cfg.shared_codebook, cfg.dead_threshold, cfg.dead_patience, cfg.seed,
        )
        self.decoder = SphereDecoder(cfg.feat_dim, cfg.hidden)
        self.history = {"loss": [], "cd": [], "emd": [], "commit": []}

    def group_features(self, x, point_labels):
        """Max-pool point features per group: ``(B, G, F)`` and presence mask ``(B, G)``."""
        return pool_groups(self.encoder.point_features(x), point_labels, self.num_groups)

    def quantize(self, z):
        """Returns ``(idx, z_q, zhat, zq_low)``; ``z_q`` carries straight-through gradients."""
        zhat = self.down(z)
        idx = self.codebook.nearest(zhat.detach())
        zq_low = self.codebook.lookup(idx)
        st = zhat + (zq_low - zhat).detach()
        return idx, self.up(st), zhat, zq_low

    def decode(self, sphere, zq, sphere_labels):
        labels = torch.as_tensor(sphere_labels).long()
        latents = zq[:, labels]
        return self.decoder(sphere, latents)

    def forward(self, x, point_labels, sphere, sphere_labels):
        z, _ = self.group_features(x, point_labels)
        idx, zq, zhat, zq_low = self.quantize(z)
        return self.decode(sphere, zq, sphere_labels), zhat, zq_low, idx


def commitment_loss(zhat, zq_low):
    """Squared distance from each low-dim feature to its (gradient-stopped) code."""
    return ((zq_low.detach() - zhat) ** 2).sum(-1).mean()


def encode_groups(codec: VQCodec, pc, point_labels):
    """Pooled group features ``(G, F)`` and mask for one cloud."""
    codec.eval()
    with torch.no_grad():
        z, mask = codec.group_features(as_tensor(pc).unsqueeze(0),
                                       torch.as_tensor(np.asarray(point_labels)).unsqueeze(0))
    return z[0].numpy(), mask[0].numpy()


def quantize(codec: VQCodec, z):
    """Quantize ``(G, F)`` features: token per group, ``z_q``, ``zhat``, ``zq_low``."""
    codec.eval()
    with torch.no_grad():
        idx, zq, zhat, zq_low = codec.quantize(as_tensor(z).unsqueeze(0))
    return idx[0].numpy(), zq[0].numpy(), zhat[0].numpy(), zq_low[0].numpy()


def decode_groups(codec: VQCodec, sphere, zq, sphere_labels) -> np.ndarray:
    codec.eval()
    with torch.no_grad():
        out = codec.decode(as_tensor(sphere), as_tensor(zq).unsqueeze(0), sphere_labels)
    return out[0].numpy()


def tokens_to_features(codec: VQCodec, tokens, group_order) -> np.ndarray:
    """Quantized high-dim features ``(G, F)`` from a token sequence in sequence order."""
    idx = np.empty(codec.num_groups, dtype=np.int64)
    idx[np.asarray(group_order)] = np.asarray(tokens)
    with torch.no_grad():
        low = codec.codebook.lookup(torch.as_tensor(idx).unsqueeze(0))
        return codec.up(low)[0].numpy()


def ema_update(codebook: GroupCodebook, groups, zhat, idx) -> GroupCodebook:
    codebook.ema_update(groups, zhat, idx)
    return codebook


def codebook_usage(sequences, num_groups, size, group_order=None, shared=False) -> float:
    """Percentage of codebook entries used at least once across ``sequences``.

    Grouped codebooks count distinct ``(group, entry)`` pairs out of
    ``num_groups * size``; a shared codebook counts distinct entries out of
    its ``num_groups * size`` slots.
    """
    seqs = np.asarray(sequences)
    if seqs.size == 0:
        raise DomainError("no token sequences")
    seqs = seqs.reshape(len(seqs), -1)
    if shared:
        used = len(np.unique(seqs))
    else:
        order = np.arange(seqs.shape[1]) if group_order is None else np.asarray(group_order)
        pairs = np.stack([np.broadcast_to(order, seqs.shape), seqs], -1).reshape(-1, 2)
        used = len(np.unique(pairs, axis=0))
    return 100.0 * used / (num_groups * size)


def train_vqvae(dataset, point_labels, sphere, sphere_labels, cfg: VQConfig, num_groups) -> VQCodec:
    """Train encoder, projections and decoder on CD + EMD + commitment; codebooks by EMA.

    ``point_labels[b, i]`` is the group of input point ``i`` of shape ``b``.
    """
    data = as_tensor(dataset.stacked() if hasattr(dataset, "stacked") else dataset)
    plabels = torch.as_tensor(np.asarray(point_labels)).long()
    sphere_t = as_tensor(sphere)
    with seeded(cfg.seed):
        codec = VQCodec(cfg, num_groups)
    if cfg.epochs == 0:
        return codec
    rng = np.random.default_rng(cfg.seed)
    params = [p for n, p in codec.named_parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    guard = FiniteGuard(codec)
    codec.train()
    for epoch in range(cfg.epochs):
        sums = np.zeros(4)
        for idx in minibatches(len(data), cfg.batch_size, rng):
            idx = torch.as_tensor(idx)
            x = data[idx]
            z, _ = codec.group_features(x, plabels[idx])
            if not codec.codebook.initialized:
                codec.codebook.init_from(codec.down(z).detach())
            tok, zq, zhat, zq_low = codec.quantize(z)
            recon = codec.decode(sphere_t, zq, sphere_labels)
            cd = chamfer_loss(recon, x)
            em = emd_loss(recon, x) if cfg.use_emd else torch.zeros(())
            commit = commitment_loss(zhat, zq_low)
            loss = cd + em + commit
            guard.check(loss.item(), epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            groups = torch.arange(num_groups).expand_as(tok)
            codec.codebook.ema_update(groups, zhat.detach(), tok)
            if cfg.dead_patience > 0:
                codec.codebook.revive_dead(groups, zhat.detach())
            guard.commit()
            sums += np.array([loss.item(), cd.item(), em.item(), commit.item()]) * len(idx)
        for key, v in zip(("loss", "cd", "emd", "commit"), sums / len(data)):
            codec.history[key].append(float(v))
    codec.eval()
    return codec
