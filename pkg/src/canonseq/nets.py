"""Network blocks shared by the canonical auto-encoder and the VQ codec."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import pairwise_sq_dist


def knn(x: torch.Tensor, k: int) -> torch.Tensor:
    """Indices ``(B, N, k)`` of the k nearest rows of ``x`` (self included)."""
    d = pairwise_sq_dist(x, x)
    return d.topk(k, dim=-1, largest=False).indices


def gather_neighbors(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    B, N, k = idx.shape
    flat = idx.reshape(B, N * k, 1).expand(-1, -1, x.shape[-1])
    return torch.gather(x, 1, flat).view(B, N, k, x.shape[-1])


class EdgeConv(nn.Module):
    """Edge convolution over a k-NN graph rebuilt from the input features."""

    def __init__(self, in_dim, out_dim, k):
        super().__init__()
        self.k = k
        self.lin = nn.Linear(2 * in_dim, out_dim, bias=False)
        self.bn = nn.BatchNorm1d(out_dim)

    def forward(self, x):
        idx = knn(x, self.k)
        nbr = gather_neighbors(x, idx)
        center = x.unsqueeze(2).expand_as(nbr)
        e = self.lin(torch.cat([nbr - center, center], dim=-1))
        B, N, k, C = e.shape
        e = F.leaky_relu(self.bn(e.reshape(-1, C)).view(B, N, k, C), 0.2)
        return e.max(dim=2).values


class PointEncoder(nn.Module):
    """Three stacked edge convolutions followed by a shared per-point layer.

    ``point_features`` gives ``(B, N, feat_dim)``; calling the module max-pools
    those into a global code and maps it to ``latent_dim``.
    """

    def __init__(self, k=20, width=64, feat_dim=256, latent_dim=256):
        super().__init__()
        self.k = k
        widths = (width, width, 2 * width)
        self.convs = nn.ModuleList([
            EdgeConv(3, widths[0], k),
            EdgeConv(widths[0], widths[1], k),
            EdgeConv(widths[1], widths[2], k),
        ])
        self.point_lin = nn.Linear(sum(widths), feat_dim, bias=False)
        self.point_bn = nn.BatchNorm1d(feat_dim)
        self.head = nn.Linear(feat_dim, latent_dim) if latent_dim else None

    def point_features(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = conv(h)
            feats.append(h)
        h = self.point_lin(torch.cat(feats, dim=-1))
        B, N, C = h.shape
        return F.leaky_relu(self.point_bn(h.reshape(-1, C)).view(B, N, C), 0.2)

    def forward(self, x):
        return self.head(self.point_features(x).max(dim=1).values)


class NeighborAttention(nn.Module):
    """Single-head attention restricted to each sphere point's k nearest points."""

    def __init__(self, dim, k=16):
        super().__init__()
        self.k = k
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, h, coords):
        k = min(self.k, coords.shape[1])
        idx = knn(coords, k)
        q, kk, v = self.qkv(h).chunk(3, dim=-1)
        kn = gather_neighbors(kk, idx)
        vn = gather_neighbors(v, idx)
        att = torch.einsum("bnc,bnkc->bnk", q, kn) / q.shape[-1] ** 0.5
        mixed = torch.einsum("bnk,bnkc->bnc", att.softmax(-1), vn)
        return h + self.out(mixed)


class SphereDecoder(nn.Module):
    """Maps sphere points to shape points, conditioned on per-point latents.

    A spatial branch embeds each sphere point; a style branch turns the
    latent into feature-wise scale and shift applied after a per-point
    normalization. Two such modulation rounds precede the output layer.
    Without attention, every output row depends only on its own sphere
    point and latent.
    """

    def __init__(self, latent_dim=256, hidden=128, attention=False):
        super().__init__()
        self.spatial = nn.Sequential(
            nn.Linear(3, hidden), nn.ReLU(), nn.Linear(hidden, hidden)
        )
        self.attention = NeighborAttention(hidden) if attention else None
        self.styles = nn.ModuleList([
            nn.Sequential(nn.Linear(latent_dim, hidden), nn.ReLU(), nn.Linear(hidden, 2 * hidden))
            for _ in range(2)
        ])
        self.mixes = nn.ModuleList([nn.Linear(hidden, hidden) for _ in range(2)])
        self.out = nn.Linear(hidden, 3)

    def forward(self, sphere, latent):
        """``sphere`` is ``(M, 3)`` or ``(B, M, 3)``; ``latent`` ``(B, C)`` or ``(B, M, C)``."""
        B = latent.shape[0]
        if sphere.dim() == 2:
            sphere = sphere.unsqueeze(0).expand(B, -1, -1)
        if latent.dim() == 2:
            latent = latent.unsqueeze(1)
        h = self.spatial(sphere)
        if self.attention is not None:
            h = self.attention(h, sphere)
        for style, mix in zip(self.styles, self.mixes):
            gamma, beta = style(latent).chunk(2, dim=-1)
            h = F.layer_norm(h, h.shape[-1:]) * (1 + gamma) + beta
            h = F.relu(mix(h))
        return self.out(h)
