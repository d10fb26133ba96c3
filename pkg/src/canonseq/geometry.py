"""Canonical sphere construction and point set distances.

Numpy functions (``chamfer_distance``, ``emd``) operate on single clouds in
float64 and are used for evaluation. The ``*_loss`` functions are batched
torch versions used as training objectives.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import DomainError

logger = logging.getLogger(__name__)

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
EXACT_EMD_LIMIT = 256


def fibonacci_sphere(m: int) -> np.ndarray:
    """``m`` unit vectors along a Fibonacci spiral starting at the north pole.

    Point ``i`` has ``z = 1 - 2 (i + 0.5) / m`` and azimuth ``i * golden_angle``,
    so row order is the spiral serialization order.
    """
    if m < 1:
        raise DomainError("sphere needs at least one point")
    i = np.arange(m, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / m
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * GOLDEN_ANGLE
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def spiral_rank(sphere, p) -> int:
    """Index of the canonical point nearest ``p`` (lowest index on ties)."""
    p = np.asarray(p, dtype=np.float64)
    if abs(np.linalg.norm(p) - 1.0) > 1e-3:
        raise DomainError(f"expected a unit vector, got norm {np.linalg.norm(p):.6f}")
    d = np.sum((np.asarray(sphere) - p) ** 2, axis=1)
    return int(np.argmin(d))


def _as_cloud(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) == 0:
        raise DomainError(f"{name} must be a non-empty (N, 3) array, got {x.shape}")
    return x


def chamfer_distance(x, y) -> float:
    """Mean squared nearest-neighbor distance, summed over both directions."""
    x = _as_cloud(x, "x")
    y = _as_cloud(y, "y")
    dxy, _ = cKDTree(y).query(x)
    dyx, _ = cKDTree(x).query(y)
    return float(np.mean(dxy**2) + np.mean(dyx**2))


def emd(x, y, mode="exact", eps=None) -> float:
    """Average matched Euclidean distance under the optimal bijection.

    ``mode`` is ``"exact"`` (Hungarian-type solver), ``"approximate"``
    (auction with epsilon scaling) or ``"auto"`` (exact up to 256 points).
    The approximate value is never below the exact one and exceeds it by at
    most ``eps``, which defaults to ``1e-3`` times the joint diameter.
    """
    x = _as_cloud(x, "x")
    y = _as_cloud(y, "y")
    if len(x) != len(y):
        raise DomainError(f"EMD needs equal sizes, got {len(x)} and {len(y)}")
    if mode == "auto":
        mode = "exact" if len(x) <= EXACT_EMD_LIMIT else "approximate"
        logger.info("emd: n=%d, using %s mode", len(x), mode)
    cost = cdist(x, y)
    if mode == "exact":
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())
    if mode == "approximate":
        if eps is None:
            eps = 1e-3 * _diameter(x, y)
        assign = auction_assignment(cost, eps)
        return float(cost[np.arange(len(x)), assign].mean())
    raise ValueError(f"unknown EMD mode {mode!r}")


def _diameter(x, y):
    both = np.concatenate([x, y])
    span = both.max(axis=0) - both.min(axis=0)
    return float(np.linalg.norm(span)) or 1.0


def auction_assignment(cost, eps_final, scale=5.0) -> np.ndarray:
    """Min-cost perfect matching by the auction algorithm with epsilon scaling.

    Returns ``assign`` with row ``i`` matched to column ``assign[i]``. The
    total cost is within ``n * eps_final`` of optimal, i.e. the average
    matched cost is within ``eps_final``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if n == 1:
        return np.zeros(1, dtype=int)
    benefit = -cost
    prices = np.zeros(n)
    eps = max(float(np.ptp(cost)) / 4.0, eps_final)
    rows = np.arange(n)
    while True:
        owner = np.full(n, -1)
        assign = np.full(n, -1)
        while True:
            free = np.flatnonzero(assign < 0)
            if free.size == 0:
                break
            values = benefit[free] - prices
            top2 = np.argpartition(-values, 1, axis=1)[:, :2]
            v = np.take_along_axis(values, top2, axis=1)
            first = np.where(v[:, 0] >= v[:, 1], 0, 1)
            best = top2[np.arange(free.size), first]
            v1 = v[np.arange(free.size), first]
            v2 = v[np.arange(free.size), 1 - first]
            bids = prices[best] + (v1 - v2) + eps
            # highest bid per object wins; lowest bidder index on ties
            order = np.lexsort((free, -bids, best))
            won = np.ones(order.size, dtype=bool)
            won[1:] = best[order][1:] != best[order][:-1]
            winners = order[won]
            for k in winners:
                obj = best[k]
                prev = owner[obj]
                if prev >= 0:
                    assign[prev] = -1
                owner[obj] = free[k]
                assign[free[k]] = obj
                prices[obj] = bids[k]
        if eps <= eps_final:
            return assign
        eps = max(eps / scale, eps_final)
    return rows  # pragma: no cover


# ---------------------------------------------------------------------------
# batched torch losses


def pairwise_sq_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared distances ``(B, N, M)`` between ``(B, N, 3)`` and ``(B, M, 3)``."""
    d = (a * a).sum(-1, keepdim=True) + (b * b).sum(-1).unsqueeze(-2) - 2 * a @ b.transpose(-1, -2)
    return d.clamp_min(0.0)


def chamfer_loss(a: torch.Tensor, b: torch.Tensor, reduce=True) -> torch.Tensor:
    """Batched Chamfer distance with the same convention as ``chamfer_distance``."""
    d = pairwise_sq_dist(a, b)
    per = d.min(dim=2).values.mean(dim=1) + d.min(dim=1).values.mean(dim=1)
    return per.mean() if reduce else per


def emd_match(a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
    """Optimal assignment ``(B, N)`` computed without gradients."""
    with torch.no_grad():
        d = torch.cdist(a.double(), b.double()).cpu().numpy()
    out = np.empty(d.shape[:2], dtype=np.int64)
    for k in range(d.shape[0]):
        if not np.isfinite(d[k]).all():
            # the loss is non-finite anyway; let the caller's guard report it
            out[k] = np.arange(d.shape[1])
            continue
        _, cols = linear_sum_assignment(d[k])
        out[k] = cols
    return out


def emd_loss(a: torch.Tensor, b: torch.Tensor, reduce=True) -> torch.Tensor:
    """Batched EMD; differentiable through the matched pairs (a subgradient)."""
    if a.shape[1] != b.shape[1]:
        raise DomainError("EMD needs equal point counts")
    match = torch.as_tensor(emd_match(a, b), device=b.device)
    matched = torch.gather(b, 1, match.unsqueeze(-1).expand(-1, -1, 3))
    dist = torch.sqrt(((a - matched) ** 2).sum(-1) + 1e-12)
    per = dist.mean(dim=1)
    return per.mean() if reduce else per
