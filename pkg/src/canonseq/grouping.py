"""Decomposition of the canonical sphere into shape compositions.

A small per-point network scores every sphere point against ``G`` groups.
Softmax over groups gives the assignment probabilities; renormalizing each
group's column to sum to one gives the weights that turn traced input points
into ``G`` structure points. Training pulls those structure points onto the
input surface with a Chamfer loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import GroupConfig
from .errors import DomainError
from .geometry import chamfer_loss
from .training import FiniteGuard, as_tensor, minibatches, seeded

logger = logging.getLogger(__name__)

ORDERS = ("spiral", "inverse", "random")


@dataclass
class GroupProbabilities:
    raw: np.ndarray  # (M, G) scores
    per_point: np.ndarray  # rows sum to 1
    per_group: np.ndarray  # columns sum to 1


@dataclass
class GroupAssignment:
    labels: np.ndarray  # (M,) group id per sphere point
    group_order: np.ndarray  # permutation of range(G)

    @property
    def num_groups(self):
        return len(self.group_order)


def normalize_scores(raw: torch.Tensor):
    """Per-point softmax and its per-group (column) renormalization."""
    per_point = raw.softmax(dim=-1)
    per_group = per_point / per_point.sum(dim=-2, keepdim=True)
    return per_point, per_group


class GroupingNet(nn.Module):
    """Two hidden layers of ``hidden`` units with batch norm and ReLU."""

    def __init__(self, num_groups, hidden=128, in_dim=3):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
            nn.Linear(hidden, num_groups),
        )

    def forward(self, pts):
        shape = pts.shape
        return self.mlp(pts.reshape(-1, shape[-1])).view(*shape[:-1], -1)


class Grouper(nn.Module):
    """Stage-B model: either the learned network or fixed uniform centers.

    ``labels(sphere)`` works for spheres of any resolution, which is what
    lets the codec decode at arbitrary point counts.
    """

    def __init__(self, cfg: GroupConfig):
        super().__init__()
        self.cfg = cfg
        self.net = GroupingNet(cfg.num_groups, cfg.hidden, 6 if cfg.input == "concat" else 3)
        self.register_buffer("centers", torch.zeros(0, 3))
        self.register_buffer("order", torch.arange(cfg.num_groups))
        # mean traced shape, used as the instance input when input == "concat"
        self.register_buffer("template", torch.zeros(0, 3))
        self.history = {"loss": []}

    @property
    def num_groups(self):
        return self.cfg.num_groups

    def scores(self, sphere, mapped=None):
        s = as_tensor(sphere)
        if self.cfg.input == "concat":
            if mapped is None:
                if len(self.template) != len(s):
                    raise DomainError("concat grouping input needs traced points at this resolution")
                mapped = self.template
            s = torch.cat([as_tensor(mapped), s.expand(as_tensor(mapped).shape)], dim=-1)
        return self.net(s)

    def labels(self, sphere, mapped=None) -> np.ndarray:
        if self.cfg.method == "uniform":
            return nearest_center(sphere, self.centers.numpy())
        return assign_groups(grouping_forward(self, sphere, mapped)).labels

    def assignment(self, sphere, mapped=None) -> GroupAssignment:
        labels = self.labels(sphere, mapped)
        return GroupAssignment(labels, self.order.numpy().copy())

    def finalize(self, sphere, seed=0):
        """Fix the group order from the labels on the training-resolution sphere."""
        labels = self.labels(sphere)
        order = group_order(labels, self.num_groups, self.cfg.order, seed)
        self.order.copy_(torch.as_tensor(order))


def grouping_forward(model: Grouper, sphere, mapped=None) -> GroupProbabilities:
    model.eval()
    with torch.no_grad():
        raw = model.scores(sphere, mapped).double()
        per_point, per_group = normalize_scores(raw)
    return GroupProbabilities(raw.numpy(), per_point.numpy(), per_group.numpy())


def structure_points(P: GroupProbabilities, mapped) -> np.ndarray:
    """``K_j = sum_i mapped_i * P_ij`` with the column-normalized weights."""
    return P.per_group.T.astype(np.float64) @ np.asarray(mapped, dtype=np.float64)


def group_order(labels, num_groups, order="spiral", seed=0) -> np.ndarray:
    """Sequence order of the groups.

    ``spiral``: by each group's smallest member sphere index; ``inverse``: by
    largest member index, descending (spiral walked from the other pole);
    ``random``: a seeded permutation. Empty groups go last, by id.
    """
    labels = np.asarray(labels)
    if order == "random":
        return np.random.default_rng(seed).permutation(num_groups)
    idx = np.arange(len(labels))
    big = len(labels) + 1
    if order == "spiral":
        key = np.full(num_groups, big, dtype=np.int64)
        np.minimum.at(key, labels, idx)
    elif order == "inverse":
        last = np.full(num_groups, -1, dtype=np.int64)
        np.maximum.at(last, labels, idx)
        key = np.where(last >= 0, len(labels) - 1 - last, big)
    else:
        raise ValueError(f"unknown group order {order!r}; choose from {ORDERS}")
    return np.lexsort((np.arange(num_groups), key))


def assign_groups(P: GroupProbabilities, order="spiral", seed=0) -> GroupAssignment:
    labels = np.argmax(P.per_point, axis=1)
    G = P.per_point.shape[1]
    return GroupAssignment(labels, group_order(labels, G, order, seed))


def nearest_center(sphere, centers) -> np.ndarray:
    s = np.asarray(sphere, dtype=np.float64)
    d = ((s[:, None, :] - np.asarray(centers, dtype=np.float64)[None]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


def uniform_grouping(sphere, num_groups, seed=0, order="spiral") -> GroupAssignment:
    """Baseline: random sphere points as centers, nearest-center labels."""
    sphere = np.asarray(sphere)
    if num_groups > len(sphere):
        raise DomainError(f"cannot draw {num_groups} centers from {len(sphere)} points")
    centers = np.random.default_rng(seed).choice(len(sphere), num_groups, replace=False)
    labels = nearest_center(sphere, sphere[centers])
    return GroupAssignment(labels, group_order(labels, num_groups, order, seed))


def sequentialize(pc, corr, ga: GroupAssignment) -> list:
    """Split ``pc`` into per-group subsets, listed in ``ga.group_order``."""
    pc = np.asarray(pc)
    point_labels = ga.labels[corr.forward]
    return [pc[point_labels == g] for g in ga.group_order]


def train_grouping(dataset, mapped, cfg: GroupConfig, sphere) -> Grouper:
    """Fit the grouping network on a dataset of clouds.

    ``mapped[b]`` holds the input points traced from each sphere point of
    shape ``b`` (``x[corr.inverse]``), shape ``(B, M, 3)``.
    """
    data = as_tensor(dataset.stacked() if hasattr(dataset, "stacked") else dataset)
    mapped = as_tensor(mapped)
    sphere_t = as_tensor(sphere)
    with seeded(cfg.seed):
        model = Grouper(cfg)
    if cfg.input == "concat":
        model.template = mapped.mean(dim=0).clone()
    if cfg.method == "uniform":
        ga_centers = np.random.default_rng(cfg.seed).choice(len(sphere_t), cfg.num_groups, replace=False)
        model.centers = sphere_t[torch.as_tensor(ga_centers)].clone()
        model.finalize(sphere, cfg.seed)
        return model
    if cfg.epochs > 0:
        rng = np.random.default_rng(cfg.seed)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        guard = FiniteGuard(model)
        model.train()
        for epoch in range(cfg.epochs):
            total = 0.0
            for idx in minibatches(len(data), cfg.batch_size, rng):
                idx = torch.as_tensor(idx)
                m = mapped[idx]
                if cfg.input == "concat":
                    raw = model.net(torch.cat([m, sphere_t.expand(m.shape)], dim=-1))
                else:
                    raw = model.net(sphere_t).unsqueeze(0)
                _, per_group = normalize_scores(raw)
                K = per_group.transpose(-1, -2) @ m
                loss = chamfer_loss(K, data[idx])
                guard.check(loss.item(), epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                guard.commit()
                total += loss.item() * len(idx)
            model.history["loss"].append(total / len(data))
    model.eval()
    model.finalize(sphere, cfg.seed)
    return model
