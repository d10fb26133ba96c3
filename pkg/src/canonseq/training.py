"""Helpers shared by the training loops."""

from __future__ import annotations

import contextlib
import copy
import logging
import math

import numpy as np
import torch

from .errors import TrainingError

logger = logging.getLogger(__name__)


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without leaking RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


class FiniteGuard:
    """Keeps the last parameters that produced a finite loss."""

    def __init__(self, model):
        self.model = model
        self.state = copy.deepcopy(model.state_dict())

    def check(self, loss, epoch):
        value = float(loss)
        if not math.isfinite(value):
            raise TrainingError(
                f"non-finite loss {value} at epoch {epoch}", last_state=self.state, epoch=epoch
            )
        return value

    def commit(self):
        self.state = copy.deepcopy(self.model.state_dict())


def as_tensor(x, dtype=torch.float32):
    return torch.as_tensor(np.asarray(x), dtype=dtype)
