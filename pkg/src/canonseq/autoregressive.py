"""Autoregressive transformer over grouped codebook tokens.

Each sequence position owns its codebook, so token embeddings and output
heads are separate per position rather than shared. Position 0 sees only a
learned start vector, or the encoded condition when one is given.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TransformerConfig
from .errors import DomainError
from .training import FiniteGuard, as_tensor, minibatches, seeded

logger = logging.getLogger(__name__)


class CausalBlock(nn.Module):
    def __init__(self, d_model, n_head, dropout=0.0):
        super().__init__()
        if d_model % n_head:
            raise DomainError(f"d_model={d_model} not divisible by n_head={n_head}")
        self.n_head = n_head
        self.ln1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )
        self.drop = nn.Dropout(dropout)
        self.attn_dropout = dropout

    def forward(self, x):
        B, T, C = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(C, dim=-1)
        q, k, v = (t.view(B, T, self.n_head, C // self.n_head).transpose(1, 2) for t in (q, k, v))
        y = F.scaled_dot_product_attention(
            q, k, v, is_causal=True, dropout_p=self.attn_dropout if self.training else 0.0
        )
        x = x + self.drop(self.proj(y.transpose(1, 2).reshape(B, T, C)))
        return x + self.drop(self.mlp(self.ln2(x)))


class DepthEncoder(nn.Module):
    """Four strided convolutions and global average pooling to ``d_model``."""

    def __init__(self, d_model, width=16):
        super().__init__()
        chans = [1, width, 2 * width, 4 * width, 4 * width]
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 3, stride=2, padding=1), nn.ReLU()]
        self.convs = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1], d_model)

    def forward(self, depth):
        if depth.dim() == 2:
            depth = depth.unsqueeze(0)
        if depth.shape[-1] == 0 or depth.shape[-2] == 0:
            raise DomainError("empty depth image")
        h = self.convs(depth.unsqueeze(1))
        return self.head(h.mean(dim=(-1, -2)))


def sinusoid_table(n, d):
    pos = torch.arange(n, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float32) * (-math.log(10000.0) / d))
    table = torch.zeros(n, d)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div[: d // 2])
    return table


class TokenTransformer(nn.Module):
    def __init__(self, cfg: TransformerConfig, num_groups, codebook_size=50):
        super().__init__()
        self.cfg = cfg
        self.num_groups = num_groups
        self.codebook_size = codebook_size
        d = cfg.d_model
        self.tok_emb = nn.Parameter(torch.randn(num_groups, codebook_size, d) * 0.02)
        self.start = nn.Parameter(torch.randn(d) * 0.02)
        if cfg.learned_pos:
            self.pos = nn.Parameter(torch.randn(num_groups, d) * 0.02)
        else:
            self.register_buffer("pos", sinusoid_table(num_groups, d))
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList([CausalBlock(d, cfg.n_head, cfg.dropout) for _ in range(cfg.n_layer)])
        self.ln_f = nn.LayerNorm(d)
        # zero heads: every position starts at uniform logits
        self.head_w = nn.Parameter(torch.zeros(num_groups, d, codebook_size))
        self.head_b = nn.Parameter(torch.zeros(num_groups, codebook_size))
        self.cond_encoder = DepthEncoder(d) if cfg.conditional else None
        self.history = {"nll": []}

    def check_tokens(self, tokens):
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.codebook_size):
            raise DomainError(f"token outside [0, {self.codebook_size})")
        if tokens.shape[-1] > self.num_groups:
            raise DomainError(f"sequence longer than {self.num_groups}")

    def forward(self, tokens, cond=None):
        """Logits ``(B, min(T + 1, G), K)``; entry ``t`` predicts token ``t``.

        ``tokens`` is ``(B, T)``; ``cond`` an optional ``(B, d_model)`` feature
        that replaces the start vector at position 0.
        """
        B, T = tokens.shape
        self.check_tokens(tokens)
        T = min(T, self.num_groups - 1)
        tokens = tokens[:, :T]
        first = self.start.expand(B, 1, -1) if cond is None else cond.unsqueeze(1)
        emb = self.tok_emb[torch.arange(T).unsqueeze(0).expand(B, -1), tokens.long()]
        x = torch.cat([first, emb], dim=1)
        L = x.shape[1]
        x = self.drop(x + self.pos[:L])
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        return torch.einsum("btd,tdk->btk", x, self.head_w[:L]) + self.head_b[:L]

    def nll(self, tokens, cond=None):
        logits = self(tokens, cond)
        return F.cross_entropy(logits.reshape(-1, self.codebook_size), tokens.long().reshape(-1))


def encode_condition(model: TokenTransformer, depth) -> np.ndarray:
    if model.cond_encoder is None:
        raise DomainError("model was trained without a condition encoder")
    d = as_tensor(depth)
    if d.dim() != 2 or d.numel() == 0:
        raise DomainError("depth image must be a non-empty 2D array")
    model.eval()
    with torch.no_grad():
        return model.cond_encoder(d)[0].numpy()


def forward_logits(model: TokenTransformer, prefix, condition=None) -> np.ndarray:
    """Logits for position ``len(prefix)`` given the earlier tokens."""
    prefix = torch.as_tensor(np.asarray(prefix, dtype=np.int64)).reshape(1, -1)
    if prefix.shape[1] >= model.num_groups:
        raise DomainError(f"prefix length must be < {model.num_groups}")
    model.eval()
    with torch.no_grad():
        cond = None if condition is None else as_tensor(condition).reshape(1, -1)
        return model(prefix, cond)[0, -1].double().numpy()


def apply_temperature(logits, t):
    if t <= 0:
        raise DomainError(f"temperature must be positive, got {t}")
    return np.asarray(logits, dtype=np.float64) / t


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


def nucleus_set(probs, p) -> np.ndarray:
    """Indices of the smallest top-probability prefix with mass >= ``p``.

    Sorting is stable on descending probability, so ties favor lower indices.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    reached = np.flatnonzero(cum >= p - 1e-12)
    keep = reached[0] + 1 if reached.size else len(order)
    return order[:keep]


def nucleus_filter(probs, p) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    out = np.zeros_like(probs)
    keep = nucleus_set(probs, p)
    out[keep] = probs[keep]
    return out / out.sum()


def top_k_filter(probs, k) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if not k or k >= len(probs):
        return probs
    out = np.zeros_like(probs)
    keep = np.argsort(-probs, kind="stable")[:k]
    out[keep] = probs[keep]
    return out / out.sum()


def sample_sequence(model: TokenTransformer, top_p=0.92, temperature=1.0, seed=0,
                    condition=None, top_k=0, return_nucleus=False):
    """Draw one token sequence position by position.

    Returns the ``(G,)`` token array, plus the per-position nucleus index
    sets when ``return_nucleus`` is set.
    """
    rng = np.random.default_rng(seed)
    tokens = []
    nuclei = []
    for _ in range(model.num_groups):
        logits = forward_logits(model, tokens, condition)
        probs = top_k_filter(softmax(apply_temperature(logits, temperature)), top_k)
        allowed = nucleus_set(probs, top_p)
        filtered = nucleus_filter(probs, top_p)
        tokens.append(int(rng.choice(len(filtered), p=filtered)))
        nuclei.append(allowed)
    seq = np.asarray(tokens, dtype=np.int64)
    return (seq, nuclei) if return_nucleus else seq


def train_transformer(tokens, cfg: TransformerConfig, num_groups=None, codebook_size=50,
                      conditions=None) -> TokenTransformer:
    """Teacher-forced NLL training; per-epoch mean NLL in ``history["nll"]``.

    ``conditions`` is an optional ``(S, H, W)`` array of depth images trained
    jointly with the transformer.
    """
    seqs = torch.as_tensor(np.asarray(tokens, dtype=np.int64))
    if seqs.dim() != 2 or len(seqs) == 0:
        raise DomainError("tokens must be a non-empty (S, G) array")
    G = num_groups or seqs.shape[1]
    if seqs.shape[1] != G:
        raise DomainError(f"sequences have length {seqs.shape[1]}, expected {G}")
    if cfg.conditional and conditions is None:
        raise DomainError("conditional training needs condition images")
    cond_imgs = None if conditions is None else as_tensor(conditions)
    with seeded(cfg.seed):
        model = TokenTransformer(cfg, G, codebook_size)
    model.check_tokens(seqs)
    if cfg.epochs == 0:
        return model
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    guard = FiniteGuard(model)
    model.train()
    with seeded(cfg.seed):
        for epoch in range(cfg.epochs):
            total = 0.0
            for idx in minibatches(len(seqs), cfg.batch_size, rng):
                idx = torch.as_tensor(idx)
                cond = None
                if cfg.conditional:
                    cond = model.cond_encoder(cond_imgs[idx])
                loss = model.nll(seqs[idx], cond)
                guard.check(loss.item(), epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                guard.commit()
                total += loss.item() * len(idx)
            model.history["nll"].append(total / len(seqs))
    model.eval()
    return model


def evaluate_nll(model: TokenTransformer, tokens, conditions=None) -> float:
    model.eval()
    seqs = torch.as_tensor(np.asarray(tokens, dtype=np.int64))
    with torch.no_grad():
        cond = None
        if conditions is not None:
            cond = model.cond_encoder(as_tensor(conditions))
        return float(model.nll(seqs, cond))
