"""Masked token predictor and parity-constrained token selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ManipulatorConfig:
    codebook_size: int = 128
    layers: int = 4
    hidden: int = 128
    heads: int = 2
    filter: int = 512
    kernel: int = 5
    embed_dim: int = 128
    max_len: int = 1024
    dropout: float = 0.0
    architecture: str = "transformer"

    def __post_init__(self):
        for name in ("codebook_size", "layers", "hidden", "heads", "filter", "kernel",
                     "embed_dim", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.architecture != "transformer":
            raise ValueError(f"unsupported manipulator architecture {self.architecture!r}")


class ConvFFN(nn.Module):
    def __init__(self, hidden, filter, kernel, dropout):
        super().__init__()
        self.conv1 = nn.Conv1d(hidden, filter, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(filter, hidden, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        h = F.gelu(self.conv1(x.transpose(1, 2)))
        return self.drop(self.conv2(h).transpose(1, 2))


class TransformerBlock(nn.Module):
    def __init__(self, cfg: ManipulatorConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden)
        self.attn = nn.MultiheadAttention(cfg.hidden, cfg.heads, dropout=cfg.dropout,
                                          batch_first=True)
        self.norm2 = nn.LayerNorm(cfg.hidden)
        self.ffn = ConvFFN(cfg.hidden, cfg.filter, cfg.kernel, cfg.dropout)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ffn(self.norm2(x))


class Manipulator(nn.Module):
    """Predicts every frame's token distribution in one parallel pass.

    Masked inputs use the reserved id ``codebook_size``.
    """

    def __init__(self, cfg: ManipulatorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ManipulatorConfig()
        self.mask_id = cfg.codebook_size
        self.tokens = nn.Embedding(cfg.codebook_size + 1, cfg.embed_dim)
        self.positions = nn.Embedding(cfg.max_len, cfg.embed_dim)
        self.inp = nn.Linear(cfg.embed_dim, cfg.hidden)
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.codebook_size)

    def forward(self, ids, mask):
        """ids, mask: (B, T) -> logits (B, T, K)."""
        if ids.shape != mask.shape:
            raise ValueError("ids and mask must have the same shape")
        t = ids.shape[1]
        if t > self.cfg.max_len:
            return torch.cat([self(ids[:, i:i + self.cfg.max_len], mask[:, i:i + self.cfg.max_len])
                              for i in range(0, t, self.cfg.max_len)], dim=1)
        x = torch.where(mask, torch.full_like(ids, self.mask_id), ids)
        h = self.tokens(x) + self.positions(torch.arange(t, device=ids.device))
        h = self.inp(h)
        for block in self.blocks:
            h = block(h)
        return self.head(self.norm(h))


def masked_cross_entropy(logits, ids, mask):
    """Mean cross-entropy over masked frames only."""
    return F.cross_entropy(logits[mask], ids[mask])


@dataclass
class TokenDistribution:
    logits: np.ndarray  # T x K

    @property
    def probabilities(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)


def predict_masked(model: Manipulator, ids, mask) -> TokenDistribution:
    """Token distributions for a single sequence with the masked frames hidden."""
    ids = torch.as_tensor(np.asarray(ids), dtype=torch.long)
    mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    if ids.shape != mask.shape or ids.ndim != 1:
        raise ValueError("ids and mask must be 1-D sequences of equal length")
    with torch.no_grad():
        logits = model(ids[None], mask[None])[0]
    return TokenDistribution(logits.double().numpy())


def sample_parity_token(logits, required_parity: int, mode: str = "argmax",
                        seed=None, temperature: float = 1.0) -> int:
    """Pick a token id with ``id % 2 == required_parity`` from one row of logits.

    ``argmax`` returns the most probable id of that parity (lowest id on ties);
    ``temperature`` samples from the softmax restricted to that parity class.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if required_parity not in (0, 1):
        raise ValueError("parity must be 0 or 1")
    candidates = np.arange(required_parity, logits.size, 2)
    if candidates.size == 0:
        raise ValueError(f"no codebook ids with parity {required_parity}")
    sub = logits[candidates]
    if mode == "argmax":
        return int(candidates[int(np.argmax(sub))])
    if mode != "temperature":
        raise ValueError(f"unknown sampling mode {mode!r}")
    z = (sub - sub.max()) / temperature
    p = np.exp(z)
    return int(np.random.default_rng(seed).choice(candidates, p=p / p.sum()))
