"""Small building blocks shared by the encoder and the backbone."""

from __future__ import annotations

import math
from functools import lru_cache

import torch
from torch import nn
import torch.nn.functional as F


@lru_cache(maxsize=64)
def _sinusoid(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe


def sinusoid(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed (n, d) sinusoidal position code."""
    return _sinusoid(n, d).to(dtype)


def timestep_features(t: torch.Tensor, d: int) -> torch.Tensor:
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=t.dtype, device=t.device) / d)
    arg = 1000.0 * t[:, None] * freq
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


def to_patches(frames: torch.Tensor, p: int) -> torch.Tensor:
    """(B, T, H, W, C) -> (B, T*(H/p)*(W/p), p*p*C), tokens in (t, row, col) order."""
    B, T, H, W, C = frames.shape
    if H % p or W % p:
        raise ValueError(f"frame size {H}x{W} is not divisible by patch size {p}")
    x = frames.reshape(B, T, H // p, p, W // p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(B, T * (H // p) * (W // p), p * p * C)


def from_patches(x: torch.Tensor, T: int, H: int, W: int, C: int, p: int) -> torch.Tensor:
    B = x.shape[0]
    x = x.reshape(B, T, H // p, W // p, p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(B, T, H, W, C)


def grid_distances(grid: tuple[int, ...]) -> torch.Tensor:
    """Euclidean distances (N, N) between tokens laid out on ``grid`` in row-major order."""
    coords = torch.stack(
        torch.meshgrid(*(torch.arange(g, dtype=torch.float64) for g in grid), indexing="ij"), dim=-1
    ).reshape(-1, len(grid))
    return torch.cdist(coords, coords)


def locality_slopes(heads: int) -> torch.Tensor:
    """Per-head distance penalties 4, 1, 1/4, ... with the last head left global."""
    slopes = 4.0 * 0.25 ** torch.arange(heads, dtype=torch.float64)
    slopes[-1] = 0.0
    return slopes


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    B, N, D = x.shape
    return x.reshape(B, N, heads, D // heads).transpose(1, 2)


def attend(q, k, v, heads: int, causal: bool = False, bias: torch.Tensor | None = None):
    """Multi-head scaled dot-product attention.

    ``bias`` (h, Nq, Nk) is added to the logits.
    Returns merged values (B, Nq, D) and per-head probabilities (B, h, Nq, Nk).
    """
    qh, kh, vh = (split_heads(x, heads) for x in (q, k, v))
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
    if bias is not None:
        scores = scores + bias.to(scores.dtype)
    if causal:
        n = scores.shape[-1]
        mask = torch.ones(n, n, dtype=torch.bool, device=scores.device).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
    probs = torch.softmax(scores, dim=-1)
    out = (probs @ vh).transpose(1, 2).reshape(q.shape)
    return out, probs


class MLP(nn.Module):
    def __init__(self, d: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(d, ratio * d)
        self.fc2 = nn.Linear(ratio * d, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, causal: bool = False):
        super().__init__()
        self.heads, self.causal = heads, causal
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def forward(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        out, _ = attend(q, k, v, self.heads, self.causal)
        return self.proj(out)
