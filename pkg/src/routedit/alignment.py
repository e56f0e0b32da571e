"""Trace alignment between the editing and reference branches.

The alignment loss is the negative symmetric InfoNCE bound between
row-normalized cross-attention features of the two branches at one uniformly
sampled block. The reference trace is detached.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import AttentionTrace
from .config import AlignConfig, ConfigError

EPS = 1e-12


class DegenerateTraceWarning(RuntimeWarning):
    pass


@dataclass
class BranchPair:
    edit_trace: AttentionTrace
    ref_trace: AttentionTrace

    def __post_init__(self):
        if len(self.edit_trace) != len(self.ref_trace):
            raise ValueError("edit and reference traces have different block counts")
        for a, b in zip(self.edit_trace, self.ref_trace):
            if a.features.shape != b.features.shape:
                raise ValueError(f"block {a.block}: feature shapes differ {tuple(a.features.shape)} vs {tuple(b.features.shape)}")


def normalize_rows(A: torch.Tensor) -> torch.Tensor:
    norm = A.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        warnings.warn("zero feature row in attention trace; flooring its norm", DegenerateTraceWarning, stacklevel=2)
    return A / norm.clamp_min(EPS)


def infonce_mi(A: torch.Tensor, A_star: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE estimate between row-aligned features.

    ``A`` and ``A_star`` are (S, d) or batched (B, S, d); a batch is averaged.
    Row i of one argument is the positive for row i of the other. The value
    never exceeds ``log S``.
    """
    if A.shape != A_star.shape:
        raise ValueError(f"shape mismatch: {tuple(A.shape)} vs {tuple(A_star.shape)}")
    if not tau > 0:
        raise ConfigError("temperature must be positive")
    logits = A @ A_star.transpose(-1, -2) / tau
    pos = torch.diagonal(logits, dim1=-2, dim2=-1)
    row = pos - torch.logsumexp(logits, dim=-1)
    col = pos - torch.logsumexp(logits, dim=-2)
    return (0.5 * (row + col).mean(dim=-1)).mean()


def sample_depth(L: int, rng: np.random.Generator) -> int:
    if L < 1:
        raise ConfigError("depth count must be >= 1")
    return int(rng.integers(1, L + 1))


def align_at(pair: BranchPair, depth: int, tau: float) -> torch.Tensor:
    a = pair.edit_trace[depth - 1].features
    b = pair.ref_trace[depth - 1].features.detach()
    return -infonce_mi(normalize_rows(a), normalize_rows(b), tau)


def align_loss(pair: BranchPair, config: AlignConfig, rng: np.random.Generator) -> tuple[torch.Tensor, int]:
    """Loss at one uniformly drawn block; also returns that block index."""
    depth = sample_depth(len(pair.edit_trace), rng)
    return align_at(pair, depth, config.temperature), depth
