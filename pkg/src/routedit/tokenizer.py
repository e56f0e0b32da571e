"""Conditioning streams: visual tokens, instruction tokens and editing tokens.

The editing-token extractor is a small causal encoder run over
``[visual; text; K query slots]``; its hidden states at the last K positions
are the editing tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import DataConfig, ModelConfig
from .layers import MLP, SelfAttention, sinusoid, to_patches


class VocabularyError(ValueError):
    pass


GROUPS = ("edit", "visual", "text")


@dataclass
class TokenBundle:
    edit: torch.Tensor  # (B, K, d)
    visual: torch.Tensor  # (B, N_v, d)
    text: torch.Tensor  # (B, N_l, d)

    @property
    def layout(self) -> tuple[tuple[str, int, int], ...]:
        """Group boundaries inside ``[edit; visual; text]``."""
        out, start = [], 0
        for name in GROUPS:
            n = getattr(self, name).shape[1]
            out.append((name, start, start + n))
            start += n
        return tuple(out)

    def concat(self) -> torch.Tensor:
        return torch.cat([self.edit, self.visual, self.text], dim=1)

    @classmethod
    def split(cls, x: torch.Tensor, layout) -> "TokenBundle":
        return cls(**{name: x[:, a:b] for name, a, b in layout})

    def detach(self) -> "TokenBundle":
        return TokenBundle(self.edit.detach(), self.visual.detach(), self.text.detach())


class CausalBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads, causal=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    """Patch embedding, instruction embedding and the editing-token extractor."""

    def __init__(self, model: ModelConfig, data: DataConfig):
        super().__init__()
        d, p = model.width, model.patch
        self.width, self.patch, self.vocab = d, p, data.vocab_size
        self.patch_embed = nn.Linear(p * p * data.C, d)
        self.instr_embed = nn.Embedding(data.vocab_size, d)
        self.queries = nn.Parameter(0.02 * torch.randn(model.edit_tokens, d))
        self.blocks = nn.ModuleList(
            CausalBlock(d, model.heads, model.mlp_ratio) for _ in range(model.extractor_blocks)
        )
        self.norm = nn.LayerNorm(d)
        self.extract_calls = 0

    @property
    def edit_tokens(self) -> int:
        return self.queries.shape[0]

    def patchify(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, C) in [0, 1] -> (B, N_v, d)."""
        x = self.patch_embed(to_patches(frames, self.patch))
        return x + sinusoid(x.shape[1], self.width, x.dtype)

    def encode_instruction(self, codes: torch.Tensor) -> torch.Tensor:
        if codes.min() < 0 or codes.max() >= self.vocab:
            raise VocabularyError(f"instruction codes must lie in [0, {self.vocab})")
        x = self.instr_embed(codes)
        return x + sinusoid(x.shape[1], self.width, x.dtype)

    def hidden_states(self, seq: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            seq = blk(seq)
        return self.norm(seq)

    def extract(self, visual: torch.Tensor, text: torch.Tensor, K: int | None = None) -> torch.Tensor:
        K = self.edit_tokens if K is None else K
        if not 1 <= K <= self.edit_tokens:
            raise ValueError(f"K must lie in [1, {self.edit_tokens}]")
        self.extract_calls += 1
        q = self.queries[:K].to(visual.dtype).expand(visual.shape[0], -1, -1)
        h = self.hidden_states(torch.cat([visual, text, q], dim=1))
        return h[:, -K:]

    def forward(self, frames: torch.Tensor, codes: torch.Tensor) -> TokenBundle:
        visual = self.patchify(frames)
        text = self.encode_instruction(codes)
        return TokenBundle(self.extract(visual, text), visual, text)
