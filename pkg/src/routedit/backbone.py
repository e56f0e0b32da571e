"""Micro diffusion transformer with depth-routed cross-attention.

Blocks ``1..split`` cross-attend to the editing tokens only; deeper blocks
cross-attend to ``[edit; visual; text]``. Self-attention over the latent is
never routed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator

import numpy as np
import torch
from torch import nn

from .config import ConfigError, DataConfig, ModelConfig
from .layers import MLP, SelfAttention, attend, grid_distances, locality_slopes, sinusoid, timestep_features
from .tokenizer import TokenBundle


# the head predicts the clean latent; velocity divides by the remaining time, floored here
T_FLOOR = 0.05


class RoutingError(IndexError):
    pass


@dataclass(frozen=True)
class RoutingConfig:
    depth: int
    split: int

    def __post_init__(self):
        if self.depth < 1 or not 1 <= self.split <= self.depth:
            raise ConfigError(f"need 1 <= split <= depth, got split={self.split}, depth={self.depth}")


@dataclass
class BlockTrace:
    block: int
    features: torch.Tensor  # (B, S, d) cross-attention output before the residual add
    probs: torch.Tensor  # (B, S, M) head-averaged
    layout: tuple[tuple[str, int, int], ...]
    hidden: torch.Tensor  # (B, S, d) block output


AttentionTrace = list[BlockTrace]


def route_context(block_idx: int, routing: RoutingConfig, bundle: TokenBundle):
    """Cross-attention context of block ``block_idx`` (1-based) and its layout."""
    if not 1 <= block_idx <= routing.depth:
        raise RoutingError(f"block index {block_idx} outside 1..{routing.depth}")
    if block_idx <= routing.split:
        K = bundle.edit.shape[1]
        return bundle.edit, (("edit", 0, K),)
    return bundle.concat(), bundle.layout


def locality_bias(layout, dist: torch.Tensor, slopes: torch.Tensor) -> torch.Tensor:
    """Logit bias (h, S, M): visual keys are penalised by grid distance to the query, others untouched."""
    S = dist.shape[0]
    M = layout[-1][2]
    bias = torch.zeros(len(slopes), S, M, dtype=dist.dtype)
    for name, a, b in layout:
        if name == "visual" and b - a == S:
            bias[:, :, a:b] = -slopes[:, None, None] * dist
    return bias


def cross_attention(queries: torch.Tensor, context: torch.Tensor, wq, wkv, proj, heads: int, bias=None):
    """Returns output features (B, S, d) and head-averaged probabilities (B, S, M)."""
    if not (torch.isfinite(queries).all() and torch.isfinite(context).all()):
        raise FloatingPointError("non-finite input to cross-attention")
    k, v = wkv(context).chunk(2, dim=-1)
    out, probs = attend(wq(queries), k, v, heads, bias=bias)
    return proj(out), probs.mean(dim=1)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


class DiTBlock(nn.Module):
    """Self-attention and MLP are modulated by the timestep (zero-initialised gates); cross-attention is not."""

    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.self_attn = SelfAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ctx_norm = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d, 2 * d)
        self.proj = nn.Linear(d, d)
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False)
        self.mlp = MLP(d, mlp_ratio)
        self.ada = nn.Linear(d, 6 * d)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x, context, c, bias=None):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1[:, None, :] * self.self_attn(modulate(self.norm1(x), sh1, sc1))
        feats, probs = cross_attention(
            self.norm2(x), self.ctx_norm(context), self.q, self.kv, self.proj, self.heads, bias
        )
        x = x + feats
        x = x + g2[:, None, :] * self.mlp(modulate(self.norm3(x), sh2, sc2))
        return x, feats, probs


class DiT(nn.Module):
    def __init__(self, model: ModelConfig, data: DataConfig):
        super().__init__()
        d = model.width
        self.width = d
        self.routing = RoutingConfig(model.depth, model.split)
        latent_dim = model.patch * model.patch * data.C
        self.in_proj = nn.Linear(latent_dim, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(DiTBlock(d, model.heads, model.mlp_ratio) for _ in range(model.depth))
        self.out_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.out_ada = nn.Linear(d, 2 * d)
        self.out_proj = nn.Linear(d, latent_dim)
        for lin in (self.out_ada, self.out_proj):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.register_buffer("dist", grid_distances((data.T, data.H // model.patch, data.W // model.patch)), persistent=False)
        self.register_buffer("slopes", locality_slopes(model.heads), persistent=False)
        self.calls = 0

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        bundle: TokenBundle,
        routing: RoutingConfig | None = None,
        record_trace: bool = False,
    ):
        """Predict the velocity for latent ``z`` (B, S, P) at flow time ``t`` (B,)."""
        routing = routing or self.routing
        if routing.depth != len(self.blocks):
            raise ConfigError(f"routing depth {routing.depth} does not match {len(self.blocks)} blocks")
        self.calls += 1
        x = self.in_proj(z) + sinusoid(z.shape[1], self.width, z.dtype)
        c = self.time_mlp(timestep_features(t.to(z.dtype), self.width))
        x = x + c[:, None, :]
        c = nn.functional.silu(c)
        trace: AttentionTrace = []
        biases = {}
        for i, blk in enumerate(self.blocks, start=1):
            context, layout = route_context(i, routing, bundle)
            if layout not in biases:
                biases[layout] = locality_bias(layout, self.dist, self.slopes)
            x, feats, probs = blk(x, context, c, biases[layout])
            if record_trace:
                trace.append(BlockTrace(i, feats, probs, layout, x))
        shift, scale = self.out_ada(c).chunk(2, dim=-1)
        clean = self.out_proj(modulate(self.out_norm(x), shift, scale))
        velocity = (clean - z) / (1 - t.to(z.dtype)).clamp_min(T_FLOOR)[:, None, None]
        return velocity, (trace if record_trace else None)


# ---------------------------------------------------------------------------
# Trace record stream
#
# per block, little-endian:
#   <4s I I I I I I>  magic b"RVT1", version, block, S, d, M, n_groups
#   n_groups x (<16s I I>)  group name (NUL padded), start, end
#   features float32[S*d] row-major, probs float32[S*M] row-major
# One record per (sample, block); a stream is a plain concatenation.

TRACE_MAGIC = b"RVT1"
_TRACE_HEAD = struct.Struct("<4s6I")
_GROUP = struct.Struct("<16sII")


@dataclass
class TraceRecord:
    block: int
    features: np.ndarray  # (S, d)
    probs: np.ndarray  # (S, M)
    layout: tuple[tuple[str, int, int], ...]


def write_trace(fh: BinaryIO, trace: AttentionTrace, index: int = 0) -> None:
    """Write batch element ``index`` of ``trace``."""
    for bt in trace:
        f = bt.features[index].detach().cpu().numpy().astype("<f4")
        p = bt.probs[index].detach().cpu().numpy().astype("<f4")
        fh.write(_TRACE_HEAD.pack(TRACE_MAGIC, 1, bt.block, f.shape[0], f.shape[1], p.shape[1], len(bt.layout)))
        for name, a, b in bt.layout:
            fh.write(_GROUP.pack(name.encode(), a, b))
        fh.write(f.tobytes())
        fh.write(p.tobytes())


def read_traces(fh: BinaryIO) -> Iterator[TraceRecord]:
    while head := fh.read(_TRACE_HEAD.size):
        if len(head) != _TRACE_HEAD.size:
            raise ValueError("truncated trace record")
        magic, version, block, S, d, M, ng = _TRACE_HEAD.unpack(head)
        if magic != TRACE_MAGIC or version != 1:
            raise ValueError("not a trace record stream")
        layout = []
        for _ in range(ng):
            name, a, b = _GROUP.unpack(fh.read(_GROUP.size))
            layout.append((name.rstrip(b"\0").decode(), a, b))
        f = np.frombuffer(fh.read(4 * S * d), "<f4").reshape(S, d)
        p = np.frombuffer(fh.read(4 * S * M), "<f4").reshape(S, M)
        yield TraceRecord(block, f.copy(), p.copy(), tuple(layout))
