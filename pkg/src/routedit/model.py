"""Encoder + backbone bundle and the fixed latent map.

The latent of a video is its raw patch layout rescaled to [-1, 1]; decoding is
the exact inverse followed by clamping. Nothing about the latent is learned,
so the flow-matching target cannot drift with the parameters.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .backbone import DiT
from .config import Config
from .layers import from_patches, to_patches
from .synthdata import EditQuadruple
from .tokenizer import Encoder


class EditModel(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.data_cfg = cfg.data
        self.patch = cfg.model.patch
        self.encoder = Encoder(cfg.model, cfg.data)
        self.dit = DiT(cfg.model, cfg.data)
        self.reference_calls = 0

    def latent(self, frames: torch.Tensor) -> torch.Tensor:
        return 2.0 * to_patches(frames, self.patch) - 1.0

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        d = self.data_cfg
        return from_patches((z + 1.0) / 2.0, d.T, d.H, d.W, d.C, self.patch).clamp(0.0, 1.0)


def build_model(cfg: Config, seed: int | None = None) -> EditModel:
    if seed is not None:
        torch.manual_seed(seed)
    model = EditModel(cfg)
    if cfg.train.precision == "float64":
        model = model.double()
    return model


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def collate(samples: list[EditQuadruple], dtype=torch.float32):
    """Stack quadruples into (source, instr, target, caption) tensors."""
    src = torch.from_numpy(np.stack([q.source.frames for q in samples])).to(dtype)
    tgt = torch.from_numpy(np.stack([q.target.frames for q in samples])).to(dtype)
    instr = torch.from_numpy(np.stack([q.instruction.text_code for q in samples])).long()
    cap = torch.from_numpy(np.stack([q.target_caption for q in samples])).long()
    return src, instr, tgt, cap
