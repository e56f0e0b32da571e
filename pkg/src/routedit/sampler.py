"""Reference-free inference: cached conditioning plus Euler integration."""

from __future__ import annotations

import numpy as np
import torch

from .backbone import RoutingConfig
from .config import SamplerConfig
from .model import EditModel, model_dtype
from .synthdata import EditInstruction, VideoGrid


class ScheduleError(ValueError):
    pass


def uniform_schedule(steps: int) -> np.ndarray:
    """Sampler times t_k = k / steps for k = steps..0 (1 is noise, 0 is data)."""
    if steps < 1:
        raise ScheduleError("need at least one sampling step")
    return np.arange(steps, -1, -1, dtype=np.float64) / steps


def euler_step(z: torch.Tensor, velocity: torch.Tensor, t_k: float, t_prev: float) -> torch.Tensor:
    """``z + (t_prev - t_k) * velocity``, with ``t_prev < t_k``.

    Times here run from 1 (noise) down to 0 (data), so ``velocity`` is the
    derivative with respect to sampler time: the negated flow velocity.
    """
    if not t_prev < t_k:
        raise ScheduleError(f"sampler times must decrease, got {t_k} -> {t_prev}")
    return z + (t_prev - t_k) * velocity


@torch.no_grad()
def sample_latent(model: EditModel, bundle, z: torch.Tensor, routing: RoutingConfig, schedule) -> torch.Tensor:
    B = z.shape[0]
    for t_k, t_prev in zip(schedule[:-1], schedule[1:]):
        flow_t = torch.full((B,), 1.0 - t_k, dtype=z.dtype)
        u, _ = model.dit(z, flow_t, bundle, routing)
        z = euler_step(z, -u, float(t_k), float(t_prev))
    return z


@torch.no_grad()
def sample_edit_batch(
    model: EditModel,
    frames: torch.Tensor,
    codes: torch.Tensor,
    routing: RoutingConfig,
    config: SamplerConfig,
) -> torch.Tensor:
    """Edit a batch (B, T, H, W, C) -> decoded frames in [0, 1]."""
    dtype = model_dtype(model)
    frames = frames.to(dtype)
    bundle = model.encoder(frames, codes)  # editing tokens computed once, reused every step
    shape = model.latent(frames).shape
    gen = torch.Generator().manual_seed(int(config.seed))
    z = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
    z = sample_latent(model, bundle, z, routing, uniform_schedule(config.steps))
    return model.decode(z)


def sample_edit(
    v: VideoGrid,
    instr: EditInstruction,
    model: EditModel,
    routing: RoutingConfig | None = None,
    config: SamplerConfig | None = None,
) -> VideoGrid:
    routing = routing or model.dit.routing
    config = config or SamplerConfig()
    frames = torch.from_numpy(v.frames)[None]
    codes = torch.from_numpy(np.asarray(instr.text_code))[None].long()
    out = sample_edit_batch(model, frames, codes, routing, config)
    return VideoGrid(out[0].to(torch.float32).numpy())
