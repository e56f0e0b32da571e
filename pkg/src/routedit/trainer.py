"""Flow-matching training with reference-anchored trace alignment."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .alignment import BranchPair, align_at, sample_depth
from .backbone import AttentionTrace, RoutingConfig
from .config import Config, config_from_flat
from .model import EditModel, build_model, collate, model_dtype
from .synthdata import EditQuadruple, generate_sample

log = logging.getLogger(__name__)

CKPT_FORMAT = "routedit-checkpoint"
CKPT_VERSION = 1


class NumericDivergence(FloatingPointError):
    def __init__(self, message: str, report: "StepReport"):
        super().__init__(message)
        self.report = report


@dataclass
class StepReport:
    step: int
    l_fm: float
    l_align: float
    total: float
    depth: int | None
    grad_norm: float
    wall_time: float
    mi: float | None = None


def flow_target(noise: torch.Tensor, target_latent: torch.Tensor, t):
    """Rectified path from noise (t=0) to data (t=1): returns (z_t, velocity target)."""
    t = torch.as_tensor(t, dtype=noise.dtype)
    if bool(((t < 0) | (t > 1)).any()):
        raise ValueError("flow time must lie in [0, 1]")
    tb = t.reshape(-1, *([1] * (noise.dim() - 1))) if t.dim() else t
    return (1 - tb) * noise + tb * target_latent, target_latent - noise


def total_loss(l_fm, l_align, weight: float):
    return l_fm + weight * l_align


def reference_trace(model: EditModel, target, caption, z_t, t, routing: RoutingConfig) -> AttentionTrace:
    """Gradient-blocked forward conditioned on the target video and its caption."""
    model.reference_calls += 1
    with torch.no_grad():
        bundle = model.encoder(target, caption)
        _, trace = model.dit(z_t, t, bundle, routing, record_trace=True)
    return trace


@dataclass
class BatchLoss:
    l_fm: torch.Tensor
    l_align: torch.Tensor
    total: torch.Tensor
    depth: int | None
    edit_trace: AttentionTrace
    ref_trace: AttentionTrace | None


def batch_loss(
    model: EditModel,
    batch,
    noise: torch.Tensor,
    t: torch.Tensor,
    depth: int | None,
    cfg: Config,
    ref_trace: AttentionTrace | None = None,
) -> BatchLoss:
    """Joint loss for fixed noise, times and alignment depth.

    ``ref_trace`` substitutes a precomputed reference trace; by default the
    reference branch runs here with the same ``z_t`` and ``t``.
    """
    src, instr, tgt, cap = batch
    routing = RoutingConfig(cfg.model.depth, cfg.model.split)
    weight = cfg.align.weight
    x1 = model.latent(tgt)
    z_t, u_star = flow_target(noise, x1, t)
    bundle = model.encoder(src, instr)
    u_hat, trace = model.dit(z_t, t, bundle, routing, record_trace=True)
    l_fm = ((u_hat - u_star) ** 2).mean()
    if weight == 0:
        zero = torch.zeros((), dtype=l_fm.dtype)
        return BatchLoss(l_fm, zero, l_fm, None, trace, None)
    if ref_trace is None:
        ref_trace = reference_trace(model, tgt, cap, z_t, t, routing)
    l_align = align_at(BranchPair(trace, ref_trace), depth, cfg.align.temperature)
    return BatchLoss(l_fm, l_align, total_loss(l_fm, l_align, weight), depth, trace, ref_trace)


def draw_noise(rng: np.random.Generator, batch_size: int, model: EditModel, cfg: Config):
    d = cfg.data
    S = d.T * (d.H // cfg.model.patch) * (d.W // cfg.model.patch)
    P = cfg.model.patch**2 * d.C
    dtype = model_dtype(model)
    u = rng.random(batch_size)
    s = cfg.train.time_shift
    if s != 1.0:
        # s > 1 moves flow times towards the noise end: sigma -> s*sigma / (1 + (s-1)*sigma)
        sigma = 1.0 - u
        u = 1.0 - s * sigma / (1.0 + (s - 1.0) * sigma)
    t = torch.from_numpy(u).to(dtype)
    noise = torch.from_numpy(rng.standard_normal((batch_size, S, P))).to(dtype)
    return noise, t


def make_optimizer(model: EditModel, cfg: Config) -> torch.optim.Optimizer:
    tc = cfg.train
    return torch.optim.AdamW(model.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2), weight_decay=tc.weight_decay)


def training_step(
    batch: list[EditQuadruple],
    model: EditModel,
    optimizer: torch.optim.Optimizer,
    cfg: Config,
    rng: np.random.Generator,
    step: int = 0,
) -> StepReport:
    """One update of encoder and backbone; mutates ``model`` and ``optimizer``."""
    if not batch:
        raise ValueError("empty batch")
    start = time.perf_counter()
    tensors = collate(batch, model_dtype(model))
    noise, t = draw_noise(rng, len(batch), model, cfg)
    depth = sample_depth(cfg.model.depth, rng) if cfg.align.weight > 0 else None
    optimizer.zero_grad(set_to_none=True)
    out = batch_loss(model, tensors, noise, t, depth, cfg)
    out.total.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip))
    report = StepReport(
        step=step,
        l_fm=out.l_fm.item(),
        l_align=out.l_align.item(),
        total=out.total.item(),
        depth=depth,
        grad_norm=grad_norm,
        wall_time=time.perf_counter() - start,
        mi=None if depth is None else -out.l_align.item(),
    )
    if not all(math.isfinite(v) for v in (report.l_fm, report.l_align, report.total, grad_norm)):
        optimizer.zero_grad(set_to_none=True)
        raise NumericDivergence(f"non-finite loss at step {step}", report)
    optimizer.step()
    report.wall_time = time.perf_counter() - start
    return report


def training_batch(step: int, cfg: Config) -> list[EditQuadruple]:
    B = cfg.train.batch_size
    data = replace(cfg.data, seed=cfg.train.data_seed) if cfg.train.data_seed else cfg.data
    return [generate_sample(step * B + i, data) for i in range(B)]


@dataclass
class TrainResult:
    model: EditModel
    optimizer: torch.optim.Optimizer
    reports: list[StepReport] = field(default_factory=list)
    diverged: str | None = None


def train(
    cfg: Config,
    out_dir: str | Path | None = None,
    on_step: Callable[[StepReport], None] | None = None,
    model: EditModel | None = None,
) -> TrainResult:
    """Run ``cfg.train.steps`` updates. Writes ``train.jsonl`` and checkpoints under ``out_dir``."""
    model = model or build_model(cfg, seed=cfg.train.seed)
    optimizer = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.train.seed)
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "train.jsonl", "w")
    result = TrainResult(model, optimizer)
    try:
        for step in range(cfg.train.steps):
            try:
                rep = training_step(training_batch(step, cfg), model, optimizer, cfg, rng, step)
            except NumericDivergence as exc:
                result.reports.append(exc.report)
                result.diverged = str(exc)
                log.error("%s", exc)
                break
            result.reports.append(rep)
            if logf is not None and step % max(cfg.train.log_every, 1) == 0:
                logf.write(json.dumps(asdict(rep)) + "\n")
            if on_step is not None:
                on_step(rep)
            every = cfg.train.checkpoint_every
            if out is not None and every and (step + 1) % every == 0:
                save_checkpoint(out / f"step{step + 1:06d}.ckpt", model, optimizer, cfg, step + 1, rng)
        if out is not None:
            save_checkpoint(out / "final.ckpt", model, optimizer, cfg, len(result.reports), rng)
    finally:
        if logf is not None:
            logf.close()
    return result


def save_checkpoint(path, model: EditModel, optimizer, cfg: Config, step: int, rng: np.random.Generator | None = None) -> None:
    """Versioned container: config echo, named float32 tensors, optimizer and rng state, step."""
    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "config": cfg.to_flat(),
        "params": {k: v.detach().to(torch.float32).contiguous().clone() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": {"numpy": rng.bit_generator.state if rng is not None else None, "torch": torch.get_rng_state()},
        "step": int(step),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[EditModel, Config, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path} is not a routedit checkpoint")
    if payload.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = config_from_flat(payload["config"])
    model = build_model(cfg)
    dtype = model_dtype(model)
    model.load_state_dict({k: v.to(dtype) for k, v in payload["params"].items()})
    return model, cfg, payload


def smoothed(values: list[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
