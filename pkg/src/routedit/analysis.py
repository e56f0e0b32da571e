"""Depth-wise metrics over recorded attention traces.

All entropies and divergences are in nats.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .alignment import infonce_mi, normalize_rows
from .backbone import RoutingConfig
from .config import Config
from .model import EditModel, collate, model_dtype
from .synthdata import EditQuadruple
from .trainer import flow_target

EPS = 1e-12


class LayoutError(ValueError):
    pass


class ComparabilityError(ValueError):
    pass


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def attention_mass_split(P, layout) -> tuple[float, float]:
    """Mean probability mass on the editing-token columns and on the rest."""
    P = _np(P)
    M = P.shape[-1]
    groups = {name: (a, b) for name, a, b in layout}
    if "edit" not in groups:
        raise LayoutError("layout has no editing-token group")
    if max(b for _, b in groups.values()) != M or min(a for a, _ in groups.values()) != 0:
        raise LayoutError(f"layout does not cover the {M} context columns")
    a, b = groups["edit"]
    # shares of each row's own total, so an edit-only context gives exactly 1
    total = P.sum(axis=-1)
    edit_rows = P[..., a:b].sum(axis=-1)
    edit = float((edit_rows / total).mean())
    if len(groups) == 1:
        return edit, 0.0
    native = float(((total - edit_rows) / total).mean())
    return edit, native


def spatial_entropy(P) -> float:
    P = _np(P)
    if (P < -1e-5).any():
        raise FloatingPointError("negative attention probabilities")
    P = np.clip(P, 0.0, None)
    P = P / P.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * np.log(P), 0.0)
    return float(-terms.sum(axis=-1).mean())


def trace_cosine(A, A_star) -> float:
    A, B = _np(A), _np(A_star)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    num = (A * B).sum(axis=-1)
    den = np.linalg.norm(A, axis=-1) * np.linalg.norm(B, axis=-1)
    return float((num / np.maximum(den, EPS)).mean())


def _kl(p, q):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0).sum(axis=-1)


def trace_js_divergence(P, P_star) -> float:
    P, Q = _np(P), _np(P_star)
    if P.shape[-1] != Q.shape[-1]:
        raise ComparabilityError(
            f"context lengths differ ({P.shape[-1]} vs {Q.shape[-1]}): traces come from different routing configs"
        )
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {Q.shape}")
    m = 0.5 * (P + Q)
    return float((0.5 * _kl(P, m) + 0.5 * _kl(Q, m)).mean())


@dataclass
class DepthRow:
    block: int
    context_len: int
    mass_edit: float
    mass_native: float
    entropy: float
    cosine: float | None = None
    js: float | None = None
    mi: float | None = None


FIELDS = ("block", "context_len", "mass_edit", "mass_native", "entropy", "cosine", "js", "mi")


def profile_from_traces(edit_traces, ref_traces=None, split: int | None = None, tau: float = 0.07) -> list[DepthRow]:
    """Average per-block metrics over a list of traces.

    Each trace is a sequence of per-block records with ``features``, ``probs``
    and ``layout``. Cross-branch columns are filled for deep blocks only.
    """
    n_blocks = len(edit_traces[0])
    rows = []
    for bi in range(n_blocks):
        mass_e, mass_n, ent, cos, js, mi = [], [], [], [], [], []
        for k, tr in enumerate(edit_traces):
            rec = tr[bi]
            e, n = attention_mass_split(rec.probs, rec.layout)
            mass_e.append(e)
            mass_n.append(n)
            ent.append(spatial_entropy(rec.probs))
            deep = split is None or rec.block > split
            if ref_traces is not None and deep:
                ref = ref_traces[k][bi]
                cos.append(trace_cosine(rec.features, ref.features))
                js.append(trace_js_divergence(rec.probs, ref.probs))
                a = normalize_rows(torch.as_tensor(_np(rec.features)))
                b = normalize_rows(torch.as_tensor(_np(ref.features)))
                mi.append(float(infonce_mi(a, b, tau)))
        probs = edit_traces[0][bi].probs
        rows.append(
            DepthRow(
                block=int(edit_traces[0][bi].block),
                context_len=int(probs.shape[-1]),
                mass_edit=float(np.mean(mass_e)),
                mass_native=float(np.mean(mass_n)),
                entropy=float(np.mean(ent)),
                cosine=float(np.mean(cos)) if cos else None,
                js=float(np.mean(js)) if js else None,
                mi=float(np.mean(mi)) if mi else None,
            )
        )
    return rows


@dataclass
class _Rec:
    block: int
    features: np.ndarray
    probs: np.ndarray
    layout: tuple


def _split_batch(trace) -> list[list[_Rec]]:
    B = trace[0].features.shape[0]
    return [[_Rec(bt.block, _np(bt.features[i]), _np(bt.probs[i]), bt.layout) for bt in trace] for i in range(B)]


@torch.no_grad()
def collect_traces(
    model: EditModel,
    samples: list[EditQuadruple],
    cfg: Config,
    timesteps=(0.1, 0.5, 0.9),
    routing: RoutingConfig | None = None,
    seed: int = 0,
):
    """Editing and reference traces for every (sample, timestep), same noise in both branches."""
    routing = routing or RoutingConfig(cfg.model.depth, cfg.model.split)
    dtype = model_dtype(model)
    src, instr, tgt, cap = collate(samples, dtype)
    gen = torch.Generator().manual_seed(seed)
    x1 = model.latent(tgt)
    edit_all, ref_all = [], []
    for t_val in timesteps:
        noise = torch.randn(x1.shape, generator=gen, dtype=torch.float64).to(dtype)
        t = torch.full((len(samples),), float(t_val), dtype=dtype)
        z_t, _ = flow_target(noise, x1, t)
        _, tr_e = model.dit(z_t, t, model.encoder(src, instr), routing, record_trace=True)
        _, tr_r = model.dit(z_t, t, model.encoder(tgt, cap), routing, record_trace=True)
        edit_all += _split_batch(tr_e)
        ref_all += _split_batch(tr_r)
    return edit_all, ref_all


def depth_profile(model: EditModel, samples, cfg: Config, timesteps=None, routing=None) -> list[DepthRow]:
    routing = routing or RoutingConfig(cfg.model.depth, cfg.model.split)
    edit, ref = collect_traces(model, samples, cfg, timesteps or cfg.eval.timesteps, routing)
    return profile_from_traces(edit, ref, routing.split, cfg.align.temperature)


def write_profile(rows: list[DepthRow], out_dir: str | Path, stem: str = "profile") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tsv, js = out / f"{stem}.tsv", out / f"{stem}.json"
    with open(tsv, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(FIELDS)
        for r in rows:
            w.writerow(["" if getattr(r, f) is None else (f"{getattr(r, f):.6f}" if isinstance(getattr(r, f), float) else getattr(r, f)) for f in FIELDS])
    js.write_text(json.dumps([asdict(r) for r in rows], indent=2))
    return tsv, js
