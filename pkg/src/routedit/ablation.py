"""Ablation sweeps: component removals plus routing-split and alignment-weight sweeps."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .config import Config, ConfigError, config_from_flat, load_config
from .sampler import sample_edit
from .synthdata import generate_sample, proxy_metrics
from .trainer import smoothed, train

log = logging.getLogger(__name__)

COMPONENT_VARIANTS = ("full", "wo_grtc", "wo_raaa", "wo_both")
WEIGHT_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)
SWEPT_KEYS = ("model.split", "align.weight")


@dataclass
class Variant:
    name: str
    overrides: dict[str, Any]
    seed: int | None = None


@dataclass
class AblationPlan:
    base: Config
    variants: list[Variant]
    heldout: int = 8

    def resolved(self, v: Variant) -> Config:
        flat = {**self.base.to_flat(), **v.overrides}
        if v.seed is not None:
            flat["train.seed"] = v.seed
        return config_from_flat(flat)


def component_overrides(name: str, base: Config) -> dict[str, Any]:
    L = base.model.depth
    return {
        "full": {},
        "wo_grtc": {"model.split": L},
        "wo_raaa": {"align.weight": 0.0},
        "wo_both": {"model.split": L, "align.weight": 0.0},
    }[name]


def build_plan(
    base: Config,
    components=COMPONENT_VARIANTS,
    split_sweep=(),
    weight_sweep=WEIGHT_SWEEP,
    heldout: int = 8,
    seeds: dict[str, int] | None = None,
) -> AblationPlan:
    seeds = seeds or {}
    variants = []
    for name in components:
        if name not in COMPONENT_VARIANTS:
            raise ConfigError(f"unknown component variant {name!r}")
        variants.append(Variant(name, component_overrides(name, base), seeds.get(name)))
    for s in split_sweep:
        name = f"split={int(s)}"
        variants.append(Variant(name, {"model.split": int(s)}, seeds.get(name)))
    for w in weight_sweep:
        name = f"weight={float(w):g}"
        variants.append(Variant(name, {"align.weight": float(w)}, seeds.get(name)))
    for v in variants:
        if set(v.overrides) - set(SWEPT_KEYS):
            raise ConfigError(f"variant {v.name} overrides non-swept keys")
    return AblationPlan(base, variants, heldout)


def load_plan(path: str | Path, overrides: dict[str, Any] | None = None) -> AblationPlan:
    """Plan file keys: ``base`` (config path or inline mapping), ``components``,
    ``split_sweep``, ``weight_sweep``, ``heldout``, ``seeds``."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    base = raw.get("base", {})
    if isinstance(base, str):
        cfg = load_config(path.parent / base, overrides)
    else:
        from .config import flatten

        cfg = config_from_flat({**flatten(base), **(overrides or {})})
    return build_plan(
        cfg,
        components=raw.get("components", COMPONENT_VARIANTS),
        split_sweep=raw.get("split_sweep", ()),
        weight_sweep=raw.get("weight_sweep", WEIGHT_SWEEP),
        heldout=int(raw.get("heldout", 8)),
        seeds=raw.get("seeds"),
    )


ROW_FIELDS = (
    "variant", "split", "weight", "steps", "status",
    "l_fm", "l_align", "total", "l_align_max_abs",
    "ic_proxy", "cf_proxy", "vq_proxy",
)


def evaluate(model, cfg: Config, n: int) -> dict[str, float]:
    scores = []
    for i in range(n):
        q = generate_sample(cfg.eval.heldout_offset + i, cfg.data)
        v_hat = sample_edit(q.source, q.instruction, model, config=cfg.sampler)
        scores.append(proxy_metrics(q.source, q.instruction, v_hat, q.target))
    return {k: float(np.mean([getattr(s, k) for s in scores])) for k in ("ic_proxy", "cf_proxy", "vq_proxy")}


def run_variant(name: str, cfg: Config, heldout: int, out_dir: str | Path | None = None) -> dict[str, Any]:
    row: dict[str, Any] = {
        "variant": name, "split": cfg.model.split, "weight": cfg.align.weight,
        "steps": cfg.train.steps, "status": "ok", "config": cfg.to_flat(),
    }
    try:
        res = train(cfg, out_dir)
    except Exception as exc:  # one broken variant must not stop the sweep
        row["status"] = f"error: {type(exc).__name__}: {exc}"
        return row
    reps = res.reports
    if reps:
        window = min(50, len(reps))
        row["l_fm"] = float(smoothed([r.l_fm for r in reps], window)[-1])
        row["l_align"] = float(smoothed([r.l_align for r in reps], window)[-1])
        row["total"] = float(smoothed([r.total for r in reps], window)[-1])
        row["l_align_max_abs"] = float(max(abs(r.l_align) for r in reps))
    if res.diverged:
        row["status"] = f"diverged: {res.diverged}"
        return row
    row.update(evaluate(res.model, cfg, heldout))
    return row


def _run_one(args):
    return run_variant(*args)


def run_ablation(plan: AblationPlan, out_dir: str | Path | None = None, workers: int = 1) -> list[dict[str, Any]]:
    """Train and score every variant; one row per variant, in plan order."""
    out = Path(out_dir) if out_dir is not None else None
    jobs = []
    for v in plan.variants:
        vdir = None if out is None else out / v.name.replace("=", "_")
        jobs.append((v.name, plan.resolved(v), plan.heldout, vdir))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]
    if out is not None:
        write_report(rows, out, plan)
    return rows


def write_report(rows: list[dict[str, Any]], out_dir: str | Path, plan: AblationPlan | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(ROW_FIELDS)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in ROW_FIELDS])
    dump = {"base_config": plan.base.to_flat() if plan else None, "rows": rows}
    (out / "ablation.json").write_text(json.dumps(dump, indent=2, default=str))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def full_vs_rest(rows: list[dict[str, Any]]) -> dict[str, Any]:
    """Whether ``full`` leads on ic_proxy; reported, never asserted."""
    scored = {r["variant"]: r.get("ic_proxy") for r in rows if r.get("ic_proxy") is not None}
    if "full" not in scored:
        return {}
    best = max(scored, key=scored.get)
    return {"full_ic": scored["full"], "best_variant": best, "full_is_best": best == "full"}
