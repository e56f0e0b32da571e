"""Acceptance criteria 1 to 11.

Each check carries ``@pytest.mark.criterion(n)``; the terminal summary prints
one PASS/FAIL line per criterion.
"""

from __future__ import annotations

import json
import math
import time
from decimal import Decimal

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from conftest import micro_config
from judge_fixtures import FIXTURES
from oracles import infonce_bruteforce, unit_rows
from routedit.alignment import infonce_mi, normalize_rows, sample_depth
from routedit.analysis import attention_mass_split, depth_profile, spatial_entropy, trace_cosine, trace_js_divergence
from routedit.backbone import BlockTrace, RoutingConfig
from routedit.cli import main as cli_main
from routedit.config import CATEGORIES, Config, SamplerConfig
from routedit.judge import ScriptedEndpoint, TransportError, aggregate, axis_overall, make_request, parse_response
from routedit.judge.protocol import DroppedSample, FormatFailure, JudgeRecord, score_with_retries
from routedit.model import build_model
from routedit.sampler import sample_edit
from routedit.synthdata import generate_sample
from routedit.tokenizer import TokenBundle
from routedit.trainer import batch_loss, flow_target, reference_trace

# -- 1 ----------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_c1_infonce_oracle_equivalence():
    g = np.random.default_rng(20240601)
    start = time.perf_counter()
    worst_oracle = worst_sym = 0.0
    for _ in range(1000):
        S, d = int(g.integers(1, 17)), int(g.integers(2, 9))
        tau = float(g.uniform(0.05, 2.0))
        A, B = g.normal(size=(S, d)), g.normal(size=(S, d))
        a, b = normalize_rows(torch.tensor(A)), normalize_rows(torch.tensor(B))
        mi = float(infonce_mi(a, b, tau))
        ref = infonce_bruteforce(unit_rows(A.tolist()), unit_rows(B.tolist()), tau)
        worst_oracle = max(worst_oracle, abs(mi - ref))
        worst_sym = max(worst_sym, abs(mi - float(infonce_mi(b, a, tau))))
        assert mi <= math.log(S) + 1e-12
    elapsed = time.perf_counter() - start
    assert worst_oracle < 1e-9
    assert worst_sym < 1e-9
    assert elapsed < 10.0


# -- 2 and 3 ----------------------------------------------------------------


def _micro_inputs(cfg, B=2, seed=7):
    g = torch.Generator().manual_seed(seed)
    d = cfg.data
    shape = (B, d.T, d.H, d.W, d.C)
    src = torch.rand(shape, generator=g, dtype=torch.float64)
    tgt = torch.rand(shape, generator=g, dtype=torch.float64)
    instr = torch.randint(0, d.vocab_size, (B, d.instr_len), generator=g)
    cap = torch.randint(0, d.vocab_size, (B, d.instr_len), generator=g)
    noise = torch.randn(B, 4, 48, generator=g, dtype=torch.float64)
    t = torch.tensor([0.3, 0.7], dtype=torch.float64)
    return (src, instr, tgt, cap), noise, t


def _frozen_reference(model, cfg, batch, noise, t):
    routing = RoutingConfig(cfg.model.depth, cfg.model.split)
    z_t, _ = flow_target(noise, model.latent(batch[2]), t)
    trace = reference_trace(model, batch[2], batch[3], z_t, t, routing)
    return [BlockTrace(b.block, b.features.clone(), b.probs.clone(), b.layout, b.hidden.clone()) for b in trace]


@pytest.mark.criterion(2)
def test_c2_gradient_check_micro_model():
    # L=2, d=8, K=2, S=4 (4 frames of one 4x4 patch), batch 2, lambda 0.75, tau 0.07
    cfg = micro_config()
    assert (cfg.model.depth, cfg.model.width, cfg.model.edit_tokens) == (2, 8, 2)
    assert (cfg.align.weight, cfg.align.temperature) == (0.75, 0.07)
    model = build_model(cfg, seed=0)
    # move off the zero-initialised gates so every parameter gets a nonzero gradient
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    batch, noise, t = _micro_inputs(cfg)
    depth = 2  # a deep block, so the alignment term sees the full context
    # the reference branch is a constant of the loss, so it is frozen for the difference quotients
    ref = _frozen_reference(model, cfg, batch, noise, t)

    def loss() -> float:
        return batch_loss(model, batch, noise, t, depth, cfg, ref_trace=ref).total.item()

    start = time.perf_counter()
    model.zero_grad()
    batch_loss(model, batch, noise, t, depth, cfg, ref_trace=ref).total.backward()
    analytic = {n: p.grad.clone() for n, p in model.named_parameters()}
    h = 1e-3
    worst, count = 0.0, 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                f = []
                for k in (2, 1, -1, -2):
                    flat[i] = orig + k * h
                    f.append(loss())
                flat[i] = orig
                fd = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h)
                an = analytic[name].view(-1)[i].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
                count += 1
    elapsed = time.perf_counter() - start
    assert count == sum(p.numel() for p in model.parameters())
    assert worst < 1e-4, worst
    assert elapsed < 120.0, elapsed


@pytest.mark.criterion(3)
def test_c3_frozen_copy_gives_bit_identical_gradients():
    cfg = micro_config()
    model = build_model(cfg, seed=0)
    batch, noise, t = _micro_inputs(cfg)
    model.zero_grad()
    batch_loss(model, batch, noise, t, 2, cfg).total.backward()
    live = {n: p.grad.clone() for n, p in model.named_parameters()}
    ref = _frozen_reference(model, cfg, batch, noise, t)
    model.zero_grad()
    batch_loss(model, batch, noise, t, 2, cfg, ref_trace=ref).total.backward()
    for n, p in model.named_parameters():
        assert torch.equal(p.grad, live[n]), n


@pytest.mark.criterion(3)
def test_c3_zero_gradient_into_reference_branch():
    cfg = micro_config()
    model = build_model(cfg, seed=0)
    batch, noise, t = _micro_inputs(cfg)
    ref = _frozen_reference(model, cfg, batch, noise, t)
    leaves = [b.features.detach().clone().requires_grad_(True) for b in ref]
    ref = [BlockTrace(b.block, f, b.probs, b.layout, b.hidden) for b, f in zip(ref, leaves)]
    for depth in (1, 2):
        model.zero_grad()
        batch_loss(model, batch, noise, t, depth, cfg, ref_trace=ref).total.backward()
        for f in leaves:
            assert f.grad is None or torch.count_nonzero(f.grad) == 0
    # the live reference forward builds no graph at all
    tgt = batch[2].clone().requires_grad_(True)
    z_t, _ = flow_target(noise, model.latent(batch[2]), t)
    trace = reference_trace(model, tgt, batch[3], z_t, t, RoutingConfig(2, 1))
    assert all(not b.features.requires_grad for b in trace)


# -- 4 ----------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_c4_routing_wall():
    cfg = Config().replace(**{"train.precision": "float64", "model.depth": 8, "model.split": 4})
    model = build_model(cfg, seed=0)
    K, Nv, Nl = cfg.model.edit_tokens, 64, cfg.data.instr_len
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for i in range(100):
            q = generate_sample(i, cfg.data)
            src = torch.from_numpy(q.source.frames)[None].double()
            tgt = torch.from_numpy(q.target.frames)[None].double()
            instr = torch.from_numpy(q.instruction.text_code)[None]
            cap = torch.from_numpy(q.target_caption)[None]
            z = torch.randn(1, 64, 48, generator=g, dtype=torch.float64)
            t = torch.rand(1, generator=g, dtype=torch.float64)
            for bundle in (model.encoder(src, instr), model.encoder(tgt, cap)):
                moved = TokenBundle(
                    bundle.edit,
                    bundle.visual + torch.randn(bundle.visual.shape, generator=g, dtype=torch.float64),
                    torch.randn(bundle.text.shape, generator=g, dtype=torch.float64),
                )
                _, a = model.dit(z, t, bundle, record_trace=True)
                _, b = model.dit(z, t, moved, record_trace=True)
                for x, y in zip(a, b):
                    if x.block <= 4:
                        assert torch.equal(x.hidden, y.hidden)
                        assert torch.equal(x.features, y.features)
                        assert torch.equal(x.probs, y.probs)
                        assert x.probs.shape[-1] == K
                    else:
                        assert x.probs.shape[-1] == K + Nv + Nl
                        assert y.probs.shape[-1] == K + Nv + Nl


# -- 5 ----------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_c5_inference_cost_counters():
    cfg = Config()
    model = build_model(cfg, seed=0)
    q = generate_sample(0, cfg.data)
    model.dit.calls = 0
    model.encoder.extract_calls = 0
    model.reference_calls = 0
    sample_edit(q.source, q.instruction, model, config=SamplerConfig(steps=25))
    assert model.dit.calls == 25
    assert model.reference_calls == 0
    assert model.encoder.extract_calls == 1


# -- 6 ----------------------------------------------------------------------


@pytest.mark.criterion(6)
def test_c6_depth_sampling_chi_square():
    g = np.random.default_rng(6)
    draws = np.array([sample_depth(34, g) for _ in range(80_000)])
    assert draws.min() >= 1 and draws.max() <= 34
    counts = np.bincount(draws, minlength=35)[1:]
    assert chisquare(counts).pvalue > 0.01


# -- 7 ----------------------------------------------------------------------

AXES = ("ic", "cf", "vq")

# method: (overall, 12 cells in category-major, axis-minor order)
GEMINI = {
    "VACE": (16.66, [37.15, 6.46, 18.92, 5.76, 5.37, 9.75, 11.34, 5.22, 14.78, 29.79, 15.10, 40.22]),
    "Lucy-Edit": (49.24, [68.09, 57.14, 63.37, 7.68, 44.69, 46.80, 37.64, 38.30, 39.16, 16.17, 84.38, 87.48]),
    "ICVE": (52.36, [61.58, 42.85, 64.26, 38.73, 43.05, 58.68, 38.13, 32.54, 51.04, 60.66, 58.93, 77.91]),
    "DITTO": (36.82, [48.29, 16.52, 57.43, 6.05, 11.81, 36.86, 44.25, 8.36, 49.70, 53.79, 37.00, 71.76]),
    "Kiwi-Edit": (61.35, [81.38, 62.23, 71.97, 66.63, 48.27, 46.69, 47.96, 40.46, 33.45, 70.86, 84.19, 82.07]),
    "Ours": (62.48, [69.77, 70.35, 69.42, 71.71, 41.59, 42.80, 49.46, 55.58, 45.09, 67.78, 82.76, 83.48]),
}
QWEN = {
    "VACE": (28.41, [32.65, 16.77, 61.28, 8.15, 8.15, 14.42, 14.24, 10.81, 34.42, 36.64, 36.43, 66.91]),
    "Lucy-Edit": (49.24, [68.09, 57.14, 63.37, 7.68, 44.69, 46.80, 37.64, 38.30, 39.16, 16.17, 84.38, 87.48]),
    "ICVE": (66.56, [68.46, 76.35, 86.11, 52.37, 63.61, 69.05, 52.34, 59.22, 73.69, 60.66, 58.93, 77.91]),
    "DITTO": (51.95, [51.15, 41.63, 78.49, 11.20, 25.78, 37.95, 45.67, 35.70, 62.30, 74.36, 73.64, 85.57]),
    "Kiwi-Edit": (75.89, [85.28, 85.46, 88.05, 82.29, 63.58, 64.44, 63.94, 63.33, 73.84, 73.02, 86.66, 80.79]),
    "Ours": (77.42, [78.71, 86.43, 89.92, 84.32, 67.08, 67.93, 59.49, 71.73, 79.67, 72.50, 87.64, 83.64]),
}

# variant: (overall avg, (ic, cf, vq) overall, 12 cells, matching per-category averages of the main ablation table)
ABLATION = {
    "split=8": (74.14, (71.89, 73.69, 76.83),
                [83.46, 86.72, 89.26, 81.19, 61.14, 61.53, 57.64, 60.84, 72.01, 65.28, 86.05, 84.52],
                (86.48, 67.95, 63.50, 78.61)),
    "full": (77.42, (73.76, 78.22, 80.29),
             [78.71, 86.43, 89.92, 84.32, 67.08, 67.93, 59.49, 71.73, 79.67, 72.50, 87.64, 83.64],
             (85.02, 73.11, 70.29, 81.29)),
    "split=22": (69.86, (63.92, 72.06, 73.61),
                 [71.49, 84.18, 85.97, 74.83, 58.41, 58.37, 45.12, 62.04, 69.76, 64.22, 83.59, 80.33],
                 (80.55, 63.87, 58.98, 76.05)),
    "weight=0.25": (75.10, (72.95, 74.62, 77.73),
                    [79.14, 83.45, 87.74, 82.41, 65.81, 67.34, 61.87, 62.94, 72.15, 68.38, 86.29, 83.69],
                    (83.44, 71.85, 65.65, 79.45)),
    "weight=0.5": (72.75, (69.12, 72.74, 76.39),
                   [72.52, 87.02, 89.28, 81.14, 54.54, 58.32, 58.97, 62.43, 74.42, 63.86, 86.98, 83.55],
                   (82.94, 64.67, 65.27, 78.13)),
    "weight=1.0": (73.37, (72.59, 72.41, 75.11),
                   [78.46, 81.69, 85.12, 82.64, 64.75, 66.15, 58.24, 59.51, 67.09, 71.02, 83.67, 82.09],
                   (81.76, 71.18, 61.61, 78.93)),
    "wo_grtc": (74.77, (73.07, 74.72, 76.52),
                [79.58, 85.78, 88.42, 81.86, 64.55, 66.66, 58.54, 64.85, 73.54, 72.28, 83.69, 77.45],
                (84.59, 71.02, 65.64, 77.80)),
    "wo_raaa": (76.07, (74.04, 76.05, 78.13),
                [80.62, 85.94, 88.28, 83.19, 68.19, 69.07, 58.39, 64.46, 74.37, 73.95, 85.59, 80.79],
                (84.94, 73.48, 65.74, 80.11)),
    "wo_both": (71.77, (57.28, 78.30, 79.73),
                [72.86, 88.03, 90.75, 39.86, 63.55, 65.12, 51.29, 71.17, 78.73, 65.12, 90.45, 84.31],
                (83.88, 56.18, 67.06, 79.96)),
}

# the one published average that its own triplet does not reproduce
KNOWN_INCONSISTENT = {("full", "GlobalStyle")}


def _records_for(cells, judge):
    """100 integer records per cell whose axis means equal the two-decimal cell values exactly."""
    per_axis = {}
    for idx, v in enumerate(cells):
        c, a = CATEGORIES[idx // 3], AXES[idx % 3]
        cents = int(Decimal(str(v)) * 100)
        lo, hi_count = cents // 100, cents % 100
        per_axis[(c, a)] = [lo + 1] * hi_count + [lo] * (100 - hi_count)
    out = []
    for c in CATEGORIES:
        for i in range(100):
            out.append(JudgeRecord(*(per_axis[(c, a)][i] for a in AXES), category=c, judge=judge, sample_id=f"{c}{i}"))
    return out


@pytest.mark.criterion(7)
def test_c7_main_table_overall():
    start = time.perf_counter()
    checked = 0
    for judge, table in (("gemini", GEMINI), ("qwen", QWEN)):
        for method, (overall, cells) in table.items():
            rep = aggregate(_records_for(cells, f"{judge}/{method}"))
            got_cells = [getattr(rep.per_judge[f"{judge}/{method}"][c], a) for c in CATEGORIES for a in AXES]
            assert np.allclose(got_cells, cells, atol=1e-9)
            assert abs(rep.overall[f"{judge}/{method}"] - overall) <= 0.02, (judge, method)
            checked += 1
    assert checked == 12
    assert time.perf_counter() - start < 1.0


@pytest.mark.criterion(7)
def test_c7_ablation_category_averages():
    start = time.perf_counter()
    for variant, (_, _, cells, cat_avgs) in ABLATION.items():
        rep = aggregate(_records_for(cells, variant))
        for c, published in zip(CATEGORIES, cat_avgs):
            if (variant, c) in KNOWN_INCONSISTENT:
                continue
            assert abs(rep.category_average(variant, c) - published) <= 0.01, (variant, c)
    assert aggregate(_records_for(ABLATION["full"][2], "x")).category_average("x", "LocalChange") == pytest.approx(
        85.02, abs=0.01
    )
    assert time.perf_counter() - start < 1.0


@pytest.mark.criterion(7)
def test_c7_ablation_overall_and_axis_columns():
    for variant, (avg, axes, cells, _) in ABLATION.items():
        rep = aggregate(_records_for(cells, variant))
        assert abs(rep.overall[variant] - avg) <= 0.01, variant
        got = axis_overall(rep.per_judge[variant])
        for a, published in zip(AXES, axes):
            assert abs(got[a] - published) <= 0.01, (variant, a)


@pytest.mark.criterion(7)
@pytest.mark.xfail(
    strict=True,
    reason="published full-model Global Style average is 81.29 but its own triplet (72.50, 87.64, 83.64) averages to 81.26",
)
def test_c7_full_model_global_style_average():
    rep = aggregate(_records_for(ABLATION["full"][2], "full"))
    assert abs(rep.category_average("full", "GlobalStyle") - 81.29) <= 0.01


# -- 8 ----------------------------------------------------------------------


@pytest.mark.criterion(8)
def test_c8_parser_fixtures():
    assert len(FIXTURES) >= 12
    kinds = {name for name, _, _ in FIXTURES}
    for required in ("canonical", "markdown_emphasis", "bulleted", "float_scores_half_up", "missing_axis",
                     "out_of_range_high", "trailing_prose"):
        assert required in kinds
    for name, text, expected in FIXTURES:
        got = parse_response(text)
        if isinstance(expected, str):
            assert isinstance(got, FormatFailure) and got.rule == expected, name
        else:
            assert isinstance(got, JudgeRecord) and (got.ic, got.cf, got.vq) == expected, name


@pytest.mark.criterion(8)
def test_c8_retry_bound_and_drop():
    frames = [np.zeros((8, 8, 3), np.float32)] * 2
    req = make_request("s", "LocalAdd", "Add a red square.", frames, frames, "scripted")
    bad = ScriptedEndpoint(["Instruction Compliance: 101\nConsistency & Detail Fidelity: 5\nVisual Quality & Stability: 5"])
    out = score_with_retries(bad, req)
    assert isinstance(out, DroppedSample) and bad.calls == 3
    flaky = ScriptedEndpoint([TransportError("reset"), "no scores", FIXTURES[0][1]])
    out = score_with_retries(flaky, req)
    assert isinstance(out, JudgeRecord) and flaky.calls == 3
    late = ScriptedEndpoint(["x", "y", "z", FIXTURES[0][1]])
    assert isinstance(score_with_retries(late, req), DroppedSample) and late.calls == 3


# -- 9 and 10 ---------------------------------------------------------------


@pytest.mark.criterion(9)
def test_c9_smoke_task_shape(smoke_run):
    cfg = smoke_run["cfg"]
    assert (cfg.data.T, cfg.data.H, cfg.data.W) == (4, 16, 16)
    assert cfg.data.min_objects == cfg.data.max_objects == 1
    assert dict(cfg.data.category_weights) == {"LocalChange": 1.0}
    assert cfg.train.steps == 2000 and cfg.train.batch_size == 16
    assert len(smoke_run["result"].reports) == 2000 and smoke_run["result"].diverged is None


@pytest.mark.criterion(9)
def test_c9_smoothed_loss_halves(smoke_run):
    total = smoke_run["smoothed_total"]
    assert total[-1] <= 0.5 * total[0], (total[0], total[-1])


@pytest.mark.criterion(9)
def test_c9_instruction_compliance(smoke_run):
    assert smoke_run["scores"]["ic_proxy"] >= 0.8, smoke_run["scores"]


@pytest.mark.criterion(9)
def test_c9_consistency(smoke_run):
    assert smoke_run["scores"]["cf_proxy"] <= 0.05, smoke_run["scores"]


@pytest.mark.criterion(9)
def test_c9_runtime(smoke_run):
    assert smoke_run["seconds"] <= 30 * 60


@pytest.mark.criterion(10)
def test_c10_metric_identities():
    g = np.random.default_rng(10)
    for M in (1, 2, 7, 80):
        assert abs(spatial_entropy(np.full((5, M), 1.0 / M)) - math.log(M)) < 1e-9
    P = g.random((6, 9))
    P /= P.sum(-1, keepdims=True)
    assert trace_js_divergence(P, P) == 0.0
    A = g.normal(size=(6, 4))
    assert abs(trace_cosine(A, A) - 1.0) < 1e-12


@pytest.mark.criterion(10)
def test_c10_shallow_mass_by_construction():
    cfg = Config()
    model = build_model(cfg, seed=0)
    rows = depth_profile(model, [generate_sample(i, cfg.data) for i in range(4)], cfg)
    for r in rows[: cfg.model.split]:
        assert r.mass_edit == 1.0 and r.mass_native == 0.0
    P = np.full((3, 8), 1 / 8)
    assert attention_mass_split(P, (("edit", 0, 8),)) == (1.0, 0.0)


@pytest.mark.criterion(10)
def test_c10_trained_first_deep_block_uses_native_tokens(smoke_run):
    cfg = smoke_run["cfg"]
    samples = [generate_sample(cfg.eval.heldout_offset + i, cfg.data) for i in range(cfg.eval.analysis_samples)]
    rows = depth_profile(smoke_run["result"].model, samples, cfg)
    first_deep = rows[cfg.model.split]
    assert all(r.mass_edit == 1.0 for r in rows[: cfg.model.split])
    assert first_deep.mass_native > 0.0
    assert first_deep.mass_edit < 1.0


# -- 11 ---------------------------------------------------------------------


@pytest.mark.criterion(11)
def test_c11_ablation_harness(tmp_path, capsys):
    plan = tmp_path / "plan.yaml"
    plan.write_text(
        "base:\n"
        "  model: {width: 16, heads: 2, depth: 4, split: 2, edit_tokens: 4}\n"
        "  data: {H: 8, W: 8, min_objects: 1, max_objects: 1, category_weights: {LocalChange: 1.0}}\n"
        "  train: {steps: 8, batch_size: 4, lr: 0.001}\n"
        "  sampler: {steps: 4}\n"
        "components: [full, wo_grtc, wo_raaa, wo_both]\n"
        "weight_sweep: [0, 0.25, 0.5, 0.75, 1.0]\n"
        "heldout: 2\n"
    )
    out = tmp_path / "ablate"
    assert cli_main(["ablate", "--plan", str(plan), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "full variant best on ic_proxy" in printed

    lines = (out / "ablation.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    rows = [dict(zip(header, line.split("\t"))) for line in lines[1:]]
    assert len(rows) == 9
    assert [r["variant"] for r in rows] == [
        "full", "wo_grtc", "wo_raaa", "wo_both",
        "weight=0", "weight=0.25", "weight=0.5", "weight=0.75", "weight=1",
    ]
    assert {r["status"] for r in rows} == {"ok"}
    assert [float(r["weight"]) for r in rows[4:]] == [0.0, 0.25, 0.5, 0.75, 1.0]
    by = {r["variant"]: r for r in rows}
    assert by["wo_grtc"]["split"] == by["wo_both"]["split"] == "4"
    assert float(by["wo_raaa"]["l_align_max_abs"]) == 0.0 and float(by["wo_both"]["l_align_max_abs"]) == 0.0
    for r in rows:
        for k in ("ic_proxy", "cf_proxy", "vq_proxy", "l_fm", "total"):
            assert math.isfinite(float(r[k]))

    dump = json.loads((out / "ablation.json").read_text())
    assert len(dump["rows"]) == 9
    # every row echoes its resolved config, which differs from the base only in swept keys
    base = dump["base_config"]
    for row in dump["rows"]:
        diff = {k for k in base if row["config"][k] != base[k]}
        assert diff <= {"model.split", "align.weight"}, diff
    assert (out / "full" / "final.ckpt").exists()
