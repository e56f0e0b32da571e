"""Command-line entry point: ``routedit <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, parse_overrides

log = logging.getLogger("routedit")

# exit codes by diagnostic category
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC, EXIT_ENDPOINT = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def cmd_gen_data(args) -> None:
    from .synthdata import generate_sample, save_records

    cfg = load_config(args.config, parse_overrides(args.set))
    n = args.n if args.n is not None else cfg.data.n_samples
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = save_records(out, (generate_sample(args.offset + i, cfg.data) for i in range(n)))
    out.with_suffix(out.suffix + ".config.json").write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True))
    print(f"wrote {count} samples to {out}")


def cmd_train(args) -> None:
    from .trainer import smoothed, train

    cfg = load_config(args.config, parse_overrides(args.set))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True))

    def progress(rep):
        if rep.step % max(args.print_every, 1) == 0:
            print(f"step {rep.step:6d}  fm {rep.l_fm:.4f}  align {rep.l_align:.4f}  total {rep.total:.4f}  depth {rep.depth}")

    res = train(cfg, out, on_step=progress)
    if res.diverged:
        raise CliError(res.diverged, EXIT_NUMERIC)
    tot = smoothed([r.total for r in res.reports])
    print(f"done: {len(res.reports)} steps, smoothed total {tot[0]:.4f} -> {tot[-1]:.4f}; checkpoint {out / 'final.ckpt'}")


def _dump_frames(frames: np.ndarray, out_dir: Path, stem: str) -> None:
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        Image.fromarray((np.clip(f, 0, 1) * 255 + 0.5).astype(np.uint8)).save(out_dir / f"{stem}_{t:03d}.png")


def cmd_sample(args) -> None:
    from .config import SamplerConfig
    from .sampler import sample_edit
    from .synthdata import EditQuadruple, generate_sample, iter_records, save_records
    from .trainer import load_checkpoint

    model, cfg, _ = load_checkpoint(args.ckpt)
    model.eval()
    if args.input:
        samples = list(iter_records(args.input))
        if not samples:
            raise CliError(f"{args.input} holds no records", EXIT_INPUT)
    else:
        samples = [generate_sample(args.seed, cfg.data)]
    scfg = SamplerConfig(steps=args.steps or cfg.sampler.steps, seed=args.seed)
    outputs = []
    for i, q in enumerate(samples):
        v_hat = sample_edit(q.source, q.instruction, model, config=scfg)
        # edited record: source stays the input video, target holds the model output
        mask = np.any(v_hat.frames != q.source.frames, axis=-1)
        outputs.append(EditQuadruple(q.source, q.instruction, v_hat, q.target_caption, mask, q.seed))
        if args.frames:
            _dump_frames(v_hat.frames, Path(args.frames), f"sample{i:04d}_edited")
            _dump_frames(q.source.frames, Path(args.frames), f"sample{i:04d}_source")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_records(out, outputs)
    print(f"wrote {len(outputs)} edited samples to {out}")


def cmd_analyze(args) -> None:
    from .analysis import profile_from_traces, write_profile
    from .backbone import read_traces, write_trace
    from .synthdata import iter_records

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.edit_traces:
        with open(args.edit_traces, "rb") as fh:
            edit = _group_traces(list(read_traces(fh)))
        ref = None
        if args.ref_traces:
            with open(args.ref_traces, "rb") as fh:
                ref = _group_traces(list(read_traces(fh)))
        split = max((r.block for tr in edit for r in tr if len(r.layout) == 1), default=0)
        rows = profile_from_traces(edit, ref, split)
    else:
        if not (args.ckpt and args.data):
            raise CliError("analyze needs --ckpt and --data, or --edit-traces", EXIT_CONFIG)
        import torch

        from .analysis import collect_traces
        from .backbone import BlockTrace
        from .trainer import load_checkpoint

        model, cfg, _ = load_checkpoint(args.ckpt)
        samples = list(iter_records(args.data))[: args.n or None]
        if not samples:
            raise CliError(f"{args.data} holds no records", EXIT_INPUT)
        edit, ref = collect_traces(model, samples, cfg, cfg.eval.timesteps)
        for name, traces in (("traces_edit.bin", edit), ("traces_ref.bin", ref)):
            with open(out / name, "wb") as fh:
                for tr in traces:
                    write_trace(fh, [BlockTrace(r.block, torch.as_tensor(r.features)[None], torch.as_tensor(r.probs)[None], r.layout, None) for r in tr])
        rows = profile_from_traces(edit, ref, cfg.model.split, cfg.align.temperature)
    tsv, js = write_profile(rows, out)
    with open(tsv) as fh:
        sys.stdout.write(fh.read())
    print(f"wrote {tsv} and {js}")


def _group_traces(records) -> list[list]:
    traces, cur = [], []
    for r in records:
        if r.block == 1 and cur:
            traces.append(cur)
            cur = []
        cur.append(r)
    if cur:
        traces.append(cur)
    return traces


def cmd_ablate(args) -> None:
    from .ablation import full_vs_rest, load_plan, run_ablation

    plan = load_plan(args.plan, parse_overrides(args.set))
    rows = run_ablation(plan, args.out, workers=args.workers)
    for r in rows:
        ic = r.get("ic_proxy")
        print(f"{r['variant']:<14} split={r['split']:<3} weight={r['weight']:<5} status={r['status']:<4} ic={'' if ic is None else f'{ic:.3f}'}")
    summary = full_vs_rest(rows)
    if summary:
        print(f"full variant best on ic_proxy: {summary['full_is_best']} (best: {summary['best_variant']})")
    print(f"wrote {Path(args.out) / 'ablation.tsv'}")


def _load_pairs(directory: Path):
    """Yield (sample_id, category, instruction, source_frames, edited_frames)."""
    from PIL import Image

    from .synthdata import instruction_text, iter_records

    for path in sorted(directory.glob("*.rvq")):
        for i, q in enumerate(iter_records(path)):
            text = instruction_text(q.instruction.category, q.instruction.params)
            yield f"{path.stem}:{i}", q.instruction.category, text, list(q.source.frames), list(q.target.frames)
    for sub in sorted(p for p in directory.iterdir() if p.is_dir()):
        meta_path = sub / "meta.json"
        if not meta_path.exists():
            continue
        meta = json.loads(meta_path.read_text())
        load = lambda d: [Image.open(f).convert("RGB") for f in sorted((sub / d).glob("*")) if f.is_file()]  # noqa: E731
        yield sub.name, meta["category"], meta["instruction"], load("source"), load("edited")


def cmd_judge_run(args) -> None:
    from .judge import make_endpoint, make_request, score_all, write_results
    from .judge.protocol import DroppedSample

    directory = Path(args.dir)
    if not directory.is_dir():
        raise CliError(f"{directory} is not a directory", EXIT_INPUT)
    try:
        endpoint = make_endpoint(args.endpoint, args.model)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    requests = [make_request(sid, cat, text, src, edt, args.judge) for sid, cat, text, src, edt in _load_pairs(directory)]
    if not requests:
        raise CliError(f"no sample pairs found in {directory}", EXIT_INPUT)
    results = score_all(endpoint, requests, args.max_in_flight)
    write_results(args.out, results)
    dropped = sum(isinstance(r, DroppedSample) for r in results)
    print(f"scored {len(results) - dropped} samples, dropped {dropped}; wrote {args.out}")
    if dropped == len(results):
        raise CliError("every sample was dropped", EXIT_ENDPOINT)


def cmd_judge_aggregate(args) -> None:
    from .judge import aggregate, read_records, report_rows

    records = [r for path in args.inp for r in read_records(path)]
    if not records:
        raise CliError("no judge records to aggregate", EXIT_INPUT)
    report = aggregate(records)
    rows = report_rows(report)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tsv = out.with_suffix(".tsv")
    with open(tsv, "w", newline="") as fh:
        csv.writer(fh, delimiter="\t").writerows(rows)
    out.with_suffix(".json").write_text(json.dumps(report.to_dict(), indent=2))
    for row in rows:
        print("\t".join(row))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="routedit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="YAML config (nested or dotted keys)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("gen-data", help="write synthetic quadruples as binary records")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--offset", type=int, default=0)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--print-every", type=int, default=100)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="edit a video with a trained checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--input", help="record file to edit instead of a generated sample")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--frames", help="directory for per-frame PNG dumps")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("analyze", help="depth profile of attention traces")
    sp.add_argument("--ckpt")
    sp.add_argument("--data")
    sp.add_argument("--n", type=int, default=8, help="number of records to analyze (0 = all)")
    sp.add_argument("--edit-traces")
    sp.add_argument("--ref-traces")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("ablate", help="run an ablation plan")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("judge-run", help="score sample pairs with a judge endpoint")
    sp.add_argument("--endpoint", required=True, help="'mock' or an OpenAI-compatible chat-completions URL")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--judge", default="mock")
    sp.add_argument("--model", default="")
    sp.add_argument("--max-in-flight", type=int, default=4)
    sp.set_defaults(func=cmd_judge_run)

    sp = sub.add_parser("judge-aggregate", help="aggregate judge records into the score table")
    sp.add_argument("--in", dest="inp", required=True, action="append")
    sp.add_argument("--out", required=True, help="output prefix; writes .tsv and .json")
    sp.set_defaults(func=cmd_judge_aggregate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .synthdata import ShapeError, UnsatisfiableInstruction
    from .trainer import NumericDivergence

    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShapeError, UnsatisfiableInstruction, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericDivergence, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
