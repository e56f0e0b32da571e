"""Judge requests, response parsing, retries and score aggregation."""

from __future__ import annotations

import io
import json
import math
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ..config import CATEGORIES
from .prompts import AXES, CLOSING, EDITED_HEADER, SOURCE_HEADER, build_prompt

N_FRAMES = 5
MAX_SIDE = 512
JPEG_QUALITY = 85
MAX_ATTEMPTS = 3


class InputError(ValueError):
    pass


# -- frames -----------------------------------------------------------------


def frame_indices(T: int, n: int = N_FRAMES) -> list[int]:
    """Evenly spaced indices round(i (T-1) / (n-1)); all frames when T <= n."""
    if T < 1:
        raise InputError("video has no frames")
    if T <= n:
        return list(range(T))
    return [int(math.floor(i * (T - 1) / (n - 1) + 0.5)) for i in range(n)]


def resized_size(width: int, height: int, max_side: int = MAX_SIDE) -> tuple[int, int]:
    longer = max(width, height)
    if longer <= max_side:
        return width, height
    scale = max_side / longer
    return max(1, int(math.floor(width * scale + 0.5))), max(1, int(math.floor(height * scale + 0.5)))


def _to_image(frame) -> Image.Image:
    if isinstance(frame, Image.Image):
        return frame.convert("RGB")
    arr = np.asarray(frame)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


def sample_frames(frames: Sequence, n: int = N_FRAMES, max_side: int = MAX_SIDE, quality: int = JPEG_QUALITY) -> list[bytes]:
    """Pick evenly spaced frames, shrink so the longer side is <= ``max_side``, JPEG-encode."""
    out = []
    for i in frame_indices(len(frames), n):
        img = _to_image(frames[i])
        size = resized_size(*img.size, max_side)
        if size != img.size:
            img = img.resize(size, Image.BICUBIC)
        buf = io.BytesIO()
        img.save(buf, format="JPEG", quality=quality)
        out.append(buf.getvalue())
    return out


# -- requests ---------------------------------------------------------------


@dataclass
class JudgeRequest:
    sample_id: str
    category: str
    instruction: str
    source_frames: list[bytes]
    edited_frames: list[bytes]
    judge: str = "mock"

    @property
    def system_prompt(self) -> str:
        return build_prompt(self.category, self.instruction)

    def messages(self) -> list[tuple[str, object]]:
        """User turn as ordered ("text" | "image", payload) parts: source first, then edited."""
        parts: list[tuple[str, object]] = [("text", SOURCE_HEADER)]
        parts += [("image", f) for f in self.source_frames]
        parts.append(("text", EDITED_HEADER))
        parts += [("image", f) for f in self.edited_frames]
        parts.append(("text", CLOSING))
        return parts


def make_request(sample_id, category, instruction, source_frames, edited_frames, judge="mock") -> JudgeRequest:
    return JudgeRequest(str(sample_id), category, instruction, sample_frames(source_frames), sample_frames(edited_frames), judge)


# -- parsing ----------------------------------------------------------------


@dataclass
class JudgeRecord:
    ic: int
    cf: int
    vq: int
    reasoning: str = ""
    category: str = ""
    judge: str = ""
    sample_id: str = ""


@dataclass
class FormatFailure:
    rule: str
    detail: str = ""


@dataclass
class DroppedSample:
    sample_id: str
    judge: str
    category: str
    failures: list[str] = field(default_factory=list)


_LEAD = r"^[ \t>]*(?:(?:[-*+•]|\d+[.)])[ \t]+)?[*_`]*[ \t]*"
_LABELS = {
    "ic": r"instruction[ \t]+compliance",
    "cf": r"consistency(?:[ \t]*(?:&|and)[ \t]*detail)?[ \t]+fidelity",
    "vq": r"visual[ \t]+quality(?:[ \t]*(?:&|and)[ \t]*stability)?",
}
_TAIL = r"[ \t]*(?:\([^)\n]*\))?[ \t]*[*_`]*[ \t]*[:=：][ \t]*[*_`]*[ \t]*([-+]?\d+(?:\.\d+)?)"
_PATTERNS = {k: re.compile(_LEAD + v + _TAIL, re.IGNORECASE | re.MULTILINE) for k, v in _LABELS.items()}
_REASONING = re.compile(_LEAD + r"brief[ \t]+reasoning[ \t]*[*_`]*[ \t]*:[ \t]*[*_`]*(.*)$", re.IGNORECASE | re.MULTILINE)


def coerce_score(text: str) -> int:
    """Nearest integer, ties away from zero."""
    return int(Decimal(text).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def parse_response(text: str) -> JudgeRecord | FormatFailure:
    scores = {}
    for key in ("ic", "cf", "vq"):
        m = _PATTERNS[key].search(text or "")
        if m is None:
            return FormatFailure(f"missing-axis:{key}", f"no '{AXES[('ic', 'cf', 'vq').index(key)]}' line")
        value = coerce_score(m.group(1))
        if not 1 <= value <= 100:
            return FormatFailure(f"out-of-range:{key}", f"{m.group(1)} -> {value}")
        scores[key] = value
    rm = _REASONING.search(text or "")
    reasoning = rm.group(1).strip().strip("*_`").strip() if rm else ""
    return JudgeRecord(reasoning=reasoning, **scores)


def canonical_response(rec: JudgeRecord) -> str:
    return (
        f"Brief reasoning: {rec.reasoning}\n"
        f"{AXES[0]}: {rec.ic}\n{AXES[1]}: {rec.cf}\n{AXES[2]}: {rec.vq}\n"
    )


# -- retries ----------------------------------------------------------------


def score_with_retries(endpoint, request: JudgeRequest, max_attempts: int = MAX_ATTEMPTS) -> JudgeRecord | DroppedSample:
    """First parseable response wins; after ``max_attempts`` failures the sample is dropped."""
    failures = []
    for _ in range(max_attempts):
        try:
            text = endpoint.complete(request.system_prompt, request.messages())
        except Exception as exc:  # transport failure counts as one attempt
            failures.append(f"transport:{type(exc).__name__}")
            continue
        parsed = parse_response(text)
        if isinstance(parsed, FormatFailure):
            failures.append(parsed.rule)
            continue
        parsed.category, parsed.judge, parsed.sample_id = request.category, request.judge, request.sample_id
        return parsed
    return DroppedSample(request.sample_id, request.judge, request.category, failures)


def score_all(endpoint, requests: Iterable[JudgeRequest], max_in_flight: int = 4):
    """Score requests concurrently; result order follows the input order."""
    requests = list(requests)
    if max_in_flight <= 1:
        return [score_with_retries(endpoint, r) for r in requests]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda r: score_with_retries(endpoint, r), requests))


# -- aggregation ------------------------------------------------------------

AXIS_KEYS = ("ic", "cf", "vq")


@dataclass
class CategoryScores:
    ic: float
    cf: float
    vq: float
    n: int

    @property
    def average(self) -> float:
        return (self.ic + self.cf + self.vq) / 3.0


@dataclass
class AggregateReport:
    per_judge: dict[str, dict[str, CategoryScores | None]]
    overall: dict[str, float | None]

    def category_average(self, judge: str, category: str) -> float | None:
        c = self.per_judge[judge].get(category)
        return None if c is None else c.average

    def to_dict(self) -> dict:
        return {
            "per_judge": {
                j: {c: (None if s is None else asdict(s) | {"average": s.average}) for c, s in cats.items()}
                for j, cats in self.per_judge.items()
            },
            "overall": self.overall,
        }


def overall_from_cells(cells: dict[str, CategoryScores | None]) -> float | None:
    """Mean over every present category-axis cell."""
    vals = [getattr(s, k) for s in cells.values() if s is not None for k in AXIS_KEYS]
    return sum(vals) / len(vals) if vals else None


def axis_overall(cells: dict[str, CategoryScores | None]) -> dict[str, float | None]:
    """Per-axis mean over the present categories."""
    present = [s for s in cells.values() if s is not None]
    return {k: (sum(getattr(s, k) for s in present) / len(present) if present else None) for k in AXIS_KEYS}


def aggregate(records: Iterable[JudgeRecord], categories: Sequence[str] = CATEGORIES) -> AggregateReport:
    """Axis means per judge and category, then category averages and the overall mean.

    Categories without records are reported as ``None``. Dropped samples never
    reach this function, so nothing is imputed.
    """
    groups: dict[str, dict[str, list[JudgeRecord]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        groups[r.judge][r.category].append(r)
    per_judge = {}
    for judge, cats in sorted(groups.items()):
        cells = {}
        for c in categories:
            rs = cats.get(c, [])
            cells[c] = (
                CategoryScores(*(sum(getattr(r, k) for r in rs) / len(rs) for k in AXIS_KEYS), len(rs)) if rs else None
            )
        per_judge[judge] = cells
    return AggregateReport(per_judge, {j: overall_from_cells(cells) for j, cells in per_judge.items()})


def report_rows(report: AggregateReport, categories: Sequence[str] = CATEGORIES) -> list[list[str]]:
    header = ["judge", "overall"] + [f"{c}.{k}" for c in categories for k in (*AXIS_KEYS, "avg")]
    rows = [header]
    fmt = lambda v: "" if v is None else f"{v:.2f}"  # noqa: E731
    for judge, cells in report.per_judge.items():
        row = [judge, fmt(report.overall[judge])]
        for c in categories:
            s = cells.get(c)
            row += [fmt(None if s is None else getattr(s, k)) for k in AXIS_KEYS] + [fmt(None if s is None else s.average)]
        rows.append(row)
    return rows


def read_records(path: str | Path) -> list[JudgeRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if d.get("dropped"):
                continue
            rec = JudgeRecord(**{k: d[k] for k in ("ic", "cf", "vq", "reasoning", "category", "judge", "sample_id") if k in d})
            for k in AXIS_KEYS:
                if not isinstance(rec.__dict__[k], int) or not 1 <= rec.__dict__[k] <= 100:
                    raise InputError(f"{path}: score {k}={rec.__dict__[k]!r} outside 1..100")
            out.append(rec)
    return out


def write_results(path: str | Path, results: Iterable[JudgeRecord | DroppedSample]) -> None:
    with open(path, "w") as fh:
        for r in results:
            d = asdict(r)
            if isinstance(r, DroppedSample):
                d["dropped"] = True
            fh.write(json.dumps(d) + "\n")
