"""Synthetic editing quadruples with a closed-form oracle editor.

Every scene is a flat background with one to three axis-aligned rectangles
translating linearly across frames. Instructions recolor, erase, insert or
palette-remap, so the ground-truth target is a re-render of the edited scene.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .config import CATEGORIES, ConfigError, DataConfig

# Base palette. Scene colors are always drawn from here.
PALETTE = np.array(
    [
        [0.10, 0.10, 0.10],
        [0.90, 0.15, 0.15],
        [0.15, 0.75, 0.20],
        [0.20, 0.30, 0.90],
        [0.95, 0.85, 0.10],
        [0.85, 0.20, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.95, 0.95],
    ],
    dtype=np.float32,
)
COLOR_NAMES = ("black", "red", "green", "blue", "yellow", "magenta", "cyan", "white")
N_COLORS = len(PALETTE)

# Style tables map base color i to a styled color. Styled colors are disjoint
# from the base palette, so applying a style twice is the same as once.
STYLE_NAMES = ("identity", "sepia", "cool", "pastel")


def _style_table(tint, mix):
    # snap to odd multiples of 1/128, which no base color uses
    mixed = (1 - mix) * PALETTE + mix * np.asarray(tint, dtype=np.float32)
    return ((2 * np.floor(mixed * 64) + 1) / 128).astype(np.float32)


STYLE_TABLES = [
    None,
    _style_table((0.44, 0.26, 0.08), 0.55),
    _style_table((0.05, 0.20, 0.45), 0.5),
    _style_table((1.0, 1.0, 1.0), 0.45),
]
N_STYLES = len(STYLE_NAMES)

ADD_SIZE = 4

# Token vocabulary. Position 0..instr_len-2 hold the instruction, the last
# position is reserved for the result descriptor of the target caption.
PAD, BOS = 0, 1
CAT_BASE = 2  # 2..5
COLOR_BASE = 6  # 6..13
X_BASE = 14  # 14..29, coarse column bucket
Y_BASE = 30  # 30..45, coarse row bucket
STYLE_BASE = 46  # 46..49
RESULT_BASE = 50  # 50..53, one result descriptor per category


class UnsatisfiableInstruction(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    color: tuple[float, float, float]
    h: int
    w: int
    y: int
    x: int
    dy: int = 0
    dx: int = 0


@dataclass(frozen=True)
class Scene:
    background: tuple[float, float, float]
    objects: tuple[Rect, ...]

    def to_dict(self) -> dict:
        return {
            "background": list(self.background),
            "objects": [vars(o) | {"color": list(o.color)} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        objs = tuple(Rect(**{**o, "color": tuple(float(c) for c in o["color"])}) for o in d["objects"])
        return cls(tuple(float(c) for c in d["background"]), objs)


@dataclass
class VideoGrid:
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    scene: Scene | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 2:
            raise ShapeError(f"expected (T>=2, H, W, C) frames, got {self.frames.shape}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape)


@dataclass
class EditInstruction:
    category: str
    params: dict
    text_code: np.ndarray

    def text(self) -> str:
        return instruction_text(self.category, self.params)


@dataclass
class EditQuadruple:
    source: VideoGrid
    instruction: EditInstruction
    target: VideoGrid
    target_caption: np.ndarray
    edit_mask: np.ndarray
    seed: int | None = None


@dataclass
class ProxyScores:
    ic_proxy: float
    cf_proxy: float
    vq_proxy: float


def render(scene: Scene, T: int, H: int, W: int) -> np.ndarray:
    frames = np.empty((T, H, W, 3), dtype=np.float32)
    frames[:] = np.asarray(scene.background, dtype=np.float32)
    for t in range(T):
        for o in scene.objects:
            y0, x0 = o.y + o.dy * t, o.x + o.dx * t
            ys, ye = max(y0, 0), min(y0 + o.h, H)
            xs, xe = max(x0, 0), min(x0 + o.w, W)
            if ys < ye and xs < xe:
                frames[t, ys:ye, xs:xe] = o.color
    return frames


def _color_index(color) -> int:
    hits = np.flatnonzero(np.all(PALETTE == np.asarray(color, dtype=np.float32), axis=1))
    return int(hits[0]) if hits.size else -1


def encode_instruction(category: str, params: dict, H: int, W: int, length: int = 8) -> np.ndarray:
    codes = [BOS, CAT_BASE + CATEGORIES.index(category)]
    if category in ("LocalChange", "LocalRemove"):
        codes.append(COLOR_BASE + params["target_color"])
    if category == "LocalChange":
        codes.append(COLOR_BASE + params["new_color"])
    if category == "LocalAdd":
        codes += [
            COLOR_BASE + params["new_color"],
            X_BASE + params["x"] * 16 // W,
            Y_BASE + params["y"] * 16 // H,
        ]
    if category == "GlobalStyle":
        codes.append(STYLE_BASE + params["style"])
    out = np.full(length, PAD, dtype=np.int64)
    out[: len(codes)] = codes
    return out


def caption_code(instr: EditInstruction) -> np.ndarray:
    cap = instr.text_code.copy()
    cap[-1] = RESULT_BASE + CATEGORIES.index(instr.category)
    return cap


def instruction_text(category: str, params: dict) -> str:
    if category == "LocalChange":
        return f"Change the {COLOR_NAMES[params['target_color']]} rectangle to {COLOR_NAMES[params['new_color']]}."
    if category == "LocalRemove":
        return f"Remove the {COLOR_NAMES[params['target_color']]} rectangle."
    if category == "LocalAdd":
        return f"Add a {COLOR_NAMES[params['new_color']]} square at row {params['y']}, column {params['x']}."
    return f"Restyle the whole video with the {STYLE_NAMES[params['style']]} palette."


def make_instruction(category: str, params: dict, H: int, W: int, length: int = 8) -> EditInstruction:
    if category not in CATEGORIES:
        raise ConfigError(f"unknown category {category!r}")
    return EditInstruction(category, dict(params), encode_instruction(category, params, H, W, length))


def _find_object(scene: Scene, params: dict, done_color: int | None = None) -> int:
    idx = params.get("target")
    if idx is None or not 0 <= idx < len(scene.objects):
        raise UnsatisfiableInstruction(f"instruction references absent object {idx!r}")
    # an already-recolored object is accepted so recoloring stays idempotent
    if _color_index(scene.objects[idx].color) not in (params.get("target_color", -2), done_color):
        raise UnsatisfiableInstruction("instruction color does not match the referenced object")
    return idx


def edit_scene(scene: Scene, instr: EditInstruction, H: int, W: int) -> Scene:
    p = instr.params
    cat = instr.category
    if cat == "LocalChange":
        i = _find_object(scene, p, done_color=p["new_color"])
        objs = list(scene.objects)
        objs[i] = replace(objs[i], color=tuple(float(c) for c in PALETTE[p["new_color"]]))
        return Scene(scene.background, tuple(objs))
    if cat == "LocalRemove":
        i = _find_object(scene, p)
        return Scene(scene.background, scene.objects[:i] + scene.objects[i + 1 :])
    if cat == "LocalAdd":
        y, x = p["y"], p["x"]
        if not (0 <= y <= H - ADD_SIZE and 0 <= x <= W - ADD_SIZE):
            raise UnsatisfiableInstruction("insertion position falls outside the frame")
        new = Rect(tuple(float(c) for c in PALETTE[p["new_color"]]), ADD_SIZE, ADD_SIZE, y, x)
        return Scene(scene.background, scene.objects + (new,))
    if cat == "GlobalStyle":
        s = p["style"]
        if not 0 <= s < N_STYLES:
            raise UnsatisfiableInstruction(f"unknown style {s}")
        if s == 0:
            return scene

        def restyle(color):
            i = _color_index(color)
            return tuple(float(c) for c in STYLE_TABLES[s][i]) if i >= 0 else color

        return Scene(restyle(scene.background), tuple(replace(o, color=restyle(o.color)) for o in scene.objects))
    raise ConfigError(f"unknown category {cat!r}")


def oracle_edit(v: VideoGrid, instr: EditInstruction) -> tuple[VideoGrid, np.ndarray]:
    """Apply ``instr`` exactly; return the target video and the changed-pixel mask."""
    T, H, W, _ = v.shape
    if v.scene is None:
        if instr.category != "GlobalStyle":
            raise UnsatisfiableInstruction("local edits need the scene description of the source")
        if instr.params.get("style") == 0:
            return VideoGrid(v.frames.copy()), np.zeros((T, H, W), dtype=bool)
        # pixel-wise remap works without a scene
        out = v.frames.copy()
        table = STYLE_TABLES[instr.params["style"]]
        for i, c in enumerate(PALETTE):
            out[np.all(v.frames == c, axis=-1)] = table[i]
        return VideoGrid(out), np.any(out != v.frames, axis=-1)
    scene = edit_scene(v.scene, instr, H, W)
    frames = render(scene, T, H, W)
    return VideoGrid(frames, scene), np.any(frames != v.frames, axis=-1)


def _rng(seed: int, cfg: DataConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(seed)]))


def _random_rect(rng, color, T, H, W) -> Rect:
    h = int(rng.integers(3, min(7, H) + 1))
    w = int(rng.integers(3, min(7, W) + 1))
    dy, dx = (int(a) for a in rng.integers(-1, 2, size=2))
    # keep the full trajectory inside the frame
    span_y, span_x = dy * (T - 1), dx * (T - 1)
    y_lo, y_hi = max(0, -span_y), H - h - max(0, span_y)
    x_lo, x_hi = max(0, -span_x), W - w - max(0, span_x)
    if y_hi < y_lo:
        dy, y_lo, y_hi = 0, 0, H - h
    if x_hi < x_lo:
        dx, x_lo, x_hi = 0, 0, W - w
    return Rect(color, h, w, int(rng.integers(y_lo, y_hi + 1)), int(rng.integers(x_lo, x_hi + 1)), dy, dx)


def _random_scene(rng, cfg: DataConfig) -> tuple[Scene, list[int], int]:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    colors = rng.permutation(N_COLORS)
    bg, obj_colors = int(colors[0]), [int(c) for c in colors[1 : 1 + n]]
    objs = tuple(
        _random_rect(rng, tuple(float(x) for x in PALETTE[c]), cfg.T, cfg.H, cfg.W) for c in obj_colors
    )
    return Scene(tuple(float(x) for x in PALETTE[bg]), objs), obj_colors, bg


def _random_params(rng, category: str, obj_colors: list[int], bg: int, cfg: DataConfig) -> dict:
    free = [c for c in range(N_COLORS) if c != bg and c not in obj_colors]
    if category in ("LocalChange", "LocalRemove"):
        i = int(rng.integers(len(obj_colors)))
        p = {"target": i, "target_color": obj_colors[i]}
        if category == "LocalChange":
            p["new_color"] = int(rng.choice(free))
        return p
    if category == "LocalAdd":
        return {
            "new_color": int(rng.choice(free)),
            "y": int(rng.integers(0, cfg.H - ADD_SIZE + 1)),
            "x": int(rng.integers(0, cfg.W - ADD_SIZE + 1)),
        }
    return {"style": int(rng.integers(1, N_STYLES))}


def generate_sample(seed: int, config: DataConfig | None = None, category: str | None = None) -> EditQuadruple:
    """Deterministic quadruple for ``(seed, config)``; ``category`` forces the edit type."""
    cfg = config or DataConfig()
    cfg.validate()
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    rng = _rng(seed, cfg)
    cats = list(cfg.category_weights)
    w = np.array([cfg.category_weights[c] for c in cats], dtype=np.float64)
    drawn = cats[int(rng.choice(len(cats), p=w / w.sum()))]
    category = category or drawn
    if category not in CATEGORIES:
        raise ConfigError(f"unknown category {category!r}")
    # resample until a local edit actually changes visible pixels
    for _ in range(100):
        scene, obj_colors, bg = _random_scene(rng, cfg)
        params = _random_params(rng, category, obj_colors, bg, cfg)
        instr = make_instruction(category, params, cfg.H, cfg.W, cfg.instr_len)
        src = VideoGrid(render(scene, cfg.T, cfg.H, cfg.W), scene)
        tgt, mask = oracle_edit(src, instr)
        if mask.any():
            return EditQuadruple(src, instr, tgt, caption_code(instr), mask, seed)
    raise RuntimeError("could not draw a visible edit")  # pragma: no cover


def proxy_metrics(v: VideoGrid, instr: EditInstruction, v_hat: VideoGrid, v_star: VideoGrid, tol: float = 0.1) -> ProxyScores:
    """Pixel proxies for the three judge axes.

    ``ic_proxy`` is the fraction of changed pixels whose output is within
    ``tol`` of the target on every channel (1.0 when nothing had to change);
    ``cf_proxy`` the mean absolute deviation from the source off the mask;
    ``vq_proxy`` the mean frame-to-frame change of the output at pixels that
    are static in the source.
    """
    a, b, c = (np.asarray(x.frames, dtype=np.float64) for x in (v, v_hat, v_star))
    if not a.shape == b.shape == c.shape:
        raise ShapeError(f"shape mismatch: {a.shape}, {b.shape}, {c.shape}")
    mask = np.any(a != c, axis=-1)
    if mask.any():
        ok = np.all(np.abs(b - c) <= tol, axis=-1)
        ic = float(ok[mask].mean())
    else:
        ic = 1.0
    off = ~mask
    cf = float(np.abs(b - a)[off].mean()) if off.any() else 0.0
    static = np.all(a[1:] == a[:-1], axis=-1)
    diff = np.abs(b[1:] - b[:-1]).mean(axis=-1)
    vq = float(diff[static].mean()) if static.any() else 0.0
    return ProxyScores(ic, cf, vq)


# ---------------------------------------------------------------------------
# Binary records
#
# header  <4s I I I I I I I>  magic b"RVQ1", version, T, H, W, C, n_instr, n_caption
# body    source  float32[T*H*W*C]   row-major, little-endian
#         target  float32[T*H*W*C]
#         instr   int32[n_instr]
#         caption int32[n_caption]
#         mask    uint8[ceil(T*H*W/8)]  np.packbits, little bit order
#         meta    uint32 length + UTF-8 JSON {category, params, seed, source_scene, target_scene}

MAGIC = b"RVQ1"
VERSION = 1
_HEADER = struct.Struct("<4s7I")


def write_record(fh: BinaryIO, q: EditQuadruple) -> None:
    T, H, W, C = q.source.shape
    if q.target.shape != q.source.shape:
        raise ShapeError("source and target differ in shape")
    fh.write(_HEADER.pack(MAGIC, VERSION, T, H, W, C, len(q.instruction.text_code), len(q.target_caption)))
    fh.write(q.source.frames.astype("<f4").tobytes())
    fh.write(q.target.frames.astype("<f4").tobytes())
    fh.write(np.asarray(q.instruction.text_code).astype("<i4").tobytes())
    fh.write(np.asarray(q.target_caption).astype("<i4").tobytes())
    fh.write(np.packbits(q.edit_mask.reshape(-1), bitorder="little").tobytes())
    meta = {
        "category": q.instruction.category,
        "params": q.instruction.params,
        "seed": q.seed,
        "source_scene": q.source.scene.to_dict() if q.source.scene else None,
        "target_scene": q.target.scene.to_dict() if q.target.scene else None,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise ShapeError("truncated record")
    return b


def read_record(fh: BinaryIO) -> EditQuadruple | None:
    head = fh.read(_HEADER.size)
    if not head:
        return None
    if len(head) != _HEADER.size:
        raise ShapeError("truncated record header")
    magic, version, T, H, W, C, ni, nc = _HEADER.unpack(head)
    if magic != MAGIC or version != VERSION:
        raise ShapeError(f"not a quadruple record (magic={magic!r}, version={version})")
    n = T * H * W * C
    src = np.frombuffer(_read_exact(fh, 4 * n), "<f4").reshape(T, H, W, C).copy()
    tgt = np.frombuffer(_read_exact(fh, 4 * n), "<f4").reshape(T, H, W, C).copy()
    instr = np.frombuffer(_read_exact(fh, 4 * ni), "<i4").astype(np.int64)
    cap = np.frombuffer(_read_exact(fh, 4 * nc), "<i4").astype(np.int64)
    nbits = T * H * W
    bits = np.frombuffer(_read_exact(fh, (nbits + 7) // 8), np.uint8)
    mask = np.unpackbits(bits, bitorder="little")[:nbits].astype(bool).reshape(T, H, W)
    (mlen,) = struct.unpack("<I", _read_exact(fh, 4))
    meta = json.loads(_read_exact(fh, mlen))
    ss, ts = meta.get("source_scene"), meta.get("target_scene")
    return EditQuadruple(
        VideoGrid(src, Scene.from_dict(ss) if ss else None),
        EditInstruction(meta["category"], meta["params"], instr),
        VideoGrid(tgt, Scene.from_dict(ts) if ts else None),
        cap,
        mask,
        meta.get("seed"),
    )


def save_records(path: str | Path, samples) -> int:
    n = 0
    with open(path, "wb") as fh:
        for q in samples:
            write_record(fh, q)
            n += 1
    return n


def iter_records(path: str | Path) -> Iterator[EditQuadruple]:
    with open(path, "rb") as fh:
        while (q := read_record(fh)) is not None:
            yield q


def record_bytes(q: EditQuadruple) -> bytes:
    buf = io.BytesIO()
    write_record(buf, q)
    return buf.getvalue()


def generate_dataset(cfg: DataConfig, n: int | None = None, offset: int = 0) -> list[EditQuadruple]:
    return [generate_sample(offset + i, cfg) for i in range(cfg.n_samples if n is None else n)]
