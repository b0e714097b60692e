"""Deterministic synthetic scenes, receipts, tables and layouts with exhaustive ground truth.

Documents are stored one per line in JSONL (``schema_version`` 1).  Feature
grids are stored as a 16-byte header ``b"SPFG" <u16 version> <u16 0> <u32 G>
<u32 C>`` (little-endian) followed by ``G*G*C`` uint8 one-hot values.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import codec, table
from .codec import InstanceRecord, make_instance, resample_polygon
from .errors import ConfigError, PlacementError
from .prompting import PromptRng
from .vocab import DEFAULT_ENTITIES, ImageExtent, PolygonGeom, PolygonKind, TokenVocabulary, quantize

SCHEMA_VERSION = 1
GRID_MAGIC = b"SPFG"
GRID_VERSION = 1
DEFAULT_SCENE_CHARSET = "ABCDEFGHIJKLMNOP"


@dataclass(frozen=True)
class SceneConfig:
    width: int = 256
    height: int = 256
    min_words: int = 1
    max_words: int = 6
    words: Optional[int] = None
    min_len: int = 1
    max_len: int = 8
    charset: str = DEFAULT_SCENE_CHARSET
    char_w: int = 8
    char_h: int = 8
    snap: int = 8
    gap: int = 8
    task: str = "spotting"
    entities: tuple[str, ...] = DEFAULT_ENTITIES
    untagged_prob: float = 0.2
    band_height: int = 64
    curved: bool = False
    max_retries: int = 200
    n_bins: int = 1000

    def validate(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("extent must be positive")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError("need 1 <= min_words <= max_words")
        if self.words is not None and self.words < 1:
            raise ConfigError("words must be >= 1")
        if not 1 <= self.min_len <= self.max_len <= 8:
            raise ConfigError("word length must lie in [1, 8]")
        if not self.charset:
            raise ConfigError("charset is empty")
        if self.task not in ("spotting", "kie", "layout"):
            raise ConfigError(f"scene task must be spotting, kie or layout, got {self.task!r}")
        return self


@dataclass(frozen=True)
class TableConfig:
    max_rows: int = 8
    max_cols: int = 8
    rows: Optional[int] = None
    cols: Optional[int] = None
    span_prob: float = 0.2
    empty_prob: float = 0.2
    width: int = 1024
    height: int = 1024
    charset: str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
    max_len: int = 6
    char_w: int = 8
    char_h: int = 12
    n_bins: int = 1000

    def validate(self):
        for name in ("max_rows", "max_cols"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name, mx in (("rows", self.max_rows), ("cols", self.max_cols)):
            v = getattr(self, name)
            if v is not None and not 1 <= v <= mx:
                raise ConfigError(f"{name}={v} outside [1, {mx}]")
        if not 0 <= self.span_prob <= 1 or not 0 <= self.empty_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        return self


@dataclass
class SceneSpec:
    extent: ImageExtent
    instances: list[InstanceRecord]
    task: str = "spotting"
    table: Optional[table.TableDocument] = None
    n_bins: int = 1000


def _random_word(rng: PromptRng, cfg) -> str:
    n = rng.randint(getattr(cfg, "min_len", 1), cfg.max_len)
    return "".join(cfg.charset[rng.choice_index(len(cfg.charset))] for _ in range(n))


def _place_boxes(rng: PromptRng, cfg: SceneConfig, lengths: Sequence[int]) -> list[tuple[int, int, int, int]]:
    boxes: list[tuple[int, int, int, int]] = []
    for k, n in enumerate(lengths):
        w, h = n * cfg.char_w, cfg.char_h
        if w > cfg.width or h > cfg.height:
            raise PlacementError(f"word {k} ({w}x{h}px) does not fit a {cfg.width}x{cfg.height} extent")
        for _ in range(cfg.max_retries):
            x0 = cfg.snap * rng.randint(0, (cfg.width - w) // cfg.snap)
            y0 = cfg.snap * rng.randint(0, (cfg.height - h) // cfg.snap)
            cand = (x0, y0, x0 + w, y0 + h)
            if all(cand[0] >= b[2] + cfg.gap or b[0] >= cand[2] + cfg.gap or
                   cand[1] >= b[3] + cfg.gap or b[1] >= cand[3] + cfg.gap for b in boxes):
                boxes.append(cand)
                break
        else:
            raise PlacementError(f"could not place word {k} after {cfg.max_retries} tries; "
                                 "use fewer words or a larger extent")
    return boxes


def gen_scene(rng: PromptRng, config: SceneConfig = SceneConfig()) -> SceneSpec:
    cfg = config.validate()
    extent = ImageExtent(cfg.width, cfg.height)
    n_words = cfg.words if cfg.words is not None else rng.randint(cfg.min_words, cfg.max_words)
    texts = [_random_word(rng, cfg) for _ in range(n_words)]
    boxes = _place_boxes(rng, cfg, [len(t) for t in texts])

    def geom(b):
        g = PolygonGeom.from_box(*b)
        return resample_polygon(g.vertices, 16) if cfg.curved else g

    insts = [make_instance(geom(b), t, extent, cfg.n_bins) for b, t in zip(boxes, texts)]
    insts = codec.reading_order(insts)

    if cfg.task == "kie":
        out, i, g = [], 0, 0
        while i < len(insts):
            run = min(rng.randint(1, 2), len(insts) - i)
            if rng.uniform() < cfg.untagged_prob:
                out += [replace(m) for m in insts[i:i + run]]
            else:
                ent = cfg.entities[rng.choice_index(len(cfg.entities))]
                out += [replace(m, entity=ent, group=g) for m in insts[i:i + run]]
                g += 1
            i += run
        insts = out
    elif cfg.task == "layout":
        def band(inst):
            y0 = inst.geometry.bounds()[1]
            return (int(y0 // cfg.band_height), int(y0 // cfg.char_h), inst.geometry.bounds()[0])

        insts = sorted(insts, key=band)
        para_ids: dict = {}
        line_ids: dict = {}
        labelled = []
        for m in insts:
            b = band(m)
            p = para_ids.setdefault(b[0], len(para_ids))
            ln = line_ids.setdefault(b[:2], len(line_ids))
            labelled.append(replace(m, paragraph_id=p, line_id=ln))
        insts = labelled
    return SceneSpec(extent, insts, cfg.task, None, cfg.n_bins)


def _tile(rng: PromptRng, n_rows: int, n_cols: int, span_prob: float) -> list[tuple[int, int, int, int]]:
    taken = [[False] * n_cols for _ in range(n_rows)]
    cells = []
    for r in range(n_rows):
        for c in range(n_cols):
            if taken[r][c]:
                continue
            rs = cs = 1
            if rng.uniform() < span_prob and (n_rows - r > 1 or n_cols - c > 1):
                free = 0
                while c + free < n_cols and not taken[r][c + free]:
                    free += 1
                for _ in range(10):
                    rs = rng.randint(1, n_rows - r)
                    cs = rng.randint(1, free)
                    if rs * cs > 1:
                        break
                # shrink rowspan until the rectangle is free
                while rs > 1 and any(taken[r + dr][c + dc] for dr in range(rs) for dc in range(cs)):
                    rs -= 1
            for dr in range(rs):
                for dc in range(cs):
                    taken[r + dr][c + dc] = True
            cells.append((r, c, rs, cs))
    return cells


def gen_table(rng: PromptRng, config: TableConfig = TableConfig()) -> tuple[table.TableDocument, SceneSpec]:
    cfg = config.validate()
    n_rows = cfg.rows or rng.randint(1, cfg.max_rows)
    n_cols = cfg.cols or rng.randint(1, cfg.max_cols)
    extent = ImageExtent(cfg.width, cfg.height)
    col_w, row_h = cfg.width / n_cols, cfg.height / n_rows
    cells, insts = [], []
    for r, c, rs, cs in _tile(rng, n_rows, n_cols, cfg.span_prob):
        if rng.uniform() < cfg.empty_prob:
            cells.append(table.TableCell(r, c, rs, cs))
            continue
        text = _random_word(rng, cfg)
        cx, cy = (c + cs / 2) * col_w, (r + rs / 2) * row_h
        w = min(len(text) * cfg.char_w, cs * col_w - 2)
        h = min(cfg.char_h, rs * row_h - 2)
        box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        cells.append(table.TableCell(r, c, rs, cs, text, (cx, cy)))
        insts.append(make_instance(PolygonGeom.from_box(*box), text, extent, cfg.n_bins))
    doc = table.TableDocument(n_rows, n_cols, cells)
    return doc, SceneSpec(extent, insts, "table", doc, cfg.n_bins)


def rasterize(scene: SceneSpec, G: int, charset: str = DEFAULT_SCENE_CHARSET) -> np.ndarray:
    """One-hot ``(G, G, len(charset)+1)`` grid; channel 0 is background.

    A cell takes the character whose glyph box (word box split evenly per
    character along x) contains the cell center.
    """
    if G < 8:
        raise ConfigError("grid size G must be >= 8")
    index = {c: i + 1 for i, c in enumerate(charset)}
    labels = np.zeros((G, G), dtype=np.int64)
    W, H = scene.extent.width, scene.extent.height
    centers_x = (np.arange(G) + 0.5) * W / G
    centers_y = (np.arange(G) + 0.5) * H / G
    for inst in scene.instances:
        text = inst.transcription
        if not text:
            continue
        x0, y0, x1, y1 = inst.geometry.bounds()
        rows = np.nonzero((centers_y >= y0) & (centers_y < y1))[0]
        step = (x1 - x0) / len(text)
        for k, ch in enumerate(text):
            gx0, gx1 = x0 + k * step, x0 + (k + 1) * step
            cols = np.nonzero((centers_x >= gx0) & (centers_x < gx1))[0]
            labels[np.ix_(rows, cols)] = index.get(ch, 0)
    grid = np.zeros((G, G, len(charset) + 1), dtype=np.uint8)
    np.put_along_axis(grid, labels[..., None], 1, axis=2)
    return grid


def grid_rows_text(grid: np.ndarray, charset: str = DEFAULT_SCENE_CHARSET) -> list[str]:
    """Characters visible in each grid row, left to right (faithfulness oracle)."""
    lab = grid.argmax(axis=2)
    return ["".join(charset[v - 1] for v in row if v > 0) for row in lab]


def write_grid(path, grid: np.ndarray) -> None:
    G, _, C = grid.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC + struct.pack("<HHII", GRID_VERSION, 0, G, C))
        f.write(np.ascontiguousarray(grid, dtype=np.uint8).tobytes())


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(16)
        if head[:4] != GRID_MAGIC:
            raise ValueError(f"{path}: not a feature grid file")
        version, _, G, C = struct.unpack("<HHII", head[4:])
        if version != GRID_VERSION:
            raise ValueError(f"{path}: unsupported grid version {version}")
        data = np.frombuffer(f.read(), dtype=np.uint8)
    return data.reshape(G, G, C).copy()


# --- JSONL records -----------------------------------------------------------------------------

def _inst_to_json(inst: InstanceRecord) -> dict:
    d = {
        "center": [inst.center.x_bin, inst.center.y_bin],
        "kind": inst.geometry.kind.value,
        "polygon": [[round(x, 6), round(y, 6)] for x, y in inst.geometry.vertices],
        "text": inst.transcription,
    }
    for key, val in (("entity", inst.entity), ("group", inst.group), ("line_id", inst.line_id),
                     ("paragraph_id", inst.paragraph_id)):
        if val is not None:
            d[key] = val
    return d


def _inst_from_json(d: dict) -> InstanceRecord:
    from .vocab import QuantizedPoint

    geom = PolygonGeom(tuple(tuple(v) for v in d["polygon"]), PolygonKind(d.get("kind", "box4")))
    return InstanceRecord(QuantizedPoint(*d["center"]), geom, d.get("text", ""), d.get("entity"), d.get("group"),
                          d.get("line_id"), d.get("paragraph_id"))


def encode_scene(scene: SceneSpec, vocab: TokenVocabulary) -> tuple[list[int], list[list[int]]]:
    """Stage-1 ids (no prompt) and stage-2 ids for every instance in stage-1 order."""
    if scene.task == "table":
        s1 = table.encode_table_structure(scene.table, scene.extent, vocab)
        s2 = [s.to_ids(vocab) for s in table.build_cell_stage2_gt(scene.table, vocab, scene.extent)]
        return list(s1.tokens), s2
    s1 = codec.encode_stage1(scene.instances, scene.task, vocab)
    ordered = codec.reading_order(scene.instances) if scene.task == "spotting" else scene.instances
    s2 = [codec.encode_stage2(i, vocab, scene.extent).to_ids(vocab) for i in ordered]
    return list(s1.tokens), s2


def scene_to_record(scene: SceneSpec, doc_id: str, vocab: Optional[TokenVocabulary] = None) -> dict:
    rec = {
        "schema_version": SCHEMA_VERSION,
        "id": doc_id,
        "task": scene.task,
        "n_bins": scene.n_bins,
        "extent": {"width": scene.extent.width, "height": scene.extent.height},
        "instances": [_inst_to_json(i) for i in scene.instances],
    }
    if scene.table is not None:
        rec["table"] = scene.table.to_json()
        rec["html"] = table.canonical_html(scene.table)
    if vocab is not None:
        s1, s2 = encode_scene(scene, vocab)
        rec["stage1_ids"] = s1
        rec["stage2_ids"] = s2
    return rec


def record_to_scene(rec: dict) -> SceneSpec:
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {rec.get('schema_version')!r}")
    ext = ImageExtent(rec["extent"]["width"], rec["extent"]["height"])
    doc = table.TableDocument.from_json(rec["table"]) if rec.get("table") else None
    return SceneSpec(ext, [_inst_from_json(d) for d in rec["instances"]], rec.get("task", "spotting"), doc,
                     rec.get("n_bins", 1000))


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(dumps_record(rec) + "\n")


@dataclass(frozen=True)
class CorpusSpec:
    task: str = "spotting"
    count: int = 100
    seed: int = 0
    shard_size: int = 256
    scene: SceneConfig = field(default_factory=SceneConfig)
    table: TableConfig = field(default_factory=TableConfig)


def _gen_shard(args) -> list[dict]:
    spec, shard, vocab = args
    rng = PromptRng(spec.seed).spawn(shard)
    start = shard * spec.shard_size
    out = []
    for i in range(start, min(start + spec.shard_size, spec.count)):
        if spec.task == "table":
            _, scene = gen_table(rng, spec.table)
        else:
            scene = gen_scene(rng, replace(spec.scene, task=spec.task))
        out.append(scene_to_record(scene, f"{spec.task}-{spec.seed}-{i:06d}", vocab))
    return out


def gen_corpus(spec: CorpusSpec, vocab: Optional[TokenVocabulary] = None, workers: Optional[int] = None) -> list[dict]:
    """Generate ``spec.count`` records; output depends only on ``spec``, never on ``workers``."""
    n_shards = -(-spec.count // spec.shard_size)
    if workers is None:
        workers = int(os.environ.get("SPOTKIT_THREADS", "1") or 1)
    jobs = [(spec, s, vocab) for s in range(n_shards)]
    if workers > 1 and n_shards > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            shards = list(ex.map(_gen_shard, jobs))
    else:
        shards = [_gen_shard(j) for j in jobs]
    return [rec for shard in shards for rec in shard]


def scene_regions(scene: SceneSpec) -> list[tuple[float, float, float, float]]:
    return [inst.geometry.bounds() for inst in scene.instances]


def check_center(inst: InstanceRecord, extent: ImageExtent, n_bins: int) -> bool:
    return quantize(inst.geometry.centroid(), extent, n_bins) == inst.center
