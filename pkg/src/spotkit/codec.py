"""Stage-1 (structured points) and stage-2 (polygon & content) token sequences.

Stage-1 grammars, one per task::

    spotting  <S> (x y)* </S>
    kie       <S> ( <e> (x y)+ </e> | x y )* </S>
    layout    <S> ( <paragraph> ( <line> (x y)+ )+ )* </S>
    table     see :mod:`spotkit.table`

Optional prompt tokens (spatial window, prefix window) sit between ``<S>`` and
the body.  Stage-2 sequences are ``<S> px py v1x v1y ... vNx vNy c1 ... </S>``
with N = 4 or 16 vertices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .errors import AlignmentError, GeometryError, TaskGrammarError
from .vocab import (ImageExtent, PolygonGeom, PolygonKind, QuantizedPoint, TokenVocabulary, dequantize,
                    quantize, raster_key)

log = logging.getLogger(__name__)

TASKS = ("spotting", "kie", "table", "layout")


@dataclass(frozen=True)
class InstanceRecord:
    center: QuantizedPoint
    geometry: PolygonGeom
    transcription: str = ""
    entity: Optional[str] = None
    group: Optional[int] = None
    line_id: Optional[int] = None
    paragraph_id: Optional[int] = None


def make_instance(geometry: PolygonGeom, text: str, extent: ImageExtent, n_bins: int, **labels) -> InstanceRecord:
    """Build an instance whose center is the quantized centroid of ``geometry``."""
    center = quantize(geometry.centroid(), extent, n_bins)
    return InstanceRecord(center=center, geometry=geometry, transcription=text, **labels)


@dataclass(frozen=True)
class StructuredPointsSequence:
    tokens: tuple[int, ...]
    task: str
    n_prompt: int = 0


@dataclass(frozen=True)
class DecodedPoint:
    point: QuantizedPoint
    labels: dict = field(default_factory=dict)


@dataclass
class Stage1Decoding:
    points: list[DecodedPoint]
    diagnostics: list[str]

    @property
    def ok(self) -> bool:
        return not self.diagnostics


@dataclass(frozen=True)
class PolyContentSequence:
    prompt_point: QuantizedPoint
    polygon_tokens: tuple[int, ...]
    content_tokens: tuple[int, ...]
    n_unk: int = 0

    def to_ids(self, vocab: TokenVocabulary) -> list[int]:
        return [vocab.bos, self.prompt_point.x_bin, self.prompt_point.y_bin,
                *self.polygon_tokens, *self.content_tokens]


@dataclass
class Stage2Decoding:
    prompt_point: Optional[QuantizedPoint]
    polygon: list[QuantizedPoint]
    text: str
    diagnostics: list[str] = field(default_factory=list)


def reading_order(instances: Sequence[InstanceRecord]) -> list[InstanceRecord]:
    """Raster scan: by y bin, then x bin, ties by input index."""
    idx = sorted(range(len(instances)), key=lambda i: (*raster_key(instances[i].center), i))
    return [instances[i] for i in idx]


def _entity_runs(instances: Sequence[InstanceRecord]):
    """Split into consecutive runs of equal (entity, group)."""
    runs = []
    for inst in instances:
        key = (inst.entity, inst.group)
        if inst.entity is not None and runs and runs[-1][0] == key:
            runs[-1][1].append(inst)
        else:
            runs.append((key, [inst]))
    return runs


def expected_labels(instances: Sequence[InstanceRecord], task: str) -> list[dict]:
    """Canonical labels that decode_stage1 must reproduce for ``instances`` in emission order."""
    if task == "spotting":
        return [{} for _ in instances]
    if task == "kie":
        out = []
        for g, ((entity, _), members) in enumerate(_entity_runs(instances)):
            for _ in members:
                out.append({"entity": entity, "group": None} if entity is None else {"entity": entity, "group": g})
        # renumber groups as ordinals over tagged runs only
        ordinals, n = {}, 0
        for lab in out:
            g = lab["group"]
            if g is not None and g not in ordinals:
                ordinals[g] = n
                n += 1
            if g is not None:
                lab["group"] = ordinals[g]
        return out
    if task == "layout":
        out, para, line = [], -1, -1
        prev = None
        for inst in instances:
            if prev is None or inst.paragraph_id != prev.paragraph_id:
                para += 1
                line += 1
            elif inst.line_id != prev.line_id:
                line += 1
            out.append({"paragraph": para, "line": line})
            prev = inst
        return out
    raise TaskGrammarError(f"no point labels for task {task!r}")


def encode_stage1(instances: Sequence[InstanceRecord], task: str, vocab: TokenVocabulary, *,
                  prompt: Sequence[int] = (), sort: Optional[bool] = None) -> StructuredPointsSequence:
    """Serialize instance centers with the task's structural tags.

    ``sort`` defaults to raster order for spotting and to annotation order for
    kie and layout.  Table documents go through :func:`spotkit.table.encode_table_structure`.
    """
    if task == "table":
        raise TaskGrammarError("table stage-1 streams are built by spotkit.table.encode_table_structure")
    if task not in TASKS:
        raise TaskGrammarError(f"unknown task {task!r}")
    if sort is None:
        sort = task == "spotting"
    insts = reading_order(instances) if sort else list(instances)
    toks = [vocab.bos, *prompt]

    def point(inst):
        toks.extend((vocab.coord_id(inst.center.x_bin), vocab.coord_id(inst.center.y_bin)))

    if task == "spotting":
        for inst in insts:
            point(inst)
    elif task == "kie":
        for (entity, _), members in _entity_runs(insts):
            if entity is None:
                for m in members:
                    point(m)
                continue
            if not vocab.has_tag(f"<{entity}>"):
                raise TaskGrammarError(f"entity {entity!r} has no tag in the vocabulary")
            toks.append(vocab.tag_id(f"<{entity}>"))
            for m in members:
                point(m)
            toks.append(vocab.tag_id(f"</{entity}>"))
    elif task == "layout":
        prev = None
        for i, inst in enumerate(insts):
            if inst.line_id is None or inst.paragraph_id is None:
                raise TaskGrammarError(f"layout instance {i} lacks line_id/paragraph_id")
            if prev is None or inst.paragraph_id != prev.paragraph_id:
                toks.append(vocab.tag_id("<paragraph>"))
                toks.append(vocab.tag_id("<line>"))
            elif inst.line_id != prev.line_id:
                toks.append(vocab.tag_id("<line>"))
            point(inst)
            prev = inst
    toks.append(vocab.eos)
    return StructuredPointsSequence(tuple(toks), task, len(prompt))


def decode_stage1(seq: StructuredPointsSequence | Sequence[int], vocab: TokenVocabulary, task: Optional[str] = None,
                  n_prompt: Optional[int] = None) -> Stage1Decoding:
    """Best-effort inverse of :func:`encode_stage1`.

    Malformed input never raises; each problem is appended to ``diagnostics``
    together with its token position, and decoding continues.
    """
    if isinstance(seq, StructuredPointsSequence):
        tokens, task = list(seq.tokens), task or seq.task
        n_prompt = seq.n_prompt if n_prompt is None else n_prompt
    else:
        tokens = [int(t) for t in seq]
    n_prompt = n_prompt or 0
    if task == "table":
        from .table import decode_table_structure

        doc, diags = decode_table_structure(tokens, vocab, n_prompt=n_prompt)
        pts = [DecodedPoint(c.center_bin, {"row": c.row, "col": c.col}) for c in doc.cells if c.center_bin]
        return Stage1Decoding(pts, diags)

    diags: list[str] = []
    points: list[DecodedPoint] = []
    pos = 0
    if not tokens or tokens[0] != vocab.bos:
        diags.append("missing <S> at token 0")
    else:
        pos = 1
    pos += n_prompt

    pending_x: Optional[tuple[int, int]] = None  # (value, position)
    open_entity: Optional[str] = None
    group = -1
    para, line = -1, -1
    line_started = False
    closed = False

    def flush_dangling():
        nonlocal pending_x
        if pending_x is not None:
            diags.append(f"dangling x at token {pending_x[1]}")
            pending_x = None

    while pos < len(tokens):
        t = tokens[pos]
        if t == vocab.eos:
            closed = True
            break
        if vocab.is_coord(t):
            if pending_x is None:
                pending_x = (t, pos)
            else:
                labels: dict = {}
                if task == "kie":
                    labels = {"entity": open_entity, "group": group if open_entity else None}
                elif task == "layout":
                    if para < 0:
                        diags.append(f"point outside paragraph at token {pos - 1}")
                        para = 0
                    if not line_started:
                        diags.append(f"point before <line> at token {pos - 1}")
                        line += 1
                        line_started = True
                    labels = {"paragraph": para, "line": line}
                points.append(DecodedPoint(QuantizedPoint(pending_x[0], t), labels))
                pending_x = None
        elif vocab.is_tag(t):
            flush_dangling()
            name = vocab.tag_of(t)
            if task == "kie" and name.startswith("</"):
                ent = name[2:-1]
                if open_entity != ent:
                    diags.append(f"unmatched {name} at token {pos}")
                open_entity = None
            elif task == "kie" and name.startswith("<") and name.endswith(">") and name not in ("<line>", "<paragraph>"):
                if open_entity is not None:
                    diags.append(f"unclosed <{open_entity}> before token {pos}")
                open_entity = name[1:-1]
                group += 1
            elif task == "layout" and name == "<paragraph>":
                para += 1
                line_started = False
            elif task == "layout" and name == "<line>":
                if para < 0:
                    diags.append(f"<line> outside paragraph at token {pos}")
                    para = 0
                line += 1
                line_started = True
            else:
                diags.append(f"unexpected tag {name} at token {pos}")
        else:
            flush_dangling()
            diags.append(f"unexpected token {vocab.token_of(t)} at token {pos}")
        pos += 1
    flush_dangling()
    if task == "kie" and open_entity is not None:
        diags.append(f"unclosed <{open_entity}> at end")
    if not closed:
        diags.append(f"missing </S> after token {len(tokens) - 1}")
    return Stage1Decoding(points, diags)


def resample_polygon(vertices: Sequence[Sequence[float]], target: int = 16) -> PolygonGeom | list:
    """Resample a closed polygon to ``target`` vertices equally spaced by arc length.

    Sampling starts at the first input vertex and follows the input winding.
    Returns a :class:`PolygonGeom` for 16 or 4 targets, else a plain vertex list.
    """
    pts = [(float(x), float(y)) for x, y in vertices]
    if len(pts) < 3:
        raise GeometryError(f"polygon needs at least 3 vertices, got {len(pts)}")
    n = len(pts)
    seg = [math.dist(pts[i], pts[(i + 1) % n]) for i in range(n)]
    perim = sum(seg)
    if perim <= 0:
        raise GeometryError("degenerate polygon with zero perimeter")
    out = []
    step = perim / target
    i, acc = 0, 0.0  # acc = arc length at start of edge i
    for k in range(target):
        s = k * step
        while i < n - 1 and acc + seg[i] < s:
            acc += seg[i]
            i += 1
        a, b = pts[i], pts[(i + 1) % n]
        t = 0.0 if seg[i] == 0 else (s - acc) / seg[i]
        t = min(max(t, 0.0), 1.0)
        out.append((a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])))
    if target == 16:
        return PolygonGeom(tuple(out), PolygonKind.CURVED16)
    if target == 4:
        return PolygonGeom(tuple(out), PolygonKind.BOX4)
    return out


def encode_stage2(inst: InstanceRecord, vocab: TokenVocabulary, extent: ImageExtent) -> PolyContentSequence:
    poly = []
    for v in inst.geometry.vertices:
        q = quantize(v, extent, vocab.n_bins)
        poly.extend((q.x_bin, q.y_bin))
    content, n_unk = vocab.encode_text(inst.transcription)
    if n_unk:
        log.warning("%d character(s) outside charset encoded as <UNK>", n_unk)
    return PolyContentSequence(inst.center, tuple(poly), tuple(content) + (vocab.eos,), n_unk)


def decode_stage2(ids: Sequence[int], vocab: TokenVocabulary, has_prompt: bool = True) -> Stage2Decoding:
    """Parse ``<S> [px py] coords... chars... </S>``; tolerant of truncation."""
    ids = [int(i) for i in ids]
    diags = []
    pos = 0
    if ids and ids[0] == vocab.bos:
        pos = 1
    else:
        diags.append("missing <S> at token 0")
    prompt = None
    if has_prompt:
        if pos + 1 < len(ids) and vocab.is_coord(ids[pos]) and vocab.is_coord(ids[pos + 1]):
            prompt = QuantizedPoint(ids[pos], ids[pos + 1])
            pos += 2
        else:
            diags.append(f"missing prompt point at token {pos}")
    coords = []
    while pos < len(ids) and vocab.is_coord(ids[pos]):
        coords.append(ids[pos])
        pos += 1
    if len(coords) not in (8, 32):
        diags.append(f"polygon has {len(coords)} coordinate tokens, expected 8 or 32")
    if len(coords) % 2:
        coords = coords[:-1]
    polygon = [QuantizedPoint(coords[i], coords[i + 1]) for i in range(0, len(coords), 2)]
    chars = []
    closed = False
    while pos < len(ids):
        t = ids[pos]
        if t == vocab.eos:
            closed = True
            break
        if vocab.is_char(t) or t == vocab.unk:
            chars.append(t)
        else:
            diags.append(f"unexpected token {vocab.token_of(t)} at token {pos}")
        pos += 1
    if not closed:
        diags.append("missing </S> in content")
    return Stage2Decoding(prompt, polygon, vocab.decode_text(chars), diags)


@dataclass
class SpotResult:
    point: tuple[float, float]
    polygon: list[tuple[float, float]]
    text: str


@dataclass
class LayoutHierarchy:
    words: list[SpotResult]
    lines: list[frozenset]
    paragraphs: list[frozenset]


def assemble_task_output(stage1: Stage1Decoding | Sequence[DecodedPoint], stage2_list: Sequence[Stage2Decoding],
                         task: str, extent: Optional[ImageExtent] = None, n_bins: Optional[int] = None):
    """Combine index-aligned stage-1 points and stage-2 decodes into a task result.

    spotting -> list[SpotResult]; kie -> {entity: [value, ...]} with one value
    per entity group; layout -> LayoutHierarchy.  Coordinates are dequantized to
    pixels when ``extent`` and ``n_bins`` are given, else left in bin units.
    """
    points = stage1.points if isinstance(stage1, Stage1Decoding) else list(stage1)
    if len(points) != len(stage2_list):
        raise AlignmentError(f"{len(points)} stage-1 points but {len(stage2_list)} stage-2 sequences")

    def px(q: QuantizedPoint):
        if extent is None or n_bins is None:
            return (float(q.x_bin), float(q.y_bin))
        return dequantize(q, extent, n_bins)

    words = [SpotResult(px(p.point), [px(v) for v in s2.polygon], s2.text) for p, s2 in zip(points, stage2_list)]
    if task == "spotting":
        return words
    if task == "kie":
        fields: dict[str, list[str]] = {}
        groups: dict = {}
        for p, w in zip(points, words):
            ent = p.labels.get("entity")
            if ent is None:
                continue
            key = (ent, p.labels.get("group"))
            if key not in groups:
                groups[key] = len(fields.setdefault(ent, []))
                fields[ent].append("")
            fields[ent][groups[key]] += w.text
        return fields
    if task == "layout":
        lines: dict[int, set] = {}
        paras: dict[int, set] = {}
        for i, p in enumerate(points):
            lines.setdefault(p.labels.get("line", 0), set()).add(i)
            paras.setdefault(p.labels.get("paragraph", 0), set()).add(i)
        return LayoutHierarchy(words, [frozenset(lines[k]) for k in sorted(lines)],
                               [frozenset(paras[k]) for k in sorted(paras)])
    raise TaskGrammarError(f"cannot assemble task {task!r}; tables use spotkit.table.reconstruct_html")


def kie_fields(instances: Iterable[InstanceRecord]) -> dict[str, list[str]]:
    """Ground-truth entity map built with the same join rule as assemble_task_output."""
    fields: dict[str, list[str]] = {}
    for (entity, _), members in _entity_runs(list(instances)):
        if entity is not None:
            fields.setdefault(entity, []).append("".join(m.transcription for m in members))
    return fields
