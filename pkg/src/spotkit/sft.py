"""Multi-turn SPOT conversation records for instruction tuning, and their parser.

Three variants are produced from one spotting annotation:

* ``N-SPOT``: points turn, then a box + text turn for every point.
* ``S-SPOT``: a single box + text turn.
* ``L-SPOT``: points, detection-only, recognition-only, then box + text.

All coordinates are bin indices.  A point is written ``(x,y)``, a box
``(x1,y1),(x2,y2)``, and text as a JSON string literal so quotes and spaces
survive unambiguously.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

from . import codec
from .codec import InstanceRecord
from .prompting import PromptRng
from .synth import SceneSpec
from .vocab import ImageExtent, PolygonGeom, QuantizedPoint, dequantize, quantize

VARIANTS = ("N-SPOT", "S-SPOT", "L-SPOT")
ROLE_TO_FROM = {"instruction": "human", "response": "gpt"}
FROM_TO_ROLE = {v: k for k, v in ROLE_TO_FROM.items()}

_PT = r"\((\d+),(\d+)\)"
_RE_POINT = re.compile(_PT)
_RE_FULL = re.compile(rf"^{_PT}\s*->\s*{_PT},{_PT}\s+(\".*\")$")
_RE_DET = re.compile(rf"^{_PT}\s*->\s*{_PT},{_PT}$")
_RE_REC = re.compile(rf"^{_PT}\s+(\".*\")$")
_RE_SHORT = re.compile(rf"^{_PT},{_PT}\s+(\".*\")$")


def load_templates(path=None) -> dict:
    """Read a template file; the packaged default is used when ``path`` is None."""
    if path is None:
        text = resources.files("spotkit").joinpath("templates/spot_templates.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    tpl = json.loads(text)
    for key in ("no_text", "points", "spot", "short", "detect", "recognize"):
        if key not in tpl:
            raise ValueError(f"template file lacks {key!r}")
    return tpl


@dataclass
class ConversationRecord:
    id: str
    image: str
    variant: str
    turns: list[tuple[str, str]]

    @property
    def n_pairs(self) -> int:
        return sum(1 for role, _ in self.turns if role == "instruction")

    @property
    def responses(self) -> list[str]:
        return [text for role, text in self.turns if role == "response"]

    def to_json(self) -> dict:
        return {"id": self.id, "image": self.image, "variant": self.variant,
                "conversations": [{"from": ROLE_TO_FROM[r], "value": t} for r, t in self.turns]}

    @classmethod
    def from_json(cls, d: dict) -> "ConversationRecord":
        turns = [(FROM_TO_ROLE[c["from"]], c["value"]) for c in d["conversations"]]
        return cls(d["id"], d.get("image", ""), d.get("variant", ""), turns)


@dataclass
class SpotEntry:
    point: QuantizedPoint
    box: Optional[tuple[int, int, int, int]]
    text: Optional[str]


@dataclass
class SpotDialogueResult:
    entries: list[SpotEntry] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)


def _fmt_point(q: QuantizedPoint) -> str:
    return f"({q.x_bin},{q.y_bin})"


def _box_bins(inst: InstanceRecord, extent: ImageExtent, n_bins: int) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = inst.geometry.bounds()
    a, b = quantize((x0, y0), extent, n_bins), quantize((x1, y1), extent, n_bins)
    return a.x_bin, a.y_bin, b.x_bin, b.y_bin


def _fmt_box(b) -> str:
    return f"({b[0]},{b[1]}),({b[2]},{b[3]})"


def _text(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


def build_record(scene: SceneSpec, variant: str, templates: Optional[dict] = None, *, seed: int = 0,
                 doc_id: str = "", image: str = "") -> ConversationRecord:
    """Conversation for one spotting annotation; phrasing is picked deterministically from ``seed``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    tpl = templates or load_templates()
    rng = PromptRng(seed)

    def pick(key: str, **slots) -> str:
        options = tpl[key]
        return options[rng.choice_index(len(options))].format(**slots)

    n_bins = scene.n_bins
    insts = codec.reading_order(scene.instances)
    boxes = [_box_bins(i, scene.extent, n_bins) for i in insts]
    pts = [_fmt_point(i.center) for i in insts]
    empty = tpl["no_text"]

    def lines(rows: list[str]) -> str:
        return "\n".join(rows) if rows else empty

    points = " ".join(pts) if pts else empty
    full = lines([f"{p} -> {_fmt_box(b)} {_text(i.transcription)}" for p, b, i in zip(pts, boxes, insts)])
    if variant == "S-SPOT":
        short = lines([f"{_fmt_box(b)} {_text(i.transcription)}" for b, i in zip(boxes, insts)])
        turns = [("instruction", pick("short", image=image)), ("response", short)]
    elif variant == "N-SPOT":
        turns = [("instruction", pick("points", image=image)), ("response", points),
                 ("instruction", pick("spot")), ("response", full)]
    else:
        det = lines([f"{p} -> {_fmt_box(b)}" for p, b in zip(pts, boxes)])
        rec = lines([f"{p} {_text(i.transcription)}" for p, i in zip(pts, insts)])
        turns = [("instruction", pick("points", image=image)), ("response", points),
                 ("instruction", pick("detect")), ("response", det),
                 ("instruction", pick("recognize")), ("response", rec),
                 ("instruction", pick("spot")), ("response", full)]
    return ConversationRecord(doc_id, image, variant, turns)


def _parse_points(text: str, empty: str) -> list[QuantizedPoint]:
    if text.strip() == empty:
        return []
    return [QuantizedPoint(int(x), int(y)) for x, y in _RE_POINT.findall(text)]


def _rows(text: str, empty: str) -> list[str]:
    if text.strip() == empty:
        return []
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


def _json_text(lit: str, diags: list, where: str) -> Optional[str]:
    try:
        v = json.loads(lit)
    except json.JSONDecodeError:
        diags.append(f"{where}: unreadable text literal")
        return None
    if not isinstance(v, str):
        diags.append(f"{where}: text literal is not a string")
        return None
    return v


def parse_dialogue(responses: Sequence[str], variant: str, no_text: str = "no text") -> SpotDialogueResult:
    """Recover spotting entries from the model-side turns of a conversation.

    The final response carries the result; for N-SPOT and L-SPOT the first
    response's points are compared against it and mismatches are reported.
    Malformed lines are skipped with a diagnostic.
    """
    out = SpotDialogueResult()
    if not responses or all(not r.strip() for r in responses):
        return out
    expected = {"N-SPOT": 2, "S-SPOT": 1, "L-SPOT": 4}[variant]
    if len(responses) != expected:
        out.diagnostics.append(f"{variant} expects {expected} responses, got {len(responses)}")
    last = responses[-1]
    for n, row in enumerate(_rows(last, no_text)):
        where = f"line {n + 1}"
        if variant == "S-SPOT":
            m = _RE_SHORT.match(row)
            if not m:
                out.diagnostics.append(f"{where}: cannot parse {row!r}")
                continue
            box = tuple(int(v) for v in m.groups()[:4])
            text = _json_text(m.group(5), out.diagnostics, where)
            if text is None:
                continue
            pt = QuantizedPoint((box[0] + box[2]) // 2, (box[1] + box[3]) // 2)
        else:
            m = _RE_FULL.match(row)
            if not m:
                out.diagnostics.append(f"{where}: missing box or text in {row!r}")
                continue
            g = m.groups()
            pt = QuantizedPoint(int(g[0]), int(g[1]))
            box = tuple(int(v) for v in g[2:6])
            text = _json_text(g[6], out.diagnostics, where)
            if text is None:
                continue
        out.entries.append(SpotEntry(pt, box, text))
    if variant != "S-SPOT":
        pts = _parse_points(responses[0], no_text)
        if len(pts) != len(out.entries):
            out.diagnostics.append(f"turn 1 lists {len(pts)} points but the final turn has {len(out.entries)} entries")
        elif any(p != e.point for p, e in zip(pts, out.entries)):
            out.diagnostics.append("turn 1 points differ from the final turn's points")
    if variant == "L-SPOT" and len(responses) == 4:
        n_det = sum(1 for r in _rows(responses[1], no_text) if _RE_DET.match(r))
        n_rec = sum(1 for r in _rows(responses[2], no_text) if _RE_REC.match(r))
        if not n_det == n_rec == len(out.entries):
            out.diagnostics.append(f"detection/recognition turns have {n_det}/{n_rec} rows, "
                                   f"final turn {len(out.entries)}")
    return out


def to_predictions(result: SpotDialogueResult, extent: ImageExtent, n_bins: int = 1000) -> list[tuple]:
    """``(point_px, text)`` pairs at bin centers, ready for :func:`spotkit.metrics.spotting_e2e`."""
    return [(dequantize(e.point, extent, n_bins), e.text) for e in result.entries]


def box_pixels(box: Sequence[int], extent: ImageExtent, n_bins: int = 1000) -> tuple[float, float, float, float]:
    a = dequantize(QuantizedPoint(box[0], box[1]), extent, n_bins)
    b = dequantize(QuantizedPoint(box[2], box[3]), extent, n_bins)
    return (a[0], a[1], b[0], b[1])


def import_ocr_jsonl(path, n_bins: int = 1000) -> list[tuple[str, SceneSpec]]:
    """Read simple external OCR annotations.

    One JSON object per line: ``{"image", "width", "height", "annotations": [{"text",
    "bbox": [x0, y0, x1, y1]} | {"text", "polygon": [[x, y], ...]}]}``.
    """
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            ext = ImageExtent(int(d["width"]), int(d["height"]))
            insts = []
            for k, a in enumerate(d.get("annotations", [])):
                if "bbox" in a:
                    geom = PolygonGeom.from_box(*a["bbox"])
                elif "polygon" in a:
                    geom = codec.resample_polygon(a["polygon"], 16)
                else:
                    raise ValueError(f"{path}:{n}: annotation {k} has neither bbox nor polygon")
                insts.append(codec.make_instance(geom, a["text"], ext, n_bins))
            out.append((d["image"], SceneSpec(ext, insts, "spotting", None, n_bins)))
    return out
