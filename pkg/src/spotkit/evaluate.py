"""Per-document and aggregate evaluation over corpus or prediction records.

A prediction record is ``{"id", "task", "result"}``; a corpus record (as written
by ``gen-corpus``) is accepted on either side and converted to its perfect
result first.  Result payloads by task:

* spotting: ``[{"point": [x, y], "polygon": [[x, y], ...], "text": str}, ...]``
* kie: ``{"fields": {entity: [value, ...]}}``
* table: ``{"html": str}``
* layout: ``{"words": [...as spotting...], "lines": [[i, ...]], "paragraphs": [[i, ...]]}``

Coordinates are pixels.
"""

from __future__ import annotations

from typing import Sequence

from . import codec, synth, table
from .errors import ConfigError
from .metrics import aggregate, field_f1, panoptic_quality, spotting_e2e, ted_accuracy, teds
from .metrics.panoptic import layout_groups


def _word(inst) -> dict:
    cx, cy = inst.geometry.centroid()
    return {"point": [cx, cy], "polygon": [list(v) for v in inst.geometry.vertices], "text": inst.transcription}


def perfect_result(rec: dict) -> dict | list:
    """The result a flawless model would emit for a corpus record."""
    scene = synth.record_to_scene(rec)
    task = scene.task
    if task == "spotting":
        return [_word(i) for i in codec.reading_order(scene.instances)]
    if task == "kie":
        return {"fields": codec.kie_fields(scene.instances)}
    if task == "table":
        return {"html": table.canonical_html(scene.table)}
    if task == "layout":
        words = [_word(i) for i in scene.instances]
        lines: dict = {}
        paras: dict = {}
        for k, inst in enumerate(scene.instances):
            lines.setdefault(inst.line_id, []).append(k)
            paras.setdefault(inst.paragraph_id, []).append(k)
        return {"words": words, "lines": [lines[k] for k in sorted(lines)],
                "paragraphs": [paras[k] for k in sorted(paras)]}
    raise ConfigError(f"unknown task {task!r}")


def result_of(rec: dict) -> dict | list:
    return rec["result"] if "result" in rec else perfect_result(rec)


def result_to_json(task: str, result) -> dict | list:
    """Serialize the in-memory output of inference into the record payload form."""
    def word(w):
        return {"point": list(w.point), "polygon": [list(v) for v in w.polygon], "text": w.text}

    if task == "spotting":
        return [word(w) for w in result]
    if task == "kie":
        return {"fields": result}
    if task == "table":
        return {"html": result}
    if task == "layout":
        return {"words": [word(w) for w in result.words], "lines": [sorted(s) for s in result.lines],
                "paragraphs": [sorted(s) for s in result.paragraphs]}
    raise ConfigError(f"unknown task {task!r}")


def _region(word: dict):
    poly = word.get("polygon") or []
    if len(poly) >= 3:
        return [tuple(v) for v in poly]
    x, y = word["point"]
    return (x, y, x, y)


def _bbox(word: dict):
    poly = word.get("polygon") or []
    if len(poly) < 3:
        return None
    xs, ys = [v[0] for v in poly], [v[1] for v in poly]
    return (min(xs), min(ys), max(xs), max(ys))


def score_document(task: str, gt, pred) -> dict:
    if task == "spotting":
        g = [(_region(w), w["text"]) for w in gt]
        p = [((w["polygon"] if len(w.get("polygon") or []) >= 3 else w["point"]), w["text"]) for w in pred]
        return spotting_e2e(g, p)
    if task == "kie":
        f = field_f1(gt["fields"], pred["fields"])
        return {"field": f, "ted_accuracy": ted_accuracy(gt["fields"], pred["fields"])}
    if task == "table":
        return {"teds": teds(gt["html"], pred["html"]), "s_teds": teds(gt["html"], pred["html"], structure_only=True)}
    if task == "layout":
        out = {}
        gb = [_bbox(w) for w in gt["words"]]
        pb = [_bbox(w) for w in pred["words"]]
        for level, gsets, psets in (("word", [[i] for i in range(len(gb))], [[i] for i in range(len(pb))]),
                                    ("line", gt["lines"], pred["lines"]),
                                    ("paragraph", gt["paragraphs"], pred["paragraphs"])):
            gg = [[r for r in grp if r is not None] for grp in layout_groups(gb, gsets)]
            pg = [[r for r in grp if r is not None] for grp in layout_groups(pb, psets)]
            out[f"pq_{level}"] = panoptic_quality(gg, pg, level).pq
        return out
    raise ConfigError(f"unknown task {task!r}")


HEADLINE = {"spotting": "pos_f1", "kie": "field_f1", "table": "teds", "layout": "pq_line"}


def evaluate_records(task: str, gt_records: Sequence[dict], pred_records: Sequence[dict]) -> dict:
    """Score predictions against ground truth, matched by ``id``; missing predictions score as empty."""
    preds = {r["id"]: r for r in pred_records}
    docs, per_spot, kie_counts = [], [], [0, 0, 0]
    missing = []
    for g in gt_records:
        if g.get("task", task) != task:
            raise ConfigError(f"record {g.get('id')!r} has task {g.get('task')!r}, expected {task!r}")
        gt = result_of(g)
        if g["id"] in preds:
            pred = result_of(preds[g["id"]])
        else:
            missing.append(g["id"])
            pred = {"spotting": [], "kie": {"fields": {}}, "table": {"html": "<table></table>"},
                    "layout": {"words": [], "lines": [], "paragraphs": []}}[task]
        s = score_document(task, gt, pred)
        row: dict = {"id": g["id"]}
        if task == "spotting":
            per_spot.append(s)
            for k, v in s.items():
                if v is not None:
                    row[f"{k}_f1"] = v.f1
        elif task == "kie":
            f = s["field"]
            kie_counts[0] += f.tp
            kie_counts[1] += f.n_pred
            kie_counts[2] += f.n_gt
            row.update(field_f1=f.f1, ted_accuracy=s["ted_accuracy"])
        else:
            row.update(s)
        docs.append(row)
    agg: dict = {}
    if task == "spotting":
        for k, v in aggregate(per_spot).items():
            if v is not None:
                agg.update({f"{k}_precision": v.precision, f"{k}_recall": v.recall, f"{k}_f1": v.f1})
    elif task == "kie":
        from .metrics import prf

        f = prf(*kie_counts)
        agg.update(field_precision=f.precision, field_recall=f.recall, field_f1=f.f1,
                   ted_accuracy=sum(d["ted_accuracy"] for d in docs) / max(1, len(docs)))
    else:
        for key in docs[0] if docs else []:
            if key != "id":
                agg[key] = sum(d[key] for d in docs) / len(docs)
    return {"task": task, "n_documents": len(docs), "missing_predictions": missing,
            "headline": HEADLINE[task], "aggregate": agg, "documents": docs}
