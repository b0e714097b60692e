from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from shapely.ops import unary_union

from .spotting import to_shape


@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int
    iou_sum: float
    diagnostics: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"pq": self.pq, "sq": self.sq, "rq": self.rq, "tp": self.tp, "fp": self.fp, "fn": self.fn}


def _union(group):
    return unary_union([to_shape(r).buffer(0) for r in group])


def panoptic_quality(gt_groups: Sequence[Sequence], pred_groups: Sequence[Sequence], level: str = "") -> PQResult:
    """PQ over groups of regions (each group a list of boxes or polygons).

    A GT/prediction pair matches when IoU > 0.5, which makes matches unique.
    Zero-area groups are dropped and reported in ``diagnostics``.
    """
    diags = []
    tag = f"{level} " if level else ""

    def shapes(groups, side):
        out = []
        for k, g in enumerate(groups):
            s = _union(g) if len(g) else None
            if s is None or s.area <= 0:
                diags.append(f"{side} {tag}group {k} has zero area; excluded")
                continue
            out.append(s)
        return out

    gts, preds = shapes(gt_groups, "gt"), shapes(pred_groups, "pred")
    iou_sum, tp = 0.0, 0
    matched_pred = set()
    for g in gts:
        for k, p in enumerate(preds):
            if k in matched_pred:
                continue
            inter = g.intersection(p).area
            if inter <= 0:
                continue
            u = g.area + p.area - inter
            v = inter / u
            if v > 0.5:
                matched_pred.add(k)
                iou_sum += v
                tp += 1
                break
    fp, fn = len(preds) - tp, len(gts) - tp
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return PQResult(1.0, 1.0, 1.0, 0, 0, 0, 0.0, diags)
    sq = iou_sum / tp if tp else 0.0
    rq = tp / denom
    return PQResult(iou_sum / denom, sq, rq, tp, fp, fn, iou_sum, diags)


def layout_groups(boxes: Sequence, hierarchy_sets: Sequence) -> list[list]:
    """Turn index sets (lines or paragraphs) into lists of word regions."""
    return [[boxes[i] for i in sorted(s)] for s in hierarchy_sets]
