"""End-to-end text spotting metrics: Trans, Pos, and IoU-based detection / e2e."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from shapely.geometry import Point, Polygon, box

from .kie import PRF, prf


@dataclass(frozen=True)
class MatchConfig:
    iou_threshold: float = 0.5
    case_sensitive: bool = True
    assignment: str = "greedy"  # or "optimal"

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if self.assignment not in ("greedy", "optimal"):
            raise ValueError(f"unknown assignment {self.assignment!r}")


def _is_box(region) -> bool:
    return len(region) == 4 and all(isinstance(v, (int, float, np.integer, np.floating)) for v in region)


def to_shape(region):
    if _is_box(region):
        return box(*region)
    return Polygon([tuple(p) for p in region])


def region_contains(region, pt) -> bool:
    """Boundary-inclusive point containment for a box ``(x0, y0, x1, y1)`` or a polygon."""
    if _is_box(region):
        x0, y0, x1, y1 = region
        return x0 <= pt[0] <= x1 and y0 <= pt[1] <= y1
    return to_shape(region).buffer(0).covers(Point(pt))


def iou(a, b) -> float:
    sa, sb = to_shape(a).buffer(0), to_shape(b).buffer(0)
    inter = sa.intersection(sb).area
    union = sa.area + sb.area - inter
    return inter / union if union > 0 else 0.0


def _split_pred(pred):
    """A prediction is (geom, text[, score]); geom is a point (x, y) or a polygon/box."""
    geom, text = pred[0], pred[1]
    score = pred[2] if len(pred) > 2 else None
    if len(geom) == 2 and not hasattr(geom[0], "__len__"):
        return (float(geom[0]), float(geom[1])), None, text, score
    if _is_box(geom):
        x0, y0, x1, y1 = geom
        return ((x0 + x1) / 2, (y0 + y1) / 2), geom, text, score
    pts = [tuple(p) for p in geom]
    return (sum(p[0] for p in pts) / len(pts), sum(p[1] for p in pts) / len(pts)), pts, text, score


def _match(n_pred: int, n_gt: int, ok, assignment: str) -> int:
    if assignment == "optimal" and n_pred and n_gt:
        from scipy.optimize import linear_sum_assignment

        m = np.array([[1.0 if ok(i, j) else 0.0 for j in range(n_gt)] for i in range(n_pred)])
        r, c = linear_sum_assignment(-m)
        return int(m[r, c].sum())
    used = [False] * n_gt
    tp = 0
    for i in range(n_pred):
        for j in range(n_gt):
            if not used[j] and ok(i, j):
                used[j] = True
                tp += 1
                break
    return tp


def spotting_e2e(gt: Sequence, pred: Sequence, cfg: MatchConfig = MatchConfig()) -> dict:
    """Score one image.

    ``gt`` is a list of ``(region, text)``; ``pred`` a list of ``(point | polygon, text[, score])``.
    Predictions are visited by descending score when scores are given, else in listed order;
    GT candidates in listed order.
    """
    norm = (lambda s: s) if cfg.case_sensitive else str.lower
    preds = [_split_pred(p) for p in pred]
    if any(p[3] is not None for p in preds):
        preds = sorted(preds, key=lambda p: -(p[3] if p[3] is not None else float("-inf")))
    gts = [(g[0], norm(g[1])) for g in gt]
    ptexts = [norm(p[2]) for p in preds]

    trans_tp = sum((Counter(t for _, t in gts) & Counter(ptexts)).values())
    out = {"trans": prf(trans_tp, len(preds), len(gts))}
    pos_tp = _match(len(preds), len(gts),
                    lambda i, j: ptexts[i] == gts[j][1] and region_contains(gts[j][0], preds[i][0]), cfg.assignment)
    out["pos"] = prf(pos_tp, len(preds), len(gts))

    poly_idx = [i for i, p in enumerate(preds) if p[1] is not None]
    if poly_idx:
        ious = np.array([[iou(preds[i][1], g[0]) for g in gts] for i in poly_idx]).reshape(len(poly_idx), len(gts))
        thr = cfg.iou_threshold
        det_tp = _match(len(poly_idx), len(gts), lambda a, j: ious[a, j] >= thr, cfg.assignment)
        e2e_tp = _match(len(poly_idx), len(gts),
                        lambda a, j: ious[a, j] >= thr and ptexts[poly_idx[a]] == gts[j][1], cfg.assignment)
        out["det"] = prf(det_tp, len(poly_idx), len(gts))
        out["e2e"] = prf(e2e_tp, len(poly_idx), len(gts))
    else:
        out["det"] = None
        out["e2e"] = None
    return out


def aggregate(per_image: Sequence[dict]) -> dict:
    """Micro-average counts across images."""
    out: dict[str, Optional[PRF]] = {}
    for key in ("trans", "pos", "det", "e2e"):
        items = [d[key] for d in per_image if d.get(key) is not None]
        if not items:
            out[key] = None
            continue
        out[key] = prf(sum(x.tp for x in items), sum(x.n_pred for x in items), sum(x.n_gt for x in items))
    return out
