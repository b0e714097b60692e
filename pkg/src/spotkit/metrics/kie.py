from __future__ import annotations

from collections import Counter
from dataclasses import dataclass


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    n_pred: int = 0
    n_gt: int = 0

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "n_pred": self.n_pred, "n_gt": self.n_gt}


def prf(tp: int, n_pred: int, n_gt: int) -> PRF:
    """Precision/recall/F1 from counts. Empty-vs-empty scores 1.0."""
    if n_pred == 0 and n_gt == 0:
        return PRF(1.0, 1.0, 1.0, 0, 0, 0)
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p > 0 and r > 0 else 0.0
    return PRF(p, r, f, tp, n_pred, n_gt)


def as_field_multiset(fields) -> Counter:
    """Accept ``{entity: value | [values]}`` or an iterable of ``(entity, value)`` pairs."""
    if isinstance(fields, dict):
        pairs = []
        for ent, vals in fields.items():
            if isinstance(vals, str):
                vals = [vals]
            pairs += [(ent, v) for v in vals]
        return Counter(pairs)
    return Counter(tuple(f) for f in fields)


def field_f1(gt_fields, pred_fields) -> PRF:
    """Field-level F1: a predicted (entity, value) counts only on an exact match, each GT used once."""
    gt, pred = as_field_multiset(gt_fields), as_field_multiset(pred_fields)
    tp = sum((gt & pred).values())
    return prf(tp, sum(pred.values()), sum(gt.values()))
