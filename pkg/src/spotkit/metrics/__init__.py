from .kie import PRF, field_f1, prf
from .panoptic import PQResult, layout_groups, panoptic_quality
from .spotting import MatchConfig, aggregate, iou, region_contains, spotting_e2e
from .teds import TreeNode, html_to_tree, ted_accuracy, teds, teds_trees, tree_edit_distance

__all__ = [
    "PRF", "field_f1", "prf", "PQResult", "layout_groups", "panoptic_quality", "MatchConfig", "aggregate", "iou",
    "region_contains", "spotting_e2e", "TreeNode", "html_to_tree", "ted_accuracy", "teds", "teds_trees",
    "tree_edit_distance",
]
