"""Tree-edit-distance similarity for HTML tables (TEDS / S-TEDS) and KIE entity trees.

Distances use the Zhang-Shasha ordered tree edit distance with unit insert and
delete costs.  Table trees have one node per element; ``td`` nodes carry their
span attributes in the label and their text as ``content``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from html.parser import HTMLParser
from typing import Callable, Optional

from ..errors import SpotkitError


class HTMLInputError(SpotkitError, ValueError):
    pass


@dataclass
class TreeNode:
    label: str
    content: Optional[str] = None
    children: list["TreeNode"] = field(default_factory=list)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def postorder(self) -> list["TreeNode"]:
        out = []
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                out.append(node)
            else:
                stack.append((node, True))
                for c in reversed(node.children):
                    stack.append((c, False))
        return out


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_edit_distance(a: str, b: str) -> float:
    if a == b:
        return 0.0
    return levenshtein(a, b) / max(len(a), len(b))


def tree_edit_distance(a: TreeNode, b: TreeNode, rename: Callable[[TreeNode, TreeNode], float]) -> float:
    """Zhang-Shasha ordered tree edit distance with unit insert/delete costs."""
    A, B = a.postorder(), b.postorder()
    ia = {id(n): k for k, n in enumerate(A)}
    ib = {id(n): k for k, n in enumerate(B)}

    def leftmost(nodes, index):
        lm = [0] * len(nodes)
        for k, n in enumerate(nodes):
            lm[k] = lm[index[id(n.children[0])]] if n.children else k
        return lm

    la, lb = leftmost(A, ia), leftmost(B, ib)

    def keyroots(lm):
        seen = {}
        for k in range(len(lm)):
            seen[lm[k]] = k  # highest node for each leftmost leaf
        return sorted(seen.values())

    td = [[0.0] * len(B) for _ in range(len(A))]
    for i in keyroots(la):
        for j in keyroots(lb):
            li, lj = la[i], lb[j]
            m, n = i - li + 2, j - lj + 2
            fd = [[0.0] * n for _ in range(m)]
            for x in range(1, m):
                fd[x][0] = fd[x - 1][0] + 1
            for y in range(1, n):
                fd[0][y] = fd[0][y - 1] + 1
            for x in range(1, m):
                for y in range(1, n):
                    ii, jj = li + x - 1, lj + y - 1
                    if la[ii] == li and lb[jj] == lj:
                        fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1,
                                       fd[x - 1][y - 1] + rename(A[ii], B[jj]))
                        td[ii][jj] = fd[x][y]
                    else:
                        p, q = la[ii] - li, lb[jj] - lj
                        fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1, fd[p][q] + td[ii][jj])
    return td[-1][-1]


def table_rename_cost(structure_only: bool) -> Callable[[TreeNode, TreeNode], float]:
    def cost(x: TreeNode, y: TreeNode) -> float:
        if x.label != y.label:
            return 1.0
        if x.label.startswith("td") and not structure_only:
            return normalized_edit_distance(x.content or "", y.content or "")
        return 0.0
    return cost


def exact_rename_cost(x: TreeNode, y: TreeNode) -> float:
    return 0.0 if (x.label, x.content) == (y.label, y.content) else 1.0


def similarity(a: TreeNode, b: TreeNode, rename) -> float:
    return 1.0 - tree_edit_distance(a, b, rename) / max(a.size(), b.size())


class _TreeBuilder(HTMLParser):
    VOID = {"br", "img", "hr", "meta", "link", "input", "col"}

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.root: Optional[TreeNode] = None
        self.stack: list[TreeNode] = []

    def handle_starttag(self, tag, attrs):
        if tag in self.VOID:
            return
        if self.root is None and tag != "table":
            return
        label = tag
        if tag in ("td", "th"):
            a = dict(attrs)
            label = f'td rowspan={int(a.get("rowspan") or 1)} colspan={int(a.get("colspan") or 1)}'
        node = TreeNode(label, "" if tag in ("td", "th") else None)
        if self.root is None:
            self.root = node
        elif self.stack:
            self.stack[-1].children.append(node)
        else:
            return
        self.stack.append(node)

    def handle_endtag(self, tag):
        if not self.stack:
            return
        want = "td" if tag in ("td", "th") else tag
        for k in range(len(self.stack) - 1, -1, -1):
            if self.stack[k].label.split()[0] == want:
                del self.stack[k:]
                return

    def handle_data(self, data):
        for node in reversed(self.stack):
            if node.content is not None:
                node.content += data
                return


def html_to_tree(text: str) -> TreeNode:
    builder = _TreeBuilder()
    try:
        builder.feed(text)
        builder.close()
    except Exception as exc:  # html.parser is lenient; this only guards odd input types
        raise HTMLInputError(f"cannot parse HTML: {exc}") from exc
    if builder.root is None:
        raise HTMLInputError("no <table> element found")
    return builder.root


def teds_trees(gt: TreeNode, pred: TreeNode, structure_only: bool = False) -> float:
    return similarity(gt, pred, table_rename_cost(structure_only))


def teds(gt_html: str, pred_html: str, structure_only: bool = False) -> float:
    """TEDS score in [0, 1]; ``structure_only`` gives S-TEDS."""
    return teds_trees(html_to_tree(gt_html), html_to_tree(pred_html), structure_only)


def entity_tree(fields) -> TreeNode:
    """root -> one node per entity (sorted) -> one leaf per value in order."""
    if isinstance(fields, str):
        fields = json.loads(fields) if fields.strip() else {}
    root = TreeNode("root")
    for ent in sorted(fields):
        vals = fields[ent]
        if isinstance(vals, str):
            vals = [vals]
        node = TreeNode(ent)
        node.children = [TreeNode(str(v)) for v in vals]
        root.children.append(node)
    return root


def ted_accuracy(gt_struct, pred_struct) -> float:
    """1 - TED / max(|T_gt|, |T_pred|) over entity trees with exact-label substitution.

    Inputs are entity maps ``{entity: value | [values]}`` or their JSON strings.
    """
    return similarity(entity_tree(gt_struct), entity_tree(pred_struct), exact_rename_cost)
