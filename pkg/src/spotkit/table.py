"""Table HTML <-> merged structural token streams with inserted cell center points.

Cell tokens:

* empty, non-spanning          ``<td></td>``
* non-empty, non-spanning      ``<td>[]</td> x y``
* spanning                     ``<td rowspan="r" colspan="c" > [x y] </td>``

where ``rowspan``/``colspan`` tokens appear only when the span exceeds one and
``x y`` appear only for cells with text.  Rows are wrapped in ``<tr> ... </tr>``.
"""

from __future__ import annotations

import html
from dataclasses import dataclass, field, replace
from html.parser import HTMLParser
from typing import Optional, Sequence

from .codec import PolyContentSequence, StructuredPointsSequence
from .errors import AlignmentError, TableStructureError
from .vocab import ImageExtent, QuantizedPoint, TokenVocabulary, quantize

TableTokenStream = StructuredPointsSequence

TD_EMPTY = "<td></td>"
TD_FILLED = "<td>[]</td>"
TD_OPEN = "<td"
TD_GT = ">"
TD_CLOSE = "</td>"


@dataclass(frozen=True)
class TableCell:
    row: int
    col: int
    rowspan: int = 1
    colspan: int = 1
    content: str = ""
    content_center: Optional[tuple[float, float]] = None
    center_bin: Optional[QuantizedPoint] = None

    @property
    def spanning(self) -> bool:
        return self.rowspan > 1 or self.colspan > 1

    @property
    def has_text(self) -> bool:
        return bool(self.content) or self.center_bin is not None


@dataclass
class TableDocument:
    n_rows: int
    n_cols: int
    cells: list[TableCell] = field(default_factory=list)

    def ordered_cells(self) -> list[TableCell]:
        return sorted(self.cells, key=lambda c: (c.row, c.col))

    def structure(self) -> list[tuple[int, int, int, int, bool]]:
        """Logical structure: (row, col, rowspan, colspan, has_text) in stream order."""
        return [(c.row, c.col, c.rowspan, c.colspan, c.has_text) for c in self.ordered_cells()]

    def contents(self) -> list[str]:
        return [c.content for c in self.ordered_cells() if c.has_text]

    def to_json(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "cells": [
                {"row": c.row, "col": c.col, "rowspan": c.rowspan, "colspan": c.colspan, "content": c.content,
                 "content_center": list(c.content_center) if c.content_center is not None else None}
                for c in self.ordered_cells()
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TableDocument":
        cells = [TableCell(c["row"], c["col"], c.get("rowspan", 1), c.get("colspan", 1), c.get("content", ""),
                           tuple(c["content_center"]) if c.get("content_center") is not None else None)
                 for c in d["cells"]]
        return cls(d["n_rows"], d["n_cols"], cells)


def occupancy(doc: TableDocument) -> list[list[Optional[int]]]:
    """Grid of cell indices; raises on overlap, out-of-grid spans or holes."""
    grid: list[list[Optional[int]]] = [[None] * doc.n_cols for _ in range(doc.n_rows)]
    for k, c in enumerate(doc.cells):
        if c.rowspan < 1 or c.colspan < 1:
            raise TableStructureError(f"cell ({c.row},{c.col}) has non-positive span")
        if c.row < 0 or c.col < 0 or c.row + c.rowspan > doc.n_rows or c.col + c.colspan > doc.n_cols:
            raise TableStructureError(f"cell ({c.row},{c.col}) span exceeds {doc.n_rows}x{doc.n_cols} grid")
        for r in range(c.row, c.row + c.rowspan):
            for q in range(c.col, c.col + c.colspan):
                if grid[r][q] is not None:
                    other = doc.cells[grid[r][q]]
                    raise TableStructureError(
                        f"cell ({c.row},{c.col}) overlaps cell ({other.row},{other.col}) at ({r},{q})")
                grid[r][q] = k
    for r, row in enumerate(grid):
        for q, v in enumerate(row):
            if v is None:
                raise TableStructureError(f"grid position ({r},{q}) is not covered by any cell")
    return grid


def _cell_bin(c: TableCell, extent: Optional[ImageExtent], n_bins: int) -> QuantizedPoint:
    if c.center_bin is not None:
        return c.center_bin
    if c.content_center is None or extent is None:
        raise TableStructureError(f"non-empty cell ({c.row},{c.col}) has no content center")
    return quantize(c.content_center, extent, n_bins)


def encode_table_structure(doc: TableDocument, extent: Optional[ImageExtent], vocab: TokenVocabulary, *,
                           prompt: Sequence[int] = ()) -> TableTokenStream:
    occupancy(doc)
    toks = [vocab.bos, *prompt]
    by_row: dict[int, list[TableCell]] = {}
    for c in doc.ordered_cells():
        by_row.setdefault(c.row, []).append(c)
    for r in range(doc.n_rows):
        toks.append(vocab.tag_id("<tr>"))
        for c in by_row.get(r, []):
            if not c.spanning:
                if c.has_text:
                    q = _cell_bin(c, extent, vocab.n_bins)
                    toks += [vocab.tag_id(TD_FILLED), q.x_bin, q.y_bin]
                else:
                    toks.append(vocab.tag_id(TD_EMPTY))
                continue
            toks.append(vocab.tag_id(TD_OPEN))
            if c.rowspan > 1:
                toks.append(vocab.tag_id(f'rowspan="{c.rowspan}"'))
            if c.colspan > 1:
                toks.append(vocab.tag_id(f'colspan="{c.colspan}"'))
            toks.append(vocab.tag_id(TD_GT))
            if c.has_text:
                q = _cell_bin(c, extent, vocab.n_bins)
                toks += [q.x_bin, q.y_bin]
            toks.append(vocab.tag_id(TD_CLOSE))
        toks.append(vocab.tag_id("</tr>"))
    toks.append(vocab.eos)
    return StructuredPointsSequence(tuple(toks), "table", len(prompt))


def naive_token_length(doc: TableDocument) -> int:
    """Stream length if every cell used separate ``<td>``/``</td>`` tokens (plus attrs and points)."""
    n = 2 + 2 * doc.n_rows
    for c in doc.cells:
        n += 2 + (c.rowspan > 1) + (c.colspan > 1) + (1 if c.spanning else 0) + (2 if c.has_text else 0)
    return n


@dataclass
class _ParsedCell:
    rowspan: int = 1
    colspan: int = 1
    center: Optional[QuantizedPoint] = None
    filled: bool = False


def _parse_rows(tokens: Sequence[int], vocab: TokenVocabulary, n_prompt: int):
    diags: list[str] = []
    rows: list[list[_ParsedCell]] = []
    cur: Optional[list[_ParsedCell]] = None
    pos = 0
    if tokens and tokens[0] == vocab.bos:
        pos = 1
    else:
        diags.append("missing <S> at token 0")
    pos += n_prompt
    closed = False

    def tag(i):
        return vocab.tag_of(tokens[i]) if i < len(tokens) and vocab.is_tag(tokens[i]) else None

    def read_point(i):
        if i + 1 < len(tokens) and vocab.is_coord(tokens[i]) and vocab.is_coord(tokens[i + 1]):
            return QuantizedPoint(tokens[i], tokens[i + 1]), i + 2
        return None, i

    def ensure_row(i):
        nonlocal cur
        if cur is None:
            diags.append(f"cell outside <tr> at token {i}")
            cur = []
        return cur

    while pos < len(tokens):
        t = tokens[pos]
        name = tag(pos)
        if t == vocab.eos:
            closed = True
            break
        if name == "<tr>":
            if cur is not None:
                diags.append(f"missing </tr> before token {pos}")
                rows.append(cur)
            cur = []
            pos += 1
        elif name == "</tr>":
            if cur is None:
                diags.append(f"</tr> without <tr> at token {pos}")
            else:
                rows.append(cur)
            cur = None
            pos += 1
        elif name == TD_EMPTY:
            ensure_row(pos).append(_ParsedCell())
            pos += 1
        elif name == TD_FILLED:
            row = ensure_row(pos)
            pt, nxt = read_point(pos + 1)
            if pt is None:
                diags.append(f"non-empty cell without center at token {pos}")
            row.append(_ParsedCell(center=pt, filled=True))
            pos = nxt
        elif name == TD_OPEN:
            row = ensure_row(pos)
            cell = _ParsedCell()
            start = pos
            pos += 1
            while pos < len(tokens) and tag(pos) not in (TD_GT, None) and tag(pos) != TD_CLOSE:
                attr = tag(pos)
                key, _, val = attr.partition("=")
                if key in ("rowspan", "colspan") and val.strip('"').isdigit():
                    setattr(cell, key, int(val.strip('"')))
                else:
                    diags.append(f"unexpected {attr} inside spanning cell at token {pos}")
                    break
                pos += 1
            if tag(pos) == TD_GT:
                pos += 1
            else:
                diags.append(f"spanning cell at token {start} missing '>'")
            pt, pos = read_point(pos)
            if pt is not None:
                cell.center, cell.filled = pt, True
            if tag(pos) == TD_CLOSE:
                pos += 1
            else:
                diags.append(f"spanning cell at token {start} missing </td>")
            row.append(cell)
        else:
            diags.append(f"unexpected token {vocab.token_of(t)} at token {pos}")
            pos += 1
    if cur is not None:
        diags.append(f"missing </tr> at end of row {len(rows)}")
        rows.append(cur)
    if not closed:
        diags.append("missing </S>")
    return rows, diags


def decode_table_structure(stream: TableTokenStream | Sequence[int], vocab: TokenVocabulary,
                           n_prompt: Optional[int] = None) -> tuple[TableDocument, list[str]]:
    """Recover grid, spans and center bins. Cell contents are left blank."""
    if isinstance(stream, StructuredPointsSequence):
        tokens = list(stream.tokens)
        n_prompt = stream.n_prompt if n_prompt is None else n_prompt
    else:
        tokens = [int(t) for t in stream]
    rows, diags = _parse_rows(tokens, vocab, n_prompt or 0)
    n_rows = len(rows)
    taken: dict[tuple[int, int], bool] = {}
    cells: list[TableCell] = []
    for r, row in enumerate(rows):
        col = 0
        for pc in row:
            while taken.get((r, col)):
                col += 1
            rs = pc.rowspan
            if r + rs > n_rows:
                diags.append(f"rowspan of cell ({r},{col}) exceeds table height")
                rs = n_rows - r
            for dr in range(rs):
                for dc in range(pc.colspan):
                    taken[(r + dr, col + dc)] = True
            cells.append(TableCell(r, col, rs, pc.colspan, "", None, pc.center if pc.filled else None))
            col += pc.colspan
    n_cols = max((q + 1 for (_, q) in taken), default=0)
    for r in range(n_rows):
        width = sum(1 for q in range(n_cols) if taken.get((r, q)))
        if width != n_cols:
            diags.append(f"row {r} covers {width} columns after span expansion, expected {n_cols}")
    return TableDocument(n_rows, n_cols, cells), diags


def build_cell_stage2_gt(doc: TableDocument, vocab: TokenVocabulary,
                         extent: Optional[ImageExtent] = None) -> list[PolyContentSequence]:
    """One prompt+content sequence per non-empty cell, in stream order. Cells carry no polygon."""
    out = []
    for c in doc.ordered_cells():
        if not c.has_text:
            continue
        content, n_unk = vocab.encode_text(c.content)
        out.append(PolyContentSequence(_cell_bin(c, extent, vocab.n_bins), (), tuple(content) + (vocab.eos,), n_unk))
    return out


def _td_open(rowspan: int, colspan: int) -> str:
    attrs = ""
    if rowspan > 1:
        attrs += f' rowspan="{rowspan}"'
    if colspan > 1:
        attrs += f' colspan="{colspan}"'
    return f"<td{attrs}>"


def reconstruct_html(stream: TableTokenStream | Sequence[int], cell_contents: Sequence[str],
                     vocab: TokenVocabulary, n_prompt: Optional[int] = None) -> str:
    """Fuse structure tokens with recognized cell texts into canonical HTML."""
    doc, _ = decode_table_structure(stream, vocab, n_prompt)
    n_text = sum(c.has_text for c in doc.cells)
    if n_text != len(cell_contents):
        raise AlignmentError(f"stream has {n_text} non-empty cells but {len(cell_contents)} contents were given")
    it = iter(cell_contents)
    filled = [replace(c, content=next(it)) if c.has_text else c for c in doc.ordered_cells()]
    return canonical_html(TableDocument(doc.n_rows, doc.n_cols, filled))


def canonical_html(doc: TableDocument) -> str:
    """Lowercase tags, no whitespace between tags, rowspan before colspan."""
    parts = ["<table>"]
    by_row: dict[int, list[TableCell]] = {}
    for c in doc.ordered_cells():
        by_row.setdefault(c.row, []).append(c)
    for r in range(doc.n_rows):
        parts.append("<tr>")
        for c in by_row.get(r, []):
            parts.append(_td_open(c.rowspan, c.colspan) + html.escape(c.content, quote=False) + "</td>")
        parts.append("</tr>")
    parts.append("</table>")
    return "".join(parts)


class _TableHTMLParser(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.rows: list[list[list]] = []
        self.in_cell: Optional[list] = None
        self.seen_table = False

    def handle_starttag(self, tag, attrs):
        if tag == "table":
            self.seen_table = True
        elif tag == "tr":
            self.rows.append([])
        elif tag in ("td", "th"):
            a = dict(attrs)
            if not self.rows:
                self.rows.append([])
            self.in_cell = [int(a.get("rowspan") or 1), int(a.get("colspan") or 1), ""]
            self.rows[-1].append(self.in_cell)

    def handle_endtag(self, tag):
        if tag in ("td", "th"):
            self.in_cell = None

    def handle_data(self, data):
        if self.in_cell is not None:
            self.in_cell[2] += data


def parse_html_table(text: str) -> TableDocument:
    """Parse ``<table>`` HTML into a TableDocument (thead/tbody wrappers are flattened)."""
    p = _TableHTMLParser()
    p.feed(text)
    p.close()
    if not p.seen_table:
        raise TableStructureError("no <table> element found")
    taken: set = set()
    cells = []
    n_rows = len(p.rows)
    for r, row in enumerate(p.rows):
        col = 0
        for rs, cs, content in row:
            while (r, col) in taken:
                col += 1
            rs = min(rs, n_rows - r)
            for dr in range(rs):
                for dc in range(cs):
                    taken.add((r + dr, col + dc))
            cells.append(TableCell(r, col, rs, cs, content))
            col += cs
    n_cols = max((q + 1 for _, q in taken), default=0)
    return TableDocument(n_rows, n_cols, cells)
