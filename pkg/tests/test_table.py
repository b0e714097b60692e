import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spotkit import synth, table
from spotkit.errors import AlignmentError, TableStructureError
from spotkit.metrics import teds
from spotkit.prompting import PromptRng
from spotkit.table import TableCell, TableDocument
from spotkit.vocab import ImageExtent, QuantizedPoint

EXT = ImageExtent(100, 100)


def _doc():
    # row 0: a 2x2 spanning cell "A", then "B"; row 1: "C"; row 2: empty, a colspan-2 cell "D"
    return TableDocument(3, 3, [
        TableCell(0, 0, 2, 2, "A", (10, 10)), TableCell(0, 2, 1, 1, "B", (80, 10)),
        TableCell(1, 2, 1, 1, "C", (80, 40)), TableCell(2, 0, 1, 1, ""), TableCell(2, 1, 1, 2, "D", (60, 80)),
    ])


def test_merged_and_spanning_token_forms(vocab):
    seq = table.encode_table_structure(_doc(), EXT, vocab)
    assert vocab.render(seq.tokens) == (
        '<S> <tr> <td rowspan="2" colspan="2" > 100 100 </td> <td>[]</td> 800 100 </tr> '
        '<tr> <td>[]</td> 800 400 </tr> '
        '<tr> <td></td> <td colspan="2" > 600 800 </td> </tr> </S>')


def test_spanning_cell_is_four_structure_tokens(vocab):
    doc = TableDocument(1, 2, [TableCell(0, 0, 1, 2, "", None)])
    toks = vocab.render(table.encode_table_structure(doc, EXT, vocab).tokens).split()
    assert toks[2:6] == ["<td", 'colspan="2"', ">", "</td>"]


def test_stream_is_shorter_than_naive(vocab):
    doc = _doc()
    assert len(table.encode_table_structure(doc, EXT, vocab).tokens) < table.naive_token_length(doc)


def test_decode_recovers_structure(vocab):
    doc = _doc()
    back, diags = table.decode_table_structure(table.encode_table_structure(doc, EXT, vocab), vocab)
    assert diags == []
    assert [s[:4] for s in back.structure()] == [s[:4] for s in doc.structure()]


def test_reconstruct_html_matches_canonical(vocab):
    doc = _doc()
    seq = table.encode_table_structure(doc, EXT, vocab)
    html = table.reconstruct_html(seq, doc.contents(), vocab)
    assert html == table.canonical_html(doc)
    assert html.startswith('<table><tr><td rowspan="2" colspan="2">A</td>')
    with pytest.raises(AlignmentError):
        table.reconstruct_html(seq, ["x"], vocab)


def test_cell_stage2_targets_have_no_polygon(vocab):
    gts = table.build_cell_stage2_gt(_doc(), vocab, EXT)
    assert [g.prompt_point for g in gts] == [QuantizedPoint(100, 100), QuantizedPoint(800, 100),
                                             QuantizedPoint(800, 400), QuantizedPoint(600, 800)]
    assert all(g.polygon_tokens == () for g in gts)
    assert vocab.decode_text(gts[0].content_tokens[:-1]) == "A"


@pytest.mark.parametrize("cells,msg", [
    ([TableCell(0, 0, 1, 2), TableCell(0, 1)], "overlaps"),
    ([TableCell(0, 0)], "not covered"),
    ([TableCell(0, 0, 1, 3)], "exceeds"),
])
def test_occupancy_errors(cells, msg):
    with pytest.raises(TableStructureError, match=msg):
        table.occupancy(TableDocument(1, 2, cells))


def test_decode_diagnostics_on_ragged_rows(vocab):
    t = vocab.tag_id
    ids = [vocab.bos, t("<tr>"), t("<td></td>"), t("<td></td>"), t("</tr>"), t("<tr>"), t("<td></td>"), t("</tr>"),
           t("<tr>"), t("<td></td>"), vocab.eos]
    _, diags = table.decode_table_structure(ids, vocab)
    assert any("row 1 covers 1 columns" in d for d in diags)
    assert any("missing </tr>" in d for d in diags)


def _expand_oracle(html_rows):
    """Independent span expansion: place each cell at the first free column of its row."""
    grid = {}
    placed = []
    for r, row in enumerate(html_rows):
        c = 0
        for rs, cs in row:
            while (r, c) in grid:
                c += 1
            for dr in range(rs):
                for dc in range(cs):
                    grid[(r + dr, c + dc)] = True
            placed.append((r, c, rs, cs))
            c += cs
    return sorted(placed)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_span_expansion_matches_oracle(vocab, seed):
    doc, scene = synth.gen_table(PromptRng(seed), synth.TableConfig())
    seq = table.encode_table_structure(doc, scene.extent, vocab)
    back, diags = table.decode_table_structure(seq, vocab)
    assert diags == []
    rows = [[(c.rowspan, c.colspan) for c in doc.ordered_cells() if c.row == r] for r in range(doc.n_rows)]
    assert sorted((c.row, c.col, c.rowspan, c.colspan) for c in back.cells) == _expand_oracle(rows)
    html = table.reconstruct_html(seq, doc.contents(), vocab)
    assert teds(table.canonical_html(doc), html) == 1.0


def test_parse_html_round_trip():
    doc = _doc()
    parsed = table.parse_html_table(table.canonical_html(doc))
    assert table.canonical_html(parsed) == table.canonical_html(doc)
    with pytest.raises(TableStructureError):
        table.parse_html_table("<div>no table</div>")


def test_html_escaping():
    doc = TableDocument(1, 1, [TableCell(0, 0, 1, 1, "a<b&c", (1, 1))])
    html = table.canonical_html(doc)
    assert "a&lt;b&amp;c" in html
    assert table.parse_html_table(html).cells[0].content == "a<b&c"


def test_json_round_trip():
    doc = _doc()
    assert TableDocument.from_json(doc.to_json()).structure() == doc.structure()
