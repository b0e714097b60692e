import math

import pytest
from hypothesis import given, strategies as st

from spotkit.errors import GeometryError, QuantizationRangeError, VocabularyError
from spotkit.vocab import (
    DEFAULT_CHARSET,
    ImageExtent,
    PolygonGeom,
    QuantizedPoint,
    TokenVocabulary,
    build_vocabulary,
    default_vocabulary,
    dequantize,
    quantize,
    raster_key,
    task_tags,
)


def test_default_layout_sizes():
    v = build_vocabulary()
    assert len(DEFAULT_CHARSET) == 95
    assert v.size == 1000 + 95 + 4
    assert (v.char_offset, v.tag_offset, v.special_offset) == (1000, 1095, 1095)
    assert [v.bos, v.eos, v.pad, v.unk] == [1095, 1096, 1097, 1098]


def test_task_vocabulary_contains_all_tags(vocab):
    for t in task_tags():
        assert vocab.has_tag(t)
    assert vocab.size == 1000 + 95 + len(task_tags()) + 4


@pytest.mark.parametrize("x,w,n,expected", [
    (0.0, 100, 1000, 0),
    (100.0, 100, 1000, 999),  # right edge clamps into the last bin
    (49.95, 100, 1000, 499),
    (50.0, 100, 1000, 500),
    (255.9, 256, 1000, 999),
    (1.0, 3, 4, 1),
])
def test_quantize_examples(x, w, n, expected):
    assert quantize((x, 0), ImageExtent(w, 10), n).x_bin == expected


@pytest.mark.parametrize("p", [(-0.1, 0), (0, 10.5), (101, 3)])
def test_quantize_out_of_range(p):
    with pytest.raises(QuantizationRangeError):
        quantize(p, ImageExtent(100, 10))


@given(st.integers(1, 4000), st.integers(1, 4000), st.integers(2, 2000), st.floats(0, 1), st.floats(0, 1))
def test_quantize_dequantize_half_bin(w, h, n, fx, fy):
    ext = ImageExtent(w, h)
    q = quantize((fx * w, fy * h), ext, n)
    assert 0 <= q.x_bin < n and 0 <= q.y_bin < n
    x, y = dequantize(q, ext, n)
    # the bin center is within half a bin of the input; the clamped last bin may be up to one half bin over
    assert abs(x - fx * w) <= 0.5 * w / n + 1e-9
    assert abs(y - fy * h) <= 0.5 * h / n + 1e-9


@given(st.integers(2, 1500), st.data())
def test_bin_center_requantizes_to_same_bin(n, data):
    ext = ImageExtent(data.draw(st.integers(1, 3000)), data.draw(st.integers(1, 3000)))
    q = QuantizedPoint(data.draw(st.integers(0, n - 1)), data.draw(st.integers(0, n - 1)))
    assert quantize(dequantize(q, ext, n), ext, n) == q


def test_id_ranges_are_disjoint(vocab):
    kinds = [(vocab.is_coord(i), vocab.is_char(i), vocab.is_tag(i), vocab.is_special(i)) for i in range(vocab.size)]
    assert all(sum(k) == 1 for k in kinds)


def test_token_names_round_trip(vocab):
    for i in range(vocab.size):
        assert vocab.id_of(vocab.token_of(i)) == i
    assert vocab.token_of(vocab.char_id(" ")) == "'\\s'"
    assert vocab.token_of(7) == "7"


def test_render_parse_round_trip(vocab):
    ids = [vocab.bos, 12, 999, vocab.tag_id("<company>"), vocab.char_id("'"), vocab.char_id(" "), vocab.eos]
    assert vocab.parse(vocab.render(ids)) == ids


@given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=30))
def test_text_round_trip(text):
    v = default_vocabulary()
    ids, n_unk = v.encode_text(text)
    assert n_unk == 0
    assert v.decode_text(ids) == text


def test_unknown_characters_become_unk(vocab):
    ids, n_unk = vocab.encode_text("aé€b")
    assert n_unk == 2
    assert ids[1] == vocab.unk and ids[2] == vocab.unk


def test_manifest_round_trip(vocab, tmp_path):
    p = tmp_path / "v.txt"
    vocab.save(p)
    assert TokenVocabulary.load(p) == vocab


@pytest.mark.parametrize("charset,tags", [
    ("AA", ()),
    ("AB", ("<x>", "<x>")),
    ("AB", ("<S>",)),
    ("AB", ("'A'",)),
    ("AB", ("12",)),
])
def test_invalid_vocabularies(charset, tags):
    with pytest.raises(VocabularyError):
        build_vocabulary(charset, tags)


def test_coord_id_range(vocab):
    with pytest.raises(QuantizationRangeError):
        vocab.coord_id(1000)


def test_polygon_validation_and_centroid():
    with pytest.raises(GeometryError):
        PolygonGeom(((0, 0), (1, 0), (1, 1)))
    g = PolygonGeom.from_box(2, 4, 10, 8)
    assert g.centroid() == (6.0, 6.0)
    assert g.bounds() == (2, 4, 10, 8)
    with pytest.raises(GeometryError):
        g.check_inside(ImageExtent(9, 9))


def test_raster_key_orders_rows_first():
    pts = [QuantizedPoint(5, 1), QuantizedPoint(1, 2), QuantizedPoint(0, 1)]
    assert sorted(pts, key=raster_key) == [QuantizedPoint(0, 1), QuantizedPoint(5, 1), QuantizedPoint(1, 2)]


def test_extent_must_be_positive():
    with pytest.raises(GeometryError):
        ImageExtent(0, 5)
    assert math.isclose(dequantize(QuantizedPoint(0, 0), ImageExtent(10, 10), 10)[0], 0.5)
