"""Coordinate quantization, polygon primitives and the unified token vocabulary.

Token ids are laid out as ``[coords | chars | tags | specials]``:

* ``0 .. n_bins-1`` are coordinate bins,
* then one id per character of the charset,
* then one id per structural tag,
* then the four specials ``<S> </S> <PAD> <UNK>``.

Human-readable token names: coordinates are bare integers (``"500"``),
characters are single-quoted (``"'A'"``, with ``"'\\s'"`` for a space),
tags and specials are written verbatim (``"<tr>"``, ``"</S>"``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import GeometryError, QuantizationRangeError, VocabularyError

DEFAULT_N_BINS = 1000
# 95 printable ASCII characters, space first.
DEFAULT_CHARSET = tuple(chr(c) for c in range(32, 127))
SPECIALS = ("<S>", "</S>", "<PAD>", "<UNK>")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ImageExtent:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise GeometryError(f"image extent must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True, order=True)
class QuantizedPoint:
    # order=True sorts by x first; raster order is done explicitly with (y, x) keys
    x_bin: int
    y_bin: int

    def validate(self, n_bins: int) -> "QuantizedPoint":
        for axis, v in (("x_bin", self.x_bin), ("y_bin", self.y_bin)):
            if not 0 <= v < n_bins:
                raise QuantizationRangeError(axis, v, n_bins - 1)
        return self

    def as_tuple(self) -> tuple[int, int]:
        return (self.x_bin, self.y_bin)


class PolygonKind(str, enum.Enum):
    CURVED16 = "curved16"
    BOX4 = "box4"


_KIND_SIZE = {PolygonKind.CURVED16: 16, PolygonKind.BOX4: 4}


@dataclass(frozen=True)
class PolygonGeom:
    vertices: tuple[tuple[float, float], ...]
    kind: PolygonKind = PolygonKind.BOX4

    def __post_init__(self):
        kind = PolygonKind(self.kind)
        object.__setattr__(self, "kind", kind)
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) != _KIND_SIZE[kind]:
            raise GeometryError(f"{kind.value} polygon needs {_KIND_SIZE[kind]} vertices, got {len(verts)}")

    @classmethod
    def from_box(cls, x0: float, y0: float, x1: float, y1: float) -> "PolygonGeom":
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)), PolygonKind.BOX4)

    def centroid(self) -> tuple[float, float]:
        """Vertex mean; equals the box center for box4 and for boundary-resampled boxes."""
        n = len(self.vertices)
        return (sum(v[0] for v in self.vertices) / n, sum(v[1] for v in self.vertices) / n)

    def bounds(self) -> tuple[float, float, float, float]:
        xs = [v[0] for v in self.vertices]
        ys = [v[1] for v in self.vertices]
        return (min(xs), min(ys), max(xs), max(ys))

    def check_inside(self, extent: ImageExtent) -> None:
        for x, y in self.vertices:
            if not (0 <= x <= extent.width and 0 <= y <= extent.height):
                raise GeometryError(f"vertex ({x}, {y}) outside {extent.width}x{extent.height}")


def quantize(p: Sequence[float], extent: ImageExtent, n_bins: int = DEFAULT_N_BINS) -> QuantizedPoint:
    """Map a pixel coordinate to its bin: ``min(floor(x / width * n_bins), n_bins - 1)``."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    x, y = float(p[0]), float(p[1])
    if not 0 <= x <= extent.width:
        raise QuantizationRangeError("x", x, extent.width)
    if not 0 <= y <= extent.height:
        raise QuantizationRangeError("y", y, extent.height)
    bx = min(math.floor(x / extent.width * n_bins), n_bins - 1)
    by = min(math.floor(y / extent.height * n_bins), n_bins - 1)
    return QuantizedPoint(bx, by)


def dequantize(q: QuantizedPoint, extent: ImageExtent, n_bins: int = DEFAULT_N_BINS) -> tuple[float, float]:
    """Return the pixel center of bin ``q``."""
    q.validate(n_bins)
    return ((q.x_bin + 0.5) / n_bins * extent.width, (q.y_bin + 0.5) / n_bins * extent.height)


class TokenCategory(enum.IntEnum):
    STRUCTURED = 0
    DETECTION = 1
    RECOGNITION = 2


def _char_name(ch: str) -> str:
    return "'\\s'" if ch == " " else f"'{ch}'"


def _parse_char_name(name: str) -> str | None:
    if name == "'\\s'":
        return " "
    if len(name) == 3 and name[0] == "'" and name[2] == "'":
        return name[1]
    return None


@dataclass(frozen=True)
class TokenVocabulary:
    n_bins: int = DEFAULT_N_BINS
    charset: tuple[str, ...] = DEFAULT_CHARSET
    tags: tuple[str, ...] = ()
    _char_ids: dict = field(default=None, init=False, repr=False, compare=False)
    _tag_ids: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "charset", tuple(self.charset))
        object.__setattr__(self, "tags", tuple(self.tags))
        if self.n_bins < 2:
            raise VocabularyError("n_bins must be >= 2")
        seen = set()
        for ch in self.charset:
            if len(ch) != 1:
                raise VocabularyError(f"charset entry {ch!r} is not a single character")
            if ch in seen:
                raise VocabularyError(f"duplicate character {ch!r}")
            seen.add(ch)
        names = {_char_name(c) for c in self.charset}
        seen_tags = set()
        for t in self.tags:
            if t in seen_tags:
                raise VocabularyError(f"duplicate tag {t!r}")
            if t in names or t in SPECIALS:
                raise VocabularyError(f"tag {t!r} collides with another token")
            if t.isdigit():
                raise VocabularyError(f"tag {t!r} would read as a coordinate")
            seen_tags.add(t)
        object.__setattr__(self, "_char_ids", {c: self.n_bins + i for i, c in enumerate(self.charset)})
        object.__setattr__(self, "_tag_ids", {t: self.tag_offset + i for i, t in enumerate(self.tags)})

    # id layout
    @property
    def char_offset(self) -> int:
        return self.n_bins

    @property
    def tag_offset(self) -> int:
        return self.n_bins + len(self.charset)

    @property
    def special_offset(self) -> int:
        return self.tag_offset + len(self.tags)

    @property
    def size(self) -> int:
        return self.special_offset + len(SPECIALS)

    def __len__(self) -> int:
        return self.size

    @property
    def bos(self) -> int:
        return self.special_offset

    @property
    def eos(self) -> int:
        return self.special_offset + 1

    @property
    def pad(self) -> int:
        return self.special_offset + 2

    @property
    def unk(self) -> int:
        return self.special_offset + 3

    def coord_id(self, v: int) -> int:
        if not 0 <= v < self.n_bins:
            raise QuantizationRangeError("coord", v, self.n_bins - 1)
        return int(v)

    def char_id(self, ch: str) -> int:
        return self._char_ids.get(ch, self.unk)

    def tag_id(self, tag: str) -> int:
        try:
            return self._tag_ids[tag]
        except KeyError:
            raise VocabularyError(f"unknown tag {tag!r}") from None

    def has_tag(self, tag: str) -> bool:
        return tag in self._tag_ids

    def is_coord(self, i: int) -> bool:
        return 0 <= i < self.n_bins

    def is_char(self, i: int) -> bool:
        return self.char_offset <= i < self.tag_offset

    def is_tag(self, i: int) -> bool:
        return self.tag_offset <= i < self.special_offset

    def is_special(self, i: int) -> bool:
        return self.special_offset <= i < self.size

    def char_of(self, i: int) -> str:
        return self.charset[i - self.char_offset]

    def tag_of(self, i: int) -> str:
        return self.tags[i - self.tag_offset]

    def token_of(self, i: int) -> str:
        i = int(i)
        if self.is_coord(i):
            return str(i)
        if self.is_char(i):
            return _char_name(self.char_of(i))
        if self.is_tag(i):
            return self.tag_of(i)
        if self.is_special(i):
            return SPECIALS[i - self.special_offset]
        raise VocabularyError(f"id {i} outside vocabulary of size {self.size}")

    def id_of(self, name: str) -> int:
        if name.isdigit():
            return self.coord_id(int(name))
        ch = _parse_char_name(name)
        if ch is not None:
            if ch not in self._char_ids:
                raise VocabularyError(f"character {ch!r} not in charset")
            return self._char_ids[ch]
        if name in self._tag_ids:
            return self._tag_ids[name]
        if name in SPECIALS:
            return self.special_offset + SPECIALS.index(name)
        raise VocabularyError(f"unknown token {name!r}")

    def encode_text(self, text: str) -> tuple[list[int], int]:
        """Char-level tokenization; returns ids and the number of characters mapped to ``<UNK>``."""
        ids = [self.char_id(c) for c in text]
        return ids, sum(1 for i in ids if i == self.unk)

    def decode_text(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if self.is_char(i):
                out.append(self.char_of(i))
            elif i == self.unk:
                out.append("�")
        return "".join(out)

    def render(self, ids: Iterable[int]) -> str:
        return " ".join(self.token_of(i) for i in ids)

    def parse(self, text: str) -> list[int]:
        return [self.id_of(t) for t in text.split()]

    # manifest
    def to_manifest(self) -> str:
        lines = [f"spotkit-vocab {MANIFEST_VERSION}", f"n_bins {self.n_bins}", f"chars {len(self.charset)}"]
        lines += [_char_name(c) for c in self.charset]
        lines.append(f"tags {len(self.tags)}")
        lines += list(self.tags)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "TokenVocabulary":
        lines = text.splitlines()
        magic, version = lines[0].split()
        if magic != "spotkit-vocab" or int(version) != MANIFEST_VERSION:
            raise VocabularyError(f"unsupported manifest header {lines[0]!r}")
        n_bins = int(lines[1].split()[1])
        n_chars = int(lines[2].split()[1])
        chars = [_parse_char_name(x) for x in lines[3:3 + n_chars]]
        pos = 3 + n_chars
        n_tags = int(lines[pos].split()[1])
        tags = lines[pos + 1:pos + 1 + n_tags]
        return cls(n_bins=n_bins, charset=tuple(chars), tags=tuple(tags))

    def save(self, path) -> None:
        Path(path).write_text(self.to_manifest(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TokenVocabulary":
        return cls.from_manifest(Path(path).read_text(encoding="utf-8"))


def build_vocabulary(charset: Iterable[str] = DEFAULT_CHARSET, structural_tags: Iterable[str] = (),
                     n_bins: int = DEFAULT_N_BINS) -> TokenVocabulary:
    return TokenVocabulary(n_bins=n_bins, charset=tuple(charset), tags=tuple(structural_tags))


DEFAULT_ENTITIES = ("company", "date", "address", "total")


def task_tags(entities: Sequence[str] = DEFAULT_ENTITIES, max_span: int = 20) -> tuple[str, ...]:
    """Structural tag inventory covering all four tasks."""
    tags = ["<tr>", "</tr>", "<td></td>", "<td>[]</td>", "<td", ">", "</td>"]
    tags += [f'rowspan="{n}"' for n in range(2, max_span + 1)]
    tags += [f'colspan="{n}"' for n in range(2, max_span + 1)]
    tags += ["<line>", "<paragraph>"]
    for e in entities:
        tags += [f"<{e}>", f"</{e}>"]
    return tuple(tags)


def default_vocabulary(n_bins: int = DEFAULT_N_BINS, entities: Sequence[str] = DEFAULT_ENTITIES,
                       max_span: int = 20, charset: Iterable[str] = DEFAULT_CHARSET) -> TokenVocabulary:
    return build_vocabulary(charset, task_tags(entities, max_span), n_bins)


def polygon_to_bins(poly: PolygonGeom, extent: ImageExtent, n_bins: int) -> list[QuantizedPoint]:
    return [quantize(v, extent, n_bins) for v in poly.vertices]


def raster_key(q: QuantizedPoint) -> tuple[int, int]:
    return (q.y_bin, q.x_bin)

