"""Spatial-window and prefix-window prompt samplers and their target filters.

Randomness comes from :class:`PromptRng`, a thin wrapper over numpy's Philox
counter-based generator.  Stream split rule: shard ``i`` of a run seeded with
``s`` uses ``PromptRng(s).spawn(i)``, the SeedSequence child with spawn key
``(i,)``, so shards never share counters regardless of how many draws each makes.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .vocab import QuantizedPoint, TokenVocabulary

FULL_PROB = 0.4
FIXED_PROB = 0.3  # cumulative threshold 0.7
GRID_NUM_XS = (3, 3, 1, 3, 2, 2, 2, 1)
GRID_NUM_YS = (3, 1, 3, 2, 3, 2, 1, 2)

# Ordered by ASCII code so that ('!', '~') spans the whole dictionary.
PREFIX_DICTIONARY = tuple(sorted(string.ascii_uppercase + string.ascii_lowercase + string.digits + string.punctuation))
_DICT_INDEX = {c: i for i, c in enumerate(PREFIX_DICTIONARY)}
FULL_PREFIX = ("!", "~")


class PromptRng:
    def __init__(self, seed: int | np.random.SeedSequence):
        self.seed_seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
        self.gen = np.random.Generator(np.random.Philox(self.seed_seq))

    def spawn(self, index: int) -> "PromptRng":
        ss = self.seed_seq
        return PromptRng(np.random.SeedSequence(ss.entropy, spawn_key=(*ss.spawn_key, index)))

    def uniform(self) -> float:
        return float(self.gen.random())

    def randint(self, lo: int, hi: int) -> int:
        """Inclusive on both ends, like ``random.randint``."""
        return int(self.gen.integers(lo, hi, endpoint=True))

    def choice_index(self, n: int) -> int:
        return int(self.gen.integers(0, n))


@dataclass(frozen=True)
class SpatialWindow:
    start_x: int
    start_y: int
    end_x: int
    end_y: int

    def as_list(self) -> list[int]:
        return [self.start_x, self.start_y, self.end_x, self.end_y]

    def contains(self, q: QuantizedPoint) -> bool:
        return self.start_x <= q.x_bin <= self.end_x and self.start_y <= q.y_bin <= self.end_y

    def tokens(self, vocab: TokenVocabulary) -> list[int]:
        return [vocab.coord_id(v) for v in self.as_list()]

    @classmethod
    def full(cls, n_bins: int) -> "SpatialWindow":
        return cls(0, 0, n_bins - 1, n_bins - 1)


@dataclass(frozen=True)
class PrefixWindow:
    first_char: str
    last_char: str

    def __post_init__(self):
        for c in (self.first_char, self.last_char):
            if c not in _DICT_INDEX:
                raise ValueError(f"{c!r} is not in the prompting dictionary")
        if _DICT_INDEX[self.first_char] > _DICT_INDEX[self.last_char]:
            raise ValueError(f"prefix window {self.first_char!r}..{self.last_char!r} is reversed")

    def contains(self, ch: str) -> bool:
        i = _DICT_INDEX.get(ch)
        return i is not None and _DICT_INDEX[self.first_char] <= i <= _DICT_INDEX[self.last_char]

    def tokens(self, vocab: TokenVocabulary) -> list[int]:
        return [vocab.char_id(self.first_char), vocab.char_id(self.last_char)]

    @classmethod
    def full(cls) -> "PrefixWindow":
        return cls(*FULL_PREFIX)


def fixed_grid_windows(n_bins: int = 1000) -> list[SpatialWindow]:
    windows = []
    for num_x, num_y in zip(GRID_NUM_XS, GRID_NUM_YS):
        inter_x = min(int(n_bins / num_x), n_bins - 1)
        inter_y = min(int(n_bins / num_y), n_bins - 1)
        for i in range(num_x):
            for j in range(num_y):
                sx, sy = i * inter_x, j * inter_y
                windows.append(SpatialWindow(sx, sy, min(sx + inter_x, n_bins - 1), min(sy + inter_y, n_bins - 1)))
    return windows


def random_window(start_x: int, start_y: int, rect_w: int, rect_h: int, n_bins: int = 1000) -> SpatialWindow:
    return SpatialWindow(start_x, start_y, min(start_x + rect_w, n_bins - 1), min(start_y + rect_h, n_bins - 1))


def window_mode(p: float) -> str:
    if p < FULL_PROB:
        return "full"
    if p < FULL_PROB + FIXED_PROB:
        return "fixed"
    return "random"


def draw_spatial_window(rng: PromptRng, n_bins: int = 1000) -> tuple[str, SpatialWindow]:
    """One draw of the three-branch sampler; returns ``(mode, window)``."""
    if n_bins < 9:
        raise ValueError("n_bins must be >= 9")
    mode = window_mode(rng.uniform())
    if mode == "full":
        return mode, SpatialWindow.full(n_bins)
    if mode == "fixed":
        windows = fixed_grid_windows(n_bins)
        return mode, windows[rng.choice_index(len(windows))]
    inter = int(n_bins / 3)
    start_x = rng.randint(0, inter * 2)
    start_y = rng.randint(0, inter * 2)
    rect_w, rect_h = rng.randint(inter, n_bins - 1), rng.randint(inter, n_bins - 1)
    return mode, random_window(start_x, start_y, rect_w, rect_h, n_bins)


def sample_spatial_window(rng: PromptRng, n_bins: int = 1000) -> SpatialWindow:
    return draw_spatial_window(rng, n_bins)[1]


def filter_by_spatial_window(instances: Iterable, window: SpatialWindow) -> list:
    return [inst for inst in instances if window.contains(inst.center)]


def prefix_index(ch: str) -> int:
    return _DICT_INDEX[ch]


def sample_prefix_window(rng: PromptRng) -> PrefixWindow:
    """Uniform over ordered pairs (first, last) with index(first) <= index(last)."""
    n = len(PREFIX_DICTIONARY)
    k = rng.choice_index(n * (n + 1) // 2)
    first = 0
    row = n
    while k >= row:
        k -= row
        first += 1
        row -= 1
    return PrefixWindow(PREFIX_DICTIONARY[first], PREFIX_DICTIONARY[first + k])


def filter_by_prefix_window(instances: Sequence, window: PrefixWindow) -> tuple[list, int]:
    """Keep instances whose first character lies in the window.

    Returns ``(kept, n_empty)`` where ``n_empty`` counts instances dropped for
    having an empty transcription.
    """
    kept, n_empty = [], 0
    for inst in instances:
        text = inst.transcription
        if not text:
            n_empty += 1
            continue
        if window.contains(text[0]):
            kept.append(inst)
    return kept, n_empty


def prompt_tokens(spatial: SpatialWindow, prefix: PrefixWindow, vocab: TokenVocabulary) -> list[int]:
    """Four coordinate tokens then two character tokens, placed right after ``<S>``."""
    return spatial.tokens(vocab) + prefix.tokens(vocab)


def full_prompt(vocab: TokenVocabulary) -> list[int]:
    return prompt_tokens(SpatialWindow.full(vocab.n_bins), PrefixWindow.full(), vocab)
