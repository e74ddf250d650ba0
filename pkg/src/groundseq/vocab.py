"""Unified token vocabulary: control tokens, coordinate bins, then text.

Coordinates are discretized into per-axis bins so a box becomes four tokens in
the same id space as words; control ids are fixed so models and files agree
without negotiation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from .geometry import BBox

PAD, BOS, EOS, UNK, SEP, TASK_GROUND, TASK_CAPTION = range(7)

CONTROL_TOKENS = ("PAD", "BOS", "EOS", "UNK", "SEP", "TASK_GROUND", "TASK_CAPTION")
N_CONTROL = len(CONTROL_TOKENS)

_WORD_RE = re.compile(r"[a-z0-9]+")
_VOCAB_HEADER_RE = re.compile(r"^#groundseq-vocab v1 num_bins=(\d+)$")


class VocabError(ValueError):
    """Raised on malformed vocabulary files or undecodable ids."""


@dataclass(frozen=True)
class CoordBinSpec:
    """Uniform quantization grid over a fixed frame."""

    num_bins: int = 256
    extent_w: float = 128.0
    extent_h: float = 128.0

    def __post_init__(self) -> None:
        if self.num_bins < 2:
            raise ValueError(f"num_bins must be at least 2, got {self.num_bins}")
        if self.extent_w <= 0 or self.extent_h <= 0:
            raise ValueError("frame extents must be positive")


def quantize(value: float, extent: float, num_bins: int) -> int:
    """Map a continuous coordinate to its bin; clamps out-of-range input."""
    b = int(value / extent * num_bins)  # floor for non-negative operands
    if value < 0:
        return 0
    return min(max(b, 0), num_bins - 1)


def dequantize(bin_index: int, extent: float, num_bins: int) -> float:
    """Bin center in continuous coordinates."""
    if not 0 <= bin_index < num_bins:
        raise ValueError(f"bin index {bin_index} outside [0, {num_bins})")
    return (bin_index + 0.5) * extent / num_bins


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric words; punctuation separates."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Immutable id <-> token mapping over controls, bins, and words."""

    def __init__(self, num_bins: int, words: list[str]) -> None:
        self.num_bins = num_bins
        self.coord_base = N_CONTROL
        self.text_base = N_CONTROL + num_bins
        self.words = list(words)
        self._word_to_id = {w: self.text_base + i for i, w in enumerate(self.words)}
        if len(self._word_to_id) != len(self.words):
            raise VocabError("duplicate word in vocabulary")

    @property
    def size(self) -> int:
        return self.text_base + len(self.words)

    def coord_token(self, bin_index: int) -> int:
        if not 0 <= bin_index < self.num_bins:
            raise VocabError(f"bin index {bin_index} outside [0, {self.num_bins})")
        return self.coord_base + bin_index

    def is_coord_token(self, token_id: int) -> bool:
        return self.coord_base <= token_id < self.text_base

    def coord_bin(self, token_id: int) -> int:
        if not self.is_coord_token(token_id):
            raise VocabError(f"id {token_id} is not a coordinate token")
        return token_id - self.coord_base

    def word_id(self, word: str) -> int:
        return self._word_to_id.get(word, UNK)

    def encode_text(self, text: str) -> list[int]:
        return [self.word_id(w) for w in tokenize(text)]

    def surface(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise VocabError(f"id {token_id} outside vocabulary of size {self.size}")
        if token_id < N_CONTROL:
            return f"⟨{CONTROL_TOKENS[token_id]}⟩"
        if token_id < self.text_base:
            return f"⟨bin_{token_id - self.coord_base}⟩"
        return self.words[token_id - self.text_base]

    def decode_tokens(self, ids: list[int]) -> str:
        return " ".join(self.surface(i) for i in ids)

    def serialize(self) -> str:
        lines = [f"#groundseq-vocab v1 num_bins={self.num_bins}"]
        lines.extend(self.surface(i) for i in range(self.size))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")


def build_vocab(corpus: list[str], num_bins: int = 256) -> Vocabulary:
    """Text tokens ordered by descending frequency, ties by ascending word."""
    counts: dict[str, int] = {}
    for text in corpus:
        for w in tokenize(text):
            counts[w] = counts.get(w, 0) + 1
    words = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(num_bins, words)


def load_vocab(path: str | Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise VocabError(f"{path}: empty vocabulary file")
    header = _VOCAB_HEADER_RE.match(lines[0])
    if header is None:
        raise VocabError(f"{path}: bad header line {lines[0]!r}")
    num_bins = int(header.group(1))
    tokens = lines[1:]
    expected = [f"⟨{name}⟩" for name in CONTROL_TOKENS]
    expected += [f"⟨bin_{b}⟩" for b in range(num_bins)]
    if tokens[:len(expected)] != expected:
        raise VocabError(f"{path}: control or bin token block is damaged")
    return Vocabulary(num_bins, tokens[len(expected):])


def encode_box(box: BBox, spec: CoordBinSpec, vocab: Vocabulary) -> list[int]:
    """Box corners to four coordinate tokens (x0, y0, x1, y1 order)."""
    if vocab.num_bins != spec.num_bins:
        raise VocabError(
            f"vocabulary has {vocab.num_bins} bins but codec spec has {spec.num_bins}")
    bins = (
        quantize(box.x0, spec.extent_w, spec.num_bins),
        quantize(box.y0, spec.extent_h, spec.num_bins),
        quantize(box.x1, spec.extent_w, spec.num_bins),
        quantize(box.y1, spec.extent_h, spec.num_bins),
    )
    return [vocab.coord_token(b) for b in bins]
