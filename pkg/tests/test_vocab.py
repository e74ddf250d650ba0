"""Vocabulary layout, text codec, and coordinate quantization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundseq import vocab as V
from groundseq.geometry import BBox


def make_vocab(corpus=("stop next to her",), num_bins=4) -> V.Vocabulary:
    return V.build_vocab(list(corpus), num_bins=num_bins)


def test_control_ids_are_pinned() -> None:
    assert (V.PAD, V.BOS, V.EOS, V.UNK, V.SEP, V.TASK_GROUND, V.TASK_CAPTION) == \
        (0, 1, 2, 3, 4, 5, 6)


def test_layout_controls_bins_then_text() -> None:
    v = make_vocab()
    assert v.coord_base == 7
    assert v.text_base == 11
    assert v.word_id("her") == 11
    assert v.word_id("next") == 12
    assert v.word_id("stop") == 13
    assert v.word_id("to") == 14
    assert v.size == 15


def test_text_tokens_ordered_by_frequency_then_lexicographic() -> None:
    v = V.build_vocab(["red red blue", "blue red", "amber"], num_bins=2)
    assert v.words == ["red", "blue", "amber"]
    v = V.build_vocab(["b a", "a b"], num_bins=2)
    assert v.words == ["a", "b"]  # equal counts fall back to word order


def test_encode_text_lowercases_and_strips_punctuation() -> None:
    v = make_vocab()
    assert v.encode_text("Stop next to HER.") == [13, 12, 14, 11]


def test_unknown_word_maps_to_unk() -> None:
    v = make_vocab()
    assert v.encode_text("stop there") == [13, V.UNK]


def test_decode_tokens_renders_control_and_bin_surfaces() -> None:
    v = make_vocab()
    assert v.decode_tokens([V.BOS, v.coord_token(3), 13]) == "⟨BOS⟩ ⟨bin_3⟩ stop"


def test_decode_rejects_out_of_range_id() -> None:
    v = make_vocab()
    with pytest.raises(V.VocabError):
        v.decode_tokens([v.size])


def test_serialize_round_trip(tmp_path) -> None:
    v = V.build_vocab(["pull up next to the red circle", "describe the scene"], num_bins=16)
    path = tmp_path / "vocab.txt"
    v.save(path)
    text = path.read_text(encoding="utf-8")
    assert text.startswith("#groundseq-vocab v1 num_bins=16\n")
    loaded = V.load_vocab(path)
    assert loaded.num_bins == v.num_bins
    assert loaded.words == v.words
    assert loaded.serialize() == text


def test_load_rejects_damaged_file(tmp_path) -> None:
    path = tmp_path / "vocab.txt"
    path.write_text("#groundseq-vocab v2 num_bins=4\n", encoding="utf-8")
    with pytest.raises(V.VocabError):
        V.load_vocab(path)
    path.write_text("#groundseq-vocab v1 num_bins=4\n⟨PAD⟩\nbroken\n",
                    encoding="utf-8")
    with pytest.raises(V.VocabError):
        V.load_vocab(path)


def test_quantize_examples() -> None:
    assert V.quantize(32.0, 128.0, 256) == 64
    assert V.quantize(96.0, 128.0, 256) == 192
    assert V.quantize(-5.0, 128.0, 256) == 0
    assert V.quantize(130.0, 128.0, 256) == 255
    assert V.quantize(128.0, 128.0, 256) == 255


def test_dequantize_is_bin_center() -> None:
    assert V.dequantize(64, 128.0, 256) == pytest.approx(32.25, abs=0)
    assert V.dequantize(0, 128.0, 256) == pytest.approx(0.25, abs=0)
    with pytest.raises(ValueError):
        V.dequantize(256, 128.0, 256)


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=0.0, max_value=128.0, allow_nan=False))
def test_round_trip_error_within_half_bin(value: float) -> None:
    bin_index = V.quantize(value, 128.0, 256)
    back = V.dequantize(bin_index, 128.0, 256)
    assert abs(back - value) <= 128.0 / (2 * 256) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=-10.0, max_value=138.0, allow_nan=False),
       st.floats(min_value=-10.0, max_value=138.0, allow_nan=False))
def test_quantize_monotone(a: float, b: float) -> None:
    lo, hi = min(a, b), max(a, b)
    assert V.quantize(lo, 128.0, 256) <= V.quantize(hi, 128.0, 256)


def test_quantize_values_straddling_bin_edges() -> None:
    edge = 0.5  # bin width for 128 px over 256 bins
    assert V.quantize(edge - 1e-9, 128.0, 256) == 0
    assert V.quantize(edge, 128.0, 256) == 1


def test_encode_box_example() -> None:
    v = make_vocab(num_bins=256)
    spec = V.CoordBinSpec(num_bins=256, extent_w=128.0, extent_h=128.0)
    ids = V.encode_box(BBox(32.0, 32.0, 96.0, 96.0), spec, v)
    assert ids == [7 + 64, 7 + 64, 7 + 192, 7 + 192]


def test_encode_box_rejects_bin_count_mismatch() -> None:
    v = make_vocab(num_bins=16)
    spec = V.CoordBinSpec(num_bins=256)
    with pytest.raises(V.VocabError):
        V.encode_box(BBox(0, 0, 1, 1), spec, v)


def test_bin_spec_validation() -> None:
    with pytest.raises(ValueError):
        V.CoordBinSpec(num_bins=1)
    with pytest.raises(ValueError):
        V.CoordBinSpec(extent_w=0.0)


def test_vocab_ids_dense_and_disjoint() -> None:
    v = V.build_vocab(["alpha beta gamma delta"], num_bins=32)
    surfaces = [v.surface(i) for i in range(v.size)]
    assert len(set(surfaces)) == v.size
    for i, word in enumerate(v.words):
        assert v.word_id(word) == v.text_base + i
