"""Sequence parsing, box repair, and prediction record IO."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundseq.geometry import BBox
from groundseq.postproc import (GroundingOutput, full_frame_box, parse_grounding_sequence,
                                prediction_record, read_predictions, render_box_text,
                                repair_box, write_predictions)
from groundseq.vocab import CoordBinSpec, build_vocab

SPEC = CoordBinSpec(num_bins=256, extent_w=128.0, extent_h=128.0)
VOCAB = build_vocab(["stop next to the red circle"], num_bins=256)


def coord(b: int) -> int:
    return VOCAB.coord_token(b)


def test_parse_well_formed_sequence() -> None:
    out = parse_grounding_sequence([coord(64), coord(64), coord(192), coord(192)], VOCAB, SPEC)
    assert out.wellformed and not out.repaired
    assert out.box == BBox(32.25, 32.25, 96.25, 96.25)


def test_parse_repairs_reversed_x_coordinates() -> None:
    out = parse_grounding_sequence([coord(192), coord(64), coord(64), coord(192)], VOCAB, SPEC)
    assert out.wellformed and out.repaired
    assert out.box.x0 < out.box.x1 and out.box.y0 < out.box.y1
    assert out.box == BBox(32.25, 32.25, 96.25, 96.25)


def test_parse_too_few_tokens_is_malformed() -> None:
    out = parse_grounding_sequence([coord(1), coord(2), coord(3)], VOCAB, SPEC)
    assert not out.wellformed
    assert out.box == full_frame_box(SPEC)
    assert out.raw_tokens == [coord(1), coord(2), coord(3)]


def test_parse_text_token_is_malformed() -> None:
    tokens = [coord(1), VOCAB.text_base, coord(3), coord(4)]
    out = parse_grounding_sequence(tokens, VOCAB, SPEC)
    assert not out.wellformed
    assert out.box == full_frame_box(SPEC)


def test_parse_empty_sequence_is_malformed() -> None:
    out = parse_grounding_sequence([], VOCAB, SPEC)
    assert not out.wellformed
    assert out.box == full_frame_box(SPEC)


def test_repair_expands_degenerate_width() -> None:
    got = repair_box(BBox(50.0, 10.0, 50.0, 20.0), SPEC)
    assert got == BBox(49.5, 10.0, 50.5, 20.0)


def test_repair_clamps_to_frame() -> None:
    got = repair_box(BBox(-5.0, 0.0, 300.0, 128.0), SPEC)
    assert got == BBox(0.0, 0.0, 128.0, 128.0)


def test_repair_orders_corners() -> None:
    got = repair_box(BBox(96.0, 90.0, 32.0, 10.0), SPEC)
    assert got == BBox(32.0, 10.0, 96.0, 90.0)


def test_repair_degenerate_at_frame_edge_stays_inside() -> None:
    got = repair_box(BBox(0.0, 0.0, 0.0, 12.0), SPEC)
    assert got.x0 == 0.0 and got.x1 == 1.0


@settings(max_examples=200, deadline=None)
@given(*(st.floats(min_value=-20.0, max_value=148.0, allow_nan=False) for _ in range(4)))
def test_repair_is_idempotent(x0: float, y0: float, x1: float, y1: float) -> None:
    once = repair_box(BBox(x0, y0, x1, y1), SPEC)
    twice = repair_box(once, SPEC)
    assert once == twice
    assert once.is_valid()
    assert once.width >= 1.0 - 1e-12 and once.height >= 1.0 - 1e-12


def test_render_box_text_examples() -> None:
    assert render_box_text(BBox(0.0, 0.0, 128.0, 128.0)) == "(0.0, 0.0, 128.0, 128.0)"
    # 32.25 is exactly representable, so half-to-even rounding gives 32.2
    assert render_box_text(BBox(32.25, 32.25, 96.25, 96.25)) == "(32.2, 32.2, 96.2, 96.2)"


def test_prediction_jsonl_round_trip(tmp_path) -> None:
    records = [
        prediction_record("s0", GroundingOutput(BBox(1.0, 2.0, 3.0, 4.0), [7, 8, 9, 10], True)),
        prediction_record("s1", GroundingOutput(full_frame_box(SPEC), [3], False)),
    ]
    path = tmp_path / "predictions.jsonl"
    write_predictions(path, records)
    loaded = read_predictions(path)
    assert loaded == records
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith('{"sample_id": "s0"')
