"""Turn generated token sequences into boxes, with loud flags instead of
silent fixes when a model emits something off-grammar."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .geometry import BBox
from .vocab import CoordBinSpec, Vocabulary, dequantize

MIN_SIDE = 1.0  # degenerate boxes are widened to this many pixels


@dataclass(frozen=True)
class GroundingOutput:
    """Parsed prediction plus bookkeeping for the eval denominators."""

    box: BBox
    raw_tokens: list[int]
    wellformed: bool
    repaired: bool = False


def full_frame_box(spec: CoordBinSpec) -> BBox:
    return BBox(0.0, 0.0, spec.extent_w, spec.extent_h)


def parse_grounding_sequence(tokens: list[int], vocab: Vocabulary,
                             spec: CoordBinSpec) -> GroundingOutput:
    """Grammar: exactly four coordinate tokens. Anything else falls back to
    the full frame with wellformed=False; corner-order violations are repaired
    and flagged but stay well-formed."""
    if len(tokens) != 4 or not all(vocab.is_coord_token(t) for t in tokens):
        return GroundingOutput(full_frame_box(spec), list(tokens), wellformed=False)
    bx0, by0, bx1, by1 = (vocab.coord_bin(t) for t in tokens)
    box = BBox(
        dequantize(bx0, spec.extent_w, spec.num_bins),
        dequantize(by0, spec.extent_h, spec.num_bins),
        dequantize(bx1, spec.extent_w, spec.num_bins),
        dequantize(by1, spec.extent_h, spec.num_bins),
    )
    repaired_box = repair_box(box, spec)
    return GroundingOutput(repaired_box, list(tokens), wellformed=True,
                           repaired=repaired_box != box)


def repair_box(box: BBox, spec: CoordBinSpec) -> BBox:
    """Order corners, clamp into the frame, and expand sub-pixel sides to
    MIN_SIDE symmetrically; idempotent."""
    x0, x1 = sorted((box.x0, box.x1))
    y0, y1 = sorted((box.y0, box.y1))
    x0, x1 = max(x0, 0.0), min(x1, spec.extent_w)
    y0, y1 = max(y0, 0.0), min(y1, spec.extent_h)
    x0, x1 = _expand_axis(x0, x1, spec.extent_w)
    y0, y1 = _expand_axis(y0, y1, spec.extent_h)
    return BBox(x0, y0, x1, y1)


def _expand_axis(lo: float, hi: float, extent: float) -> tuple[float, float]:
    if hi - lo >= MIN_SIDE:
        return lo, hi
    center = (lo + hi) / 2.0
    center = min(max(center, MIN_SIDE / 2.0), extent - MIN_SIDE / 2.0)
    lo, hi = center - MIN_SIDE / 2.0, center + MIN_SIDE / 2.0
    # rounding at a non-dyadic center can leave the side one ulp short; widen
    # until the constraint holds so a second pass changes nothing
    while hi - lo < MIN_SIDE:
        if hi < extent:
            hi = math.nextafter(hi, math.inf)
        else:
            lo = math.nextafter(lo, -math.inf)
    return lo, hi


def render_box_text(box: BBox) -> str:
    """Box as prompt-style text, one decimal place, banker's rounding."""
    return f"({box.x0:.1f}, {box.y0:.1f}, {box.x1:.1f}, {box.y1:.1f})"


def prediction_record(sample_id: str, output: GroundingOutput) -> dict:
    return {
        "sample_id": sample_id,
        "box": output.box.as_list(),
        "wellformed": output.wellformed,
        "raw_tokens": list(output.raw_tokens),
    }


def write_predictions(path: str | Path, records: list[dict]) -> None:
    """One JSON object per line, key order fixed for byte stability."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(
                {"sample_id": r["sample_id"], "box": r["box"],
                 "wellformed": r["wellformed"], "raw_tokens": r["raw_tokens"]},
                separators=(", ", ": ")) + "\n")


def read_predictions(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records
