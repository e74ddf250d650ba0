"""Scoring and reporting: IoU, AP at 0.5, SVG overlays, leaderboard tables.

AP50 here is the fraction of ground-truth boxes whose prediction overlaps at
IoU >= 0.5; a sample with no prediction stays in the denominator and scores
zero, so missing outputs can only hurt.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoders import Image
from .geometry import BBox
from .imgio import png_bytes

AP_THRESHOLD = 0.5

# published grounding scores (AP50) on the benchmark this pipeline targets
TALK2CAR_LEADERBOARD = (
    ("HuBo-VLM", 76.74),
    ("Deformerable-MDETR", 74.4),
    ("Stacked VLBert", 71.0),
    ("CMRT", 69.1),
    ("Vilbert (Base)", 68.9),
    ("CMSVG", 68.6),
    ("ASSMR", 66.0),
    ("AttnGrounder", 63.3),
    ("VL-Bert (Base)", 63.1),
    ("MSRR", 60.04),
    ("MAC", 50.51),
    ("SCRC", 38.7),
    ("OSM", 35.31),
    ("STACK-NMN", 33.71),
)


class EvalError(ValueError):
    """Raised on inputs that would silently corrupt a score."""


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; degenerate boxes are a caller bug."""
    if not a.is_valid() or not b.is_valid():
        raise EvalError(f"iou needs valid boxes, got {a} and {b}")
    ix0, iy0 = max(a.x0, b.x0), max(a.y0, b.y0)
    ix1, iy1 = min(a.x1, b.x1), min(a.y1, b.y1)
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0.0 else 0.0


@dataclass
class EvalResult:
    ap50: float
    n_samples: int
    n_hits: int
    n_missing: int
    n_malformed: int
    mean_iou: float
    per_sample: list[dict] = field(default_factory=list)


def evaluate(predictions: list[dict], ground_truth: dict[str, BBox],
             threshold: float = AP_THRESHOLD) -> EvalResult:
    """Score prediction records against ground-truth boxes.

    Every ground-truth id contributes to the denominator. Predictions for
    unknown ids are an error, duplicates are an error; a missing prediction
    counts as IoU zero.
    """
    by_id: dict[str, dict] = {}
    for p in predictions:
        sid = p["sample_id"]
        if sid in by_id:
            raise EvalError(f"duplicate prediction for sample {sid}")
        if sid not in ground_truth:
            raise EvalError(f"prediction for unknown sample {sid}")
        by_id[sid] = p

    per_sample = []
    hits = 0
    missing = 0
    malformed = 0
    iou_sum = 0.0
    for sid in sorted(ground_truth):
        gt = ground_truth[sid]
        p = by_id.get(sid)
        if p is None:
            missing += 1
            per_sample.append({"sample_id": sid, "iou": 0.0, "hit": False,
                               "missing": True, "wellformed": False})
            continue
        box = BBox(*p["box"])
        wellformed = bool(p.get("wellformed", True))
        if not wellformed:
            malformed += 1
        value = iou(gt, box)
        hit = value >= threshold
        hits += int(hit)
        iou_sum += value
        per_sample.append({"sample_id": sid, "iou": value, "hit": hit,
                           "missing": False, "wellformed": wellformed})
    n = len(ground_truth)
    if n == 0:
        raise EvalError("nothing to evaluate: ground truth is empty")
    return EvalResult(ap50=hits / n, n_samples=n, n_hits=hits, n_missing=missing,
                      n_malformed=malformed, mean_iou=iou_sum / n,
                      per_sample=per_sample)


def _svg_rect(box: BBox, color: str, width: int) -> str:
    return (f'<rect x="{box.x0:.2f}" y="{box.y0:.2f}" width="{box.width:.2f}" '
            f'height="{box.height:.2f}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"/>')


def render_overlay(image: Image, instruction: str, predicted: BBox,
                   truth: BBox | None = None, wellformed: bool = True) -> str:
    """Self-contained SVG: the frame as embedded PNG, truth in green,
    prediction in red drawn last, instruction text beneath."""
    image.validate()
    w, h = image.width, image.height
    pad = 18
    payload = base64.b64encode(png_bytes(image.pixels)).decode("ascii")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h + pad}" '
        f'viewBox="0 0 {w} {h + pad}">',
        f'<image x="0" y="0" width="{w}" height="{h}" '
        f'href="data:image/png;base64,{payload}"/>',
    ]
    if truth is not None:
        parts.append(_svg_rect(truth, "#00c000", 2))
    parts.append(_svg_rect(predicted, "#e00000", 2))
    if not wellformed:
        parts.append('<text x="3" y="12" fill="#e00000" font-size="10" '
                     'font-family="monospace">malformed</text>')
    safe = (instruction.replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))
    parts.append(f'<text x="3" y="{h + pad - 5}" fill="#202020" font-size="10" '
                 f'font-family="monospace">{safe}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_overlays(out_dir: str | Path, rows: list[dict]) -> list[Path]:
    """rows: dicts with image, instruction, predicted, truth, wellformed,
    sample_id. Writes <sample_id>.svg files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for row in rows:
        if row.get("image") is None:
            raise EvalError(f"{row.get('sample_id')}: overlay needs pixels")
        svg = render_overlay(row["image"], row["instruction"], row["predicted"],
                             row.get("truth"), row.get("wellformed", True))
        path = out_dir / f"{row['sample_id']}.svg"
        path.write_text(svg, encoding="utf-8")
        written.append(path)
    return written


def leaderboard_table(rows=TALK2CAR_LEADERBOARD, highlight: str | None = None,
                      extra: tuple[str, float] | None = None) -> str:
    """Fixed-width text table sorted by score, best first."""
    entries = list(rows)
    if extra is not None:
        entries.append(extra)
    entries.sort(key=lambda r: -r[1])
    name_w = max(len(r[0]) for r in entries) + 2
    lines = [f"{'model':<{name_w}}AP50", "-" * (name_w + 5)]
    for name, score in entries:
        marker = " *" if highlight is not None and name == highlight else ""
        lines.append(f"{name:<{name_w}}{score:.2f}{marker}")
    return "\n".join(lines) + "\n"


def leaderboard_json(rows=TALK2CAR_LEADERBOARD) -> str:
    entries = sorted(rows, key=lambda r: -r[1])
    return json.dumps([{"model": n, "ap50": s} for n, s in entries], indent=1) + "\n"
