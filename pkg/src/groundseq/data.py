"""Synthetic desk scenes and dataset files.

Scenes are flat-shaded shapes on a light gray ground, placed by rejection
sampling so boxes never overlap and every scene has at least one object whose
shape-color pair is unique. Instructions name that object; captions enumerate
the scene left to right. Everything is derived from a single seed.

Object geometry lives on a 16 px lattice with two fixed side lengths, so box
coordinates form a small closed set that recurs across scenes instead of a
continuum no desk-scale model could ground from a few hundred examples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeding
from .encoders import Image
from .geometry import BBox, Letterbox, boxes_disjoint
from .imgio import read_ppm, write_ppm
from .vocab import CoordBinSpec, Vocabulary, build_vocab

MANIFEST_VERSION = "groundseq-ds-v1"
FRAME_W = 128
FRAME_H = 128

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (200, 30, 30),
    "green": (40, 160, 60),
    "blue": (40, 70, 200),
    "yellow": (230, 210, 40),
    "gray": (120, 120, 120),
}
SIZE_CLASSES = {"small": 16, "large": 32}  # exact box side, px
PLACEMENT_GRID = 16
# Odd-pixel edges sit on the centers of 2 px coordinate bins, so the 64-bin
# codec reproduces lattice boxes exactly.
PLACEMENT_OFFSET = 1
BACKGROUND = (217, 217, 217)

INSTRUCTION_TEMPLATES = (
    "pull up next to the {color} {shape}",
    "stop near the {size} {color} {shape}",
    "drive to the {color} {shape}",
    "park beside the {color} {shape}",
    "stop next to the {size} {color} {shape}",
    "head toward the {color} {shape} and wait",
    "find the {color} {shape}",
    "bring the robot to the {size} {color} {shape}",
    "detect the {color} {shape}",
)
CAPTION_PROMPT = "describe the scene"

SPLIT_WEIGHTS = {"train": 8349, "val": 1163, "test": 2447}  # canonical split ratio


class DataError(ValueError):
    """Raised on malformed datasets or records."""


class SceneGenerationError(RuntimeError):
    """Raised when rejection sampling cannot place a scene."""


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size_class: str
    box: BBox


@dataclass
class Sample:
    sample_id: str
    task: str  # "GROUND" or "CAPTION"
    instruction: str
    box: BBox | None
    caption: str | None
    image: Image | None = None
    image_path: str | None = None

    def validate(self) -> None:
        if self.task == "GROUND":
            if self.box is None or self.caption is not None:
                raise DataError(f"{self.sample_id}: grounding sample needs a box only")
        elif self.task == "CAPTION":
            if self.caption is None or self.box is not None:
                raise DataError(f"{self.sample_id}: caption sample needs a caption only")
        else:
            raise DataError(f"{self.sample_id}: unknown task {self.task!r}")


def generate_scene(seed: int, n_objects: int) -> tuple[Image, list[SceneObject]]:
    """Deterministic scene for a seed; raises SceneGenerationError when the
    frame cannot host the requested objects within the attempt budget."""
    if n_objects < 1:
        raise ValueError("a scene needs at least one object")
    rng = np.random.default_rng(seed)
    attrs = _draw_attributes(rng, n_objects)
    objects: list[SceneObject] = []
    for shape, color, size_class in attrs:
        side = SIZE_CLASSES[size_class]
        max_cell_x = (FRAME_W - PLACEMENT_OFFSET - side) // PLACEMENT_GRID
        max_cell_y = (FRAME_H - PLACEMENT_OFFSET - side) // PLACEMENT_GRID
        placed = False
        for _ in range(1000):
            x0 = PLACEMENT_OFFSET + PLACEMENT_GRID * int(rng.integers(max_cell_x + 1))
            y0 = PLACEMENT_OFFSET + PLACEMENT_GRID * int(rng.integers(max_cell_y + 1))
            box = BBox(float(x0), float(y0), float(x0 + side), float(y0 + side))
            if all(boxes_disjoint(box, o.box) for o in objects):
                objects.append(SceneObject(shape, color, size_class, box))
                placed = True
                break
        if not placed:
            raise SceneGenerationError(
                f"could not place object {len(objects)} of {n_objects} after 1000 attempts")
    return render_scene(objects), objects


def _draw_attributes(rng: np.random.Generator,
                     n_objects: int) -> list[tuple[str, str, str]]:
    color_names = list(COLORS)
    # Two singleton pairs whenever the scene can hold them, so a scene can
    # host two grounding instructions with different referents.
    want_unique = min(2, n_objects)
    for _ in range(100):
        pairs = [(SHAPES[rng.integers(len(SHAPES))], color_names[rng.integers(len(color_names))])
                 for _ in range(n_objects)]
        counts: dict[tuple[str, str], int] = {}
        for pair in pairs:
            counts[pair] = counts.get(pair, 0) + 1
        if sum(c == 1 for c in counts.values()) >= want_unique:
            sizes = [("small", "large")[rng.integers(2)] for _ in range(n_objects)]
            return [(s, c, z) for (s, c), z in zip(pairs, sizes)]
    raise SceneGenerationError("no uniquely describable object after 100 attribute draws")


def render_scene(objects: list[SceneObject]) -> Image:
    pixels = np.empty((FRAME_H, FRAME_W, 3), dtype=np.float64)
    pixels[:] = np.asarray(BACKGROUND, dtype=np.float64) / 255.0
    ys, xs = np.mgrid[0:FRAME_H, 0:FRAME_W]
    cx_grid = xs + 0.5
    cy_grid = ys + 0.5
    for obj in objects:
        b = obj.box
        if obj.shape == "square":
            mask = (cx_grid >= b.x0) & (cx_grid <= b.x1) & (cy_grid >= b.y0) & (cy_grid <= b.y1)
        elif obj.shape == "circle":
            cx, cy, r = (b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2, b.width / 2
            mask = (cx_grid - cx) ** 2 + (cy_grid - cy) ** 2 <= r ** 2
        else:  # triangle, apex top center, base at the bottom of the box
            cx = (b.x0 + b.x1) / 2
            inside_y = (cy_grid >= b.y0) & (cy_grid <= b.y1)
            half_width = (cy_grid - b.y0) / max(b.height, 1e-9) * (b.width / 2)
            mask = inside_y & (np.abs(cx_grid - cx) <= half_width)
        pixels[mask] = np.asarray(COLORS[obj.color], dtype=np.float64) / 255.0
    return Image(width=FRAME_W, height=FRAME_H, pixels=pixels)


def unique_referents(objects: list[SceneObject]) -> list[int]:
    """Indices of objects whose (shape, color) pair appears exactly once."""
    counts: dict[tuple[str, str], int] = {}
    for o in objects:
        counts[(o.shape, o.color)] = counts.get((o.shape, o.color), 0) + 1
    return [i for i, o in enumerate(objects) if counts[(o.shape, o.color)] == 1]


def generate_instruction(objects: list[SceneObject],
                         rng: np.random.Generator) -> tuple[str, int]:
    """Templated instruction plus the index of its provably unique referent."""
    candidates = unique_referents(objects)
    if not candidates:
        raise SceneGenerationError("scene has no uniquely describable object")
    target = candidates[rng.integers(len(candidates))]
    obj = objects[target]
    template = INSTRUCTION_TEMPLATES[rng.integers(len(INSTRUCTION_TEMPLATES))]
    text = template.format(shape=obj.shape, color=obj.color, size=obj.size_class)
    return text, target


def make_caption(objects: list[SceneObject]) -> str:
    """Enumerate objects left to right as 'a {size} {color} {shape}' phrases."""
    ordered = sorted(objects, key=lambda o: (o.box.x0, o.box.y0))
    return " and ".join(f"a {o.size_class} {o.color} {o.shape}" for o in ordered)


def largest_remainder_split(n: int, weights: dict[str, int]) -> dict[str, int]:
    """Apportion n items to named buckets proportionally to the weights."""
    total = sum(weights.values())
    raw = {k: n * w / total for k, w in weights.items()}
    counts = {k: int(raw[k]) for k in weights}
    leftover = n - sum(counts.values())
    by_remainder = sorted(weights, key=lambda k: (counts[k] - raw[k], k))
    for k in by_remainder[:leftover]:
        counts[k] += 1
    return counts


def generate_dataset(out_dir: str | Path, n: int, seed: int,
                     caption_frac: float = 0.5, num_bins: int = 256) -> dict:
    """Write a complete dataset directory; returns summary counts.

    Grounding samples come in pairs that share one scene but name different
    referents, so an image alone never determines the answer and a model has
    to read the instruction. Pairs never straddle a split boundary.
    """
    if n < 3:
        raise DataError("need at least 3 samples to cover three splits")
    if not 0.0 <= caption_frac <= 1.0:
        raise DataError(f"caption_frac must lie in [0, 1], got {caption_frac}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    counts = largest_remainder_split(n, SPLIT_WEIGHTS)
    split_of = (["train"] * counts["train"] + ["val"] * counts["val"]
                + ["test"] * counts["test"])

    samples: list[Sample] = []
    task_rng = seeding.stream(seed, "data/task")
    pending: dict | None = None  # grounding scene waiting for its second referent
    for i in range(n):
        sample_id = f"s{i:06d}"
        sample_rng = seeding.stream(seed, f"data/sample/{i}")
        if pending is not None and pending["split"] != split_of[i]:
            pending = None
        if task_rng.random() < caption_frac:
            n_objects = int(sample_rng.integers(2, 6))
            image, objects = generate_scene(
                seeding.derive_seed(seed, f"data/scene/{i}"), n_objects)
            sample = Sample(sample_id, "CAPTION", CAPTION_PROMPT, None,
                            make_caption(objects), image=image)
        elif pending is None:
            n_objects = int(sample_rng.integers(2, 6))
            image, objects = generate_scene(
                seeding.derive_seed(seed, f"data/scene/{i}"), n_objects)
            text, target = generate_instruction(objects, sample_rng)
            pending = {"split": split_of[i], "image": image, "objects": objects,
                       "taken": target}
            sample = Sample(sample_id, "GROUND", text, objects[target].box, None,
                            image=image)
        else:
            image, objects = pending["image"], pending["objects"]
            for _ in range(100):
                text, target = generate_instruction(objects, sample_rng)
                if target != pending["taken"]:
                    break
            else:
                raise SceneGenerationError(
                    f"no second referent for the scene shared by sample {i}")
            pending = None
            sample = Sample(sample_id, "GROUND", text, objects[target].box, None,
                            image=image)
        sample.validate()
        samples.append(sample)

    ids = [s.sample_id for s in samples]
    splits = {
        "train": ids[:counts["train"]],
        "val": ids[counts["train"]:counts["train"] + counts["val"]],
        "test": ids[counts["train"] + counts["val"]:],
    }

    write_dataset(out_dir, samples, splits, num_bins=num_bins)
    corpus = [s.instruction for s in samples] + [s.caption for s in samples if s.caption]
    build_vocab(corpus, num_bins=num_bins).save(out_dir / "vocab.txt")

    return {
        "n": n,
        "splits": {k: len(v) for k, v in splits.items()},
        "tasks": {
            "GROUND": sum(s.task == "GROUND" for s in samples),
            "CAPTION": sum(s.task == "CAPTION" for s in samples),
        },
    }


def write_dataset(out_dir: str | Path, samples: list[Sample],
                  splits: dict[str, list[str]], num_bins: int) -> None:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    seen: set[str] = set()
    records: dict[str, dict] = {}
    for s in samples:
        if s.sample_id in seen:
            raise DataError(f"duplicate sample id {s.sample_id}")
        seen.add(s.sample_id)
        s.validate()
        if s.image is None:
            raise DataError(f"{s.sample_id}: cannot write a sample without pixels")
        if s.box is not None and not (
                0 <= s.box.x0 <= s.box.x1 <= FRAME_W and 0 <= s.box.y0 <= s.box.y1 <= FRAME_H):
            raise DataError(f"{s.sample_id}: box {s.box.as_list()} leaves the frame")
        rel = f"images/{s.sample_id}.ppm"
        write_ppm(out_dir / rel, s.image)
        records[s.sample_id] = {
            "image": rel,
            "task": s.task,
            "instruction": s.instruction,
            "box": s.box.as_list() if s.box else None,
            "caption": s.caption,
        }
    for name, id_list in splits.items():
        for sid in id_list:
            if sid not in records:
                raise DataError(f"split {name} names unknown sample {sid}")
    manifest = {
        "version": MANIFEST_VERSION,
        "frame": [FRAME_W, FRAME_H],
        "num_bins": num_bins,
        "splits": splits,
        "samples": records,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


class Dataset:
    """Loaded manifest with lazy image access."""

    def __init__(self, root: Path, manifest: dict, vocab: Vocabulary | None) -> None:
        self.root = root
        self.manifest = manifest
        self.vocab = vocab
        self.frame_w, self.frame_h = manifest["frame"]
        self.num_bins = manifest["num_bins"]
        self.splits: dict[str, list[str]] = manifest["splits"]
        self._records: dict[str, dict] = manifest["samples"]

    @property
    def bin_spec(self) -> CoordBinSpec:
        return CoordBinSpec(num_bins=self.num_bins, extent_w=float(self.frame_w),
                            extent_h=float(self.frame_h))

    def ids(self, split: str) -> list[str]:
        if split not in self.splits:
            raise DataError(
                f"unknown split {split!r}; available: {sorted(self.splits)}")
        return list(self.splits[split])

    def sample(self, sample_id: str, with_image: bool = True) -> Sample:
        r = self._records.get(sample_id)
        if r is None:
            raise DataError(f"unknown sample id {sample_id}")
        box = BBox(*r["box"]) if r["box"] is not None else None
        image = read_ppm(self.root / r["image"]) if with_image else None
        s = Sample(sample_id, r["task"], r["instruction"], box, r["caption"],
                   image=image, image_path=r["image"])
        s.validate()
        return s


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    version = manifest.get("version")
    if version != MANIFEST_VERSION:
        raise DataError(f"manifest version {version!r}, expected {MANIFEST_VERSION!r}")

    seen: set[str] = set()
    for name, id_list in manifest["splits"].items():
        overlap = seen.intersection(id_list)
        if overlap:
            raise DataError(f"split {name} reuses ids: {sorted(overlap)[:3]}")
        seen.update(id_list)
    for sid, record in manifest["samples"].items():
        if not (root / record["image"]).exists():
            raise DataError(f"sample {sid}: missing image file {record['image']}")

    vocab_path = root / "vocab.txt"
    vocab = None
    if vocab_path.exists():
        from .vocab import load_vocab
        vocab = load_vocab(vocab_path)
    return Dataset(root, manifest, vocab)


def load_talk2car_subset(path: str | Path, frame_w: int = FRAME_W,
                         frame_h: int = FRAME_H) -> dict[str, list[Sample]]:
    """Read corner-converted, letterboxed grounding samples from a benchmark
    subset file; images stay as path references."""
    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err
    if not isinstance(records, list):
        raise DataError(f"{path}: expected a list of records")
    out: dict[str, list[Sample]] = {}
    for i, r in enumerate(records):
        missing = {"command", "image", "box_xywh", "source_wh", "split"} - set(r)
        if missing:
            raise DataError(f"{path}: record {i} lacks fields {sorted(missing)}")
        x, y, w, h = r["box_xywh"]
        src_w, src_h = r["source_wh"]
        if w <= 0 or h <= 0:
            raise DataError(f"{path}: record {i} has non-positive box size")
        if x < 0 or y < 0 or x + w > src_w or y + h > src_h:
            raise DataError(f"{path}: record {i} box leaves the source frame")
        lb = Letterbox(src_w=src_w, src_h=src_h, dst_w=frame_w, dst_h=frame_h)
        box = lb.apply_box(BBox(x, y, x + w, y + h))
        sample = Sample(f"t2c{i:04d}", "GROUND", r["command"], box, None,
                        image=None, image_path=r["image"])
        out.setdefault(r["split"], []).append(sample)
    return out
