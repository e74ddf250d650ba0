"""Single-file checkpoints.

Layout: 8-byte magic, uint64 little-endian header length, canonical JSON
header (sorted keys), float64 little-endian blobs in header order, then a
sha256 over everything before it. The header embeds the vocabulary and the
generator state, so a run resumes bit for bit from the file alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import GroundingModel, ModelConfig
from .optim import AdamState
from .tensor import Tensor
from .vocab import Vocabulary

MAGIC = b"GSEQCKPT"
FORMAT = 1


class CheckpointError(ValueError):
    """Raised on corrupt or unreadable checkpoint files."""


class CompatibilityError(CheckpointError):
    """Raised when two artifacts cannot work together (architecture or
    vocabulary mismatch), as opposed to a damaged file."""


@dataclass
class CheckpointBundle:
    model: GroundingModel
    optimizer: AdamState | None
    rng_state: dict | None
    step: int
    stage: str | None


def _canonical(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str | Path, model: GroundingModel,
                    optimizer: AdamState | None = None,
                    rng_state: dict | None = None, step: int = 0,
                    stage: str | None = None) -> None:
    names = sorted(model.params)
    blobs: list[np.ndarray] = [model.params[n].data for n in names]
    header: dict = {
        "format": FORMAT,
        "model_config": model.config.as_dict(),
        "vocab": {"num_bins": model.vocab.num_bins, "words": model.vocab.words},
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "step": int(step),
        "stage": stage,
        "rng_state": rng_state,
        "optimizer": None,
    }
    if optimizer is not None:
        if set(optimizer.first_moment) != set(model.params):
            raise CheckpointError("optimizer slots do not match model parameters")
        header["optimizer"] = {
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step_count": optimizer.step_count,
        }
        blobs.extend(optimizer.first_moment[n] for n in names)
        blobs.extend(optimizer.second_moment[n] for n in names)

    head = _canonical(header)
    digest = hashlib.sha256()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        for chunk in (MAGIC, np.uint64(len(head)).tobytes(), head):
            fh.write(chunk)
            digest.update(chunk)
        for blob in blobs:
            raw = np.ascontiguousarray(blob, dtype="<f8").tobytes()
            fh.write(raw)
            digest.update(raw)
        fh.write(digest.digest())


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if len(raw) < len(MAGIC) + 8 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    body, stored = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != stored:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")

    head_len = int(np.frombuffer(raw, dtype="<u8", count=1, offset=len(MAGIC))[0])
    head_start = len(MAGIC) + 8
    try:
        header = json.loads(raw[head_start:head_start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable header: {err}") from err
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")

    config = ModelConfig(**header["model_config"])
    vocab = Vocabulary(header["vocab"]["num_bins"], header["vocab"]["words"])

    offset = head_start + head_len

    def take(shape: list[int]) -> np.ndarray:
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        if offset + 8 * n > len(body):
            raise CheckpointError(f"{path}: truncated parameter data")
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset)
        offset += 8 * n
        return arr.reshape(shape).astype(np.float64)

    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        params[entry["name"]] = Tensor(take(entry["shape"]), requires_grad=True)

    optimizer = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        optimizer = AdamState(learning_rate=o["learning_rate"], beta1=o["beta1"],
                              beta2=o["beta2"], eps=o["eps"],
                              step_count=o["step_count"])
        for entry in header["params"]:
            optimizer.first_moment[entry["name"]] = take(entry["shape"])
        for entry in header["params"]:
            optimizer.second_moment[entry["name"]] = take(entry["shape"])
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} unexpected trailing bytes")

    model = GroundingModel(config, vocab, params)
    return CheckpointBundle(model=model, optimizer=optimizer,
                            rng_state=header["rng_state"], step=header["step"],
                            stage=header["stage"])


def check_same_architecture(a: GroundingModel, b: GroundingModel) -> None:
    """Raise when two models cannot exchange parameters."""
    if a.config != b.config:
        raise CompatibilityError(
            f"model configs differ: {a.config.as_dict()} vs {b.config.as_dict()}")
    if a.vocab.num_bins != b.vocab.num_bins or a.vocab.words != b.vocab.words:
        raise CompatibilityError("vocabularies differ")


def check_vocab_matches(model: GroundingModel, vocab) -> None:
    """Raise when a dataset's vocabulary is not the one baked into a model."""
    if model.vocab.num_bins != vocab.num_bins or model.vocab.words != vocab.words:
        raise CompatibilityError(
            "checkpoint vocabulary does not match the dataset vocabulary")
