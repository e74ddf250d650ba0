"""Two-stage training: mixed-task pretraining, grounding-only finetuning.

Teacher forcing with a shifted target mask, global-norm clipping at 1.0, Adam.
Every stochastic choice comes from one named generator whose state rides along
in the checkpoint, so a resumed run is bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import seeding
from . import tensor as T
from .checkpoint import CheckpointBundle, save_checkpoint
from .data import Dataset, Sample
from .model import GroundingModel
from .optim import AdamState, adam_step, clip_global_norm, init_adam
from .solver import decoder_logits_batch, generate_greedy
from .vocab import (BOS, EOS, PAD, TASK_CAPTION, TASK_GROUND, CoordBinSpec,
                    Vocabulary, encode_box)


class TrainingError(RuntimeError):
    """Raised when a run cannot proceed (bad data, diverged loss)."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 16
    learning_rate: float = 3e-4
    clip_norm: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        # steps == 0 is legal: the stage just writes its checkpoint, which is
        # how a fresh-init checkpoint gets materialized on disk.
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size positive")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ValueError("log_every and checkpoint_every must be positive")


def build_target_sequence(sample: Sample, vocab: Vocabulary, spec: CoordBinSpec,
                          max_gen_len: int) -> tuple[list[int], list[bool]]:
    """Full decoder sequence and its loss mask. The mask marks which positions
    count as prediction targets; BOS and the task token never do."""
    if sample.task == "GROUND":
        seq = [BOS, TASK_GROUND] + encode_box(sample.box, spec, vocab) + [EOS]
        mask = [False, False] + [True] * 5
    else:
        words = vocab.encode_text(sample.caption)
        seq = [BOS, TASK_CAPTION] + words + [EOS]
        mask = [False, False] + [True] * (len(words) + 1)
    if len(seq) > max_gen_len:
        raise TrainingError(
            f"{sample.sample_id}: target length {len(seq)} exceeds the "
            f"generation budget {max_gen_len}")
    return seq, mask


@dataclass
class Batch:
    pixels: np.ndarray       # [B, H, W, 3]
    instr_ids: np.ndarray    # [B, L]
    instr_valid: np.ndarray  # [B, L]
    dec_in: np.ndarray       # [B, T]
    targets: np.ndarray      # [B, T]
    loss_mask: np.ndarray    # [B, T]


def assemble_batch(samples: list[Sample], model: GroundingModel) -> Batch:
    """Pad a single-task group of samples into rectangular arrays."""
    tasks = {s.task for s in samples}
    if len(tasks) != 1:
        raise TrainingError(f"one batch must carry one task, got {sorted(tasks)}")
    vocab = model.vocab
    max_instr = model.enc_cfg.max_instr_len

    instr = [vocab.encode_text(s.instruction)[:max_instr] for s in samples]
    li = max(len(i) for i in instr)
    instr_ids = np.full((len(samples), li), PAD, dtype=np.int64)
    instr_valid = np.zeros((len(samples), li), dtype=bool)
    for r, ids in enumerate(instr):
        instr_ids[r, :len(ids)] = ids
        instr_valid[r, :len(ids)] = True

    seqs, masks = zip(*(build_target_sequence(s, vocab, model.bin_spec,
                                              model.dec_cfg.max_gen_len)
                        for s in samples))
    lt = max(len(s) for s in seqs) - 1  # shifted length
    dec_in = np.full((len(samples), lt), PAD, dtype=np.int64)
    targets = np.full((len(samples), lt), PAD, dtype=np.int64)
    loss_mask = np.zeros((len(samples), lt), dtype=bool)
    for r, (seq, mask) in enumerate(zip(seqs, masks)):
        n = len(seq) - 1
        dec_in[r, :n] = seq[:-1]
        targets[r, :n] = seq[1:]
        loss_mask[r, :n] = mask[1:]

    pixels = np.stack([s.image.pixels for s in samples])
    return Batch(pixels, instr_ids, instr_valid, dec_in, targets, loss_mask)


def train_step(model: GroundingModel, batch: Batch, optimizer: AdamState,
               step: int, learning_rate: float | None = None,
               clip_norm: float = 1.0,
               frozen: Callable[[str], bool] | None = None) -> dict:
    """One forward/backward/update pass; returns scalar metrics."""
    for p in model.params.values():
        p.grad = None
    with T.Tape():
        memory, mem_valid = model.encode_batch(batch.pixels, batch.instr_ids,
                                               batch.instr_valid)
        logits = decoder_logits_batch(memory, mem_valid, batch.dec_in,
                                      model.dec_cfg, model.params)
        b, t, v = logits.shape
        loss = T.cross_entropy_masked(T.reshape(logits, (b * t, v)),
                                      batch.targets.reshape(-1),
                                      batch.loss_mask.reshape(-1))
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise TrainingError(f"loss is not finite at step {step}")
        T.backward(loss)

    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in model.params.items()}
    if frozen is not None:
        for name in grads:
            if frozen(name):
                grads[name] = np.zeros_like(grads[name])
    norm, fired = clip_global_norm(grads, clip_norm)
    adam_step(model.params, grads, optimizer, learning_rate)
    return {"loss": loss_value, "grad_norm": norm, "clip_fired": fired}


def _task_pools(dataset: Dataset, split: str) -> dict[str, list[str]]:
    pools: dict[str, list[str]] = {"GROUND": [], "CAPTION": []}
    for sid in dataset.ids(split):
        pools[dataset.manifest["samples"][sid]["task"]].append(sid)
    return pools


def _restore_rng(state: dict) -> np.random.Generator:
    bitgen = np.random.PCG64()
    bitgen.state = state
    return np.random.Generator(bitgen)


def _run_stage(stage: str, model: GroundingModel, dataset: Dataset,
               cfg: TrainConfig, out_dir: Path, optimizer: AdamState,
               rng: np.random.Generator, start_step: int, tasks: list[str],
               log_fn: Callable[[dict], None] | None = None,
               frozen: Callable[[str], bool] | None = None) -> Path:
    pools = _task_pools(dataset, "train")
    for task in tasks:
        if not pools[task]:
            raise TrainingError(
                f"{stage} needs {task} samples in the train split, found none")

    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    last_path = out_dir / f"{stage}-last.ckpt"

    def emit(record: dict) -> None:
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        if log_fn is not None:
            log_fn(record)

    def save(step: int) -> None:
        save_checkpoint(last_path, model, optimizer=optimizer,
                        rng_state=rng.bit_generator.state, step=step, stage=stage)

    for step in range(start_step, cfg.steps):
        task = tasks[rng.integers(len(tasks))] if len(tasks) > 1 else tasks[0]
        pool = pools[task]
        idx = rng.integers(0, len(pool), size=cfg.batch_size)
        samples = [dataset.sample(pool[i]) for i in idx]
        batch = assemble_batch(samples, model)
        metrics = train_step(model, batch, optimizer, step + 1,
                             learning_rate=cfg.learning_rate,
                             clip_norm=cfg.clip_norm, frozen=frozen)
        done = step + 1
        if done % cfg.log_every == 0 or done == cfg.steps:
            emit({"step": done, "stage": stage, "task": task,
                  "loss": round(metrics["loss"], 6), "lr": cfg.learning_rate,
                  "clip_fired": metrics["clip_fired"]})
        if done % cfg.checkpoint_every == 0 or done == cfg.steps:
            save(done)
    if cfg.steps == start_step:
        # zero remaining steps: still leave a checkpoint behind
        save(start_step)
    return last_path


def run_pretrain(model: GroundingModel, dataset: Dataset, cfg: TrainConfig,
                 out_dir: str | Path, resume: CheckpointBundle | None = None,
                 log_fn: Callable[[dict], None] | None = None) -> Path:
    """Mixed grounding and captioning over the train split."""
    out_dir = Path(out_dir)
    if resume is not None:
        if resume.stage != "pretrain":
            raise TrainingError(f"cannot resume pretraining from stage "
                                f"{resume.stage!r}")
        model = resume.model
        optimizer = resume.optimizer
        if optimizer is None or resume.rng_state is None:
            raise TrainingError("checkpoint lacks optimizer or generator state")
        rng = _restore_rng(resume.rng_state)
        start = resume.step
    else:
        optimizer = init_adam(model.params, learning_rate=cfg.learning_rate)
        rng = seeding.stream(cfg.seed, "training/pretrain")
        start = 0
    if start > cfg.steps:
        raise TrainingError(f"checkpoint is at step {start}, past {cfg.steps}")
    return _run_stage("pretrain", model, dataset, cfg, out_dir, optimizer, rng,
                      start, ["GROUND", "CAPTION"], log_fn=log_fn)


def run_finetune(model: GroundingModel, dataset: Dataset, cfg: TrainConfig,
                 out_dir: str | Path, resume: CheckpointBundle | None = None,
                 freeze_image_encoder: bool = False,
                 log_fn: Callable[[dict], None] | None = None) -> Path:
    """Grounding-only stage; starts a fresh optimizer unless resuming."""
    out_dir = Path(out_dir)
    frozen = (lambda name: name.startswith("img.")) if freeze_image_encoder else None
    if resume is not None and resume.stage == "finetune":
        model = resume.model
        optimizer = resume.optimizer
        if optimizer is None or resume.rng_state is None:
            raise TrainingError("checkpoint lacks optimizer or generator state")
        rng = _restore_rng(resume.rng_state)
        start = resume.step
    else:
        optimizer = init_adam(model.params, learning_rate=cfg.learning_rate)
        rng = seeding.stream(cfg.seed, "training/finetune")
        start = 0
    if start > cfg.steps:
        raise TrainingError(f"checkpoint is at step {start}, past {cfg.steps}")
    return _run_stage("finetune", model, dataset, cfg, out_dir, optimizer, rng,
                      start, ["GROUND"], log_fn=log_fn, frozen=frozen)


def run_overfit(model: GroundingModel, samples: list[Sample], steps: int = 300,
                learning_rate: float = 1e-3,
                log_fn: Callable[[dict], None] | None = None) -> dict:
    """Hammer one fixed grounding batch; reports the loss curve and how many
    samples the greedy decoder reproduces token for token."""
    batch = assemble_batch(samples, model)
    optimizer = init_adam(model.params, learning_rate=learning_rate)
    losses: list[float] = []
    for step in range(steps):
        metrics = train_step(model, batch, optimizer, step + 1,
                             learning_rate=learning_rate)
        losses.append(metrics["loss"])
        if log_fn is not None and (step + 1) % 20 == 0:
            log_fn({"step": step + 1, "loss": metrics["loss"]})

    exact = 0
    for s in samples:
        want = encode_box(s.box, model.bin_spec, model.vocab)
        memory, mem_valid = model.encode_one(s.image, s.instruction)
        res = generate_greedy(memory, mem_valid, TASK_GROUND, model.dec_cfg,
                              model.params)
        if res.finished and res.tokens == want:
            exact += 1
    return {"losses": losses, "exact": exact, "n": len(samples)}
