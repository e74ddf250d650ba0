"""Target sequences, batching, the optimization step, and stage runners."""

import json

import numpy as np
import pytest

from groundseq.checkpoint import load_checkpoint
from groundseq.data import Sample, generate_dataset, load_dataset
from groundseq.geometry import BBox
from groundseq.model import GroundingModel, ModelConfig
from groundseq.optim import init_adam
from groundseq.training import (TrainConfig, TrainingError, assemble_batch,
                                build_target_sequence, run_finetune, run_overfit,
                                run_pretrain, train_step)
from groundseq.vocab import (BOS, EOS, PAD, TASK_CAPTION, TASK_GROUND,
                             CoordBinSpec, Vocabulary, encode_box)

TINY = ModelConfig(d_model=32, n_heads=2, n_layers_img=1, n_layers_txt=1,
                   n_dec_layers=1, num_bins=64, max_instr_len=12)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(root / "d", n=30, seed=3, caption_frac=0.4, num_bins=64)
    return load_dataset(root / "d")


@pytest.fixture(scope="module")
def model(dataset):
    return GroundingModel.from_seed(TINY, dataset.vocab, seed=1)


def ground_samples(dataset, k):
    out = []
    for sid in dataset.ids("train"):
        if dataset.manifest["samples"][sid]["task"] == "GROUND":
            out.append(dataset.sample(sid))
            if len(out) == k:
                break
    return out


def test_ground_target_sequence_shape(dataset, model):
    s = ground_samples(dataset, 1)[0]
    seq, mask = build_target_sequence(s, model.vocab, model.bin_spec,
                                      model.dec_cfg.max_gen_len)
    assert len(seq) == 7 and len(mask) == 7
    assert seq[0] == BOS and seq[1] == TASK_GROUND and seq[-1] == EOS
    assert seq[2:6] == encode_box(s.box, model.bin_spec, model.vocab)
    assert mask == [False, False, True, True, True, True, True]


def test_caption_target_sequence(model):
    vocab = model.vocab
    s = Sample("c", "CAPTION", "describe the scene", None,
               "a small red circle and a large blue square")
    seq, mask = build_target_sequence(s, vocab, model.bin_spec, 32)
    words = vocab.encode_text(s.caption)
    assert seq == [BOS, TASK_CAPTION] + words + [EOS]
    assert mask == [False, False] + [True] * (len(words) + 1)


def test_overlong_caption_rejected(model):
    s = Sample("c", "CAPTION", "describe the scene", None, "word " * 40)
    with pytest.raises(TrainingError):
        build_target_sequence(s, model.vocab, model.bin_spec,
                              model.dec_cfg.max_gen_len)


def test_assemble_batch_shapes_and_padding(dataset, model):
    samples = ground_samples(dataset, 4)
    batch = assemble_batch(samples, model)
    assert batch.pixels.shape == (4, 128, 128, 3)
    assert batch.dec_in.shape == batch.targets.shape == batch.loss_mask.shape
    assert batch.dec_in.shape[1] == 6  # 7-token grounding sequence, shifted
    assert (batch.dec_in[:, 0] == BOS).all()
    assert (batch.targets[:, -1] == EOS).all()
    assert batch.loss_mask[:, 0].sum() == 0  # task token is never a target
    assert (batch.instr_ids[~batch.instr_valid] == PAD).all()


def test_assemble_batch_rejects_mixed_tasks(dataset, model):
    g = ground_samples(dataset, 1)[0]
    c = Sample("c", "CAPTION", "describe the scene", None, "a small red circle",
               image=g.image)
    with pytest.raises(TrainingError):
        assemble_batch([g, c], model)


def test_train_step_reduces_loss_on_fixed_batch(dataset):
    model = GroundingModel.from_seed(TINY, dataset.vocab, seed=2)
    batch = assemble_batch(ground_samples(dataset, 4), model)
    adam = init_adam(model.params, learning_rate=3e-3)
    losses = [train_step(model, batch, adam, step, learning_rate=3e-3)["loss"]
              for step in range(25)]
    assert losses[-1] < losses[0] * 0.5
    assert all(np.isfinite(l) for l in losses)


def test_train_step_reports_clipping(dataset):
    model = GroundingModel.from_seed(TINY, dataset.vocab, seed=3)
    batch = assemble_batch(ground_samples(dataset, 2), model)
    adam = init_adam(model.params)
    metrics = train_step(model, batch, adam, 1, clip_norm=1e-6)
    assert metrics["clip_fired"]
    assert metrics["grad_norm"] > 1e-6


def test_frozen_parameters_do_not_move(dataset):
    model = GroundingModel.from_seed(TINY, dataset.vocab, seed=4)
    before = {k: v.data.copy() for k, v in model.params.items()}
    batch = assemble_batch(ground_samples(dataset, 2), model)
    adam = init_adam(model.params)
    train_step(model, batch, adam, 1, frozen=lambda n: n.startswith("img."))
    for name, p in model.params.items():
        if name.startswith("img."):
            assert np.array_equal(p.data, before[name]), name
        elif name.startswith("dec.out"):
            assert not np.array_equal(p.data, before[name]), name


def test_non_finite_loss_raises_with_step_number(dataset):
    model = GroundingModel.from_seed(TINY, dataset.vocab, seed=5)
    model.params["dec.out.w"].data[:] = 1e308
    batch = assemble_batch(ground_samples(dataset, 2), model)
    adam = init_adam(model.params)
    from groundseq.tensor import NumericError, set_finite_checks
    prev = set_finite_checks(False)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises((TrainingError, NumericError)):
                train_step(model, batch, adam, 41)
    finally:
        set_finite_checks(prev)


def test_pretrain_starves_without_captions(tmp_path):
    generate_dataset(tmp_path / "d", n=10, seed=2, caption_frac=0.0, num_bins=16)
    ds = load_dataset(tmp_path / "d")
    cfg = ModelConfig(d_model=16, n_heads=2, n_layers_img=1, n_layers_txt=1,
                      n_dec_layers=1, num_bins=16, max_instr_len=12)
    model = GroundingModel.from_seed(cfg, ds.vocab, seed=1)
    with pytest.raises(TrainingError):
        run_pretrain(model, ds, TrainConfig(steps=2, batch_size=2), tmp_path / "run")


def test_metrics_log_fields(dataset, tmp_path):
    model = GroundingModel.from_seed(TINY, dataset.vocab, seed=6)
    cfg = TrainConfig(steps=4, batch_size=2, log_every=2, checkpoint_every=4, seed=0)
    run_pretrain(model, dataset, cfg, tmp_path / "run")
    lines = (tmp_path / "run/metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for line in lines:
        rec = json.loads(line)
        assert set(rec) == {"step", "stage", "task", "loss", "lr", "clip_fired"}
        assert rec["stage"] == "pretrain"
        assert rec["task"] in ("GROUND", "CAPTION")


def test_resume_is_bit_identical(dataset, tmp_path):
    def fresh():
        return GroundingModel.from_seed(TINY, dataset.vocab, seed=7)

    full_cfg = TrainConfig(steps=6, batch_size=2, seed=9, checkpoint_every=100)
    half_cfg = TrainConfig(steps=3, batch_size=2, seed=9, checkpoint_every=100)
    p_full = run_pretrain(fresh(), dataset, full_cfg, tmp_path / "a")
    p_half = run_pretrain(fresh(), dataset, half_cfg, tmp_path / "b")
    bundle = load_checkpoint(p_half)
    p_res = run_pretrain(fresh(), dataset, full_cfg, tmp_path / "b", resume=bundle)
    assert p_full.read_bytes() == p_res.read_bytes()


def test_finetune_uses_grounding_only(dataset, tmp_path):
    model = GroundingModel.from_seed(TINY, dataset.vocab, seed=8)
    cfg = TrainConfig(steps=3, batch_size=2, learning_rate=3e-5, log_every=1,
                      checkpoint_every=3, seed=0)
    run_finetune(model, dataset, cfg, tmp_path / "ft")
    for line in (tmp_path / "ft/metrics.jsonl").read_text().splitlines():
        assert json.loads(line)["task"] == "GROUND"


def test_zero_step_stage_writes_base_checkpoint(dataset, tmp_path):
    model = GroundingModel.from_seed(TINY, dataset.vocab, seed=8)
    before = {k: v.data.copy() for k, v in model.params.items()}
    path = run_finetune(model, dataset, TrainConfig(steps=0, batch_size=2, seed=0),
                        tmp_path / "ft0")
    bundle = load_checkpoint(path)
    assert bundle.step == 0
    for name, arr in before.items():
        assert np.array_equal(bundle.model.params[name].data, arr)


def test_resume_past_target_step_rejected(dataset, tmp_path):
    model = GroundingModel.from_seed(TINY, dataset.vocab, seed=9)
    cfg = TrainConfig(steps=2, batch_size=2, checkpoint_every=2, seed=0)
    path = run_pretrain(model, dataset, cfg, tmp_path / "r")
    bundle = load_checkpoint(path)
    with pytest.raises(TrainingError):
        run_pretrain(model, dataset, TrainConfig(steps=1, batch_size=2, seed=0),
                     tmp_path / "r2", resume=bundle)


def test_run_overfit_reports_exact_matches(dataset):
    model = GroundingModel.from_seed(TINY, dataset.vocab, seed=10)
    samples = ground_samples(dataset, 2)
    out = run_overfit(model, samples, steps=120, learning_rate=3e-3)
    assert out["n"] == 2
    assert len(out["losses"]) == 120
    assert out["losses"][-1] < 0.1
    assert out["exact"] == 2
