"""Command line behavior: config layering, output contracts, exit codes."""

import json
import re
from pathlib import Path

import pytest

from groundseq.cli import (EXIT_COMPAT, EXIT_IO, EXIT_OK, EXIT_USAGE, main,
                           parse_config_file)

TINY_CFG = """
# model small enough for test runs
d_model = 16
n_heads = 2
n_layers_img = 1
n_layers_txt = 1
n_dec_layers = 1
max_instr_len = 12
num_bins = 32       # inline comment
steps = 2
batch_size = 2
log_every = 1
checkpoint_every = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    code = main(["gen-data", "--out", str(root / "ds"), "--n", "20",
                 "--seed", "4", "--caption-frac", "0.4", "--num-bins", "32"])
    assert code == EXIT_OK
    code = main(["pretrain", "--data", str(root / "ds"), "--out",
                 str(root / "pre"), "--config", str(cfg), "--seed", "1"])
    assert code == EXIT_OK
    return root


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("alpha = 3\nbeta = 0.5\ngamma = true\nname = run-a\n# note\n")
    assert parse_config_file(cfg) == {"alpha": 3, "beta": 0.5, "gamma": True,
                                      "name": "run-a"}
    cfg.write_text("no equals sign here\n")
    from groundseq.cli import UsageError
    with pytest.raises(UsageError):
        parse_config_file(cfg)


def test_gen_data_writes_dataset(workspace):
    assert (workspace / "ds/manifest.json").exists()
    assert (workspace / "ds/vocab.txt").exists()
    assert (workspace / "ds/run.log").exists()


def test_pretrain_outputs(workspace):
    assert (workspace / "pre/pretrain-last.ckpt").exists()
    lines = (workspace / "pre/metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0])["step"] == 1


def test_run_log_lines_are_timestamped(workspace):
    for line in (workspace / "pre/run.log").read_text().splitlines():
        assert re.match(r"^\[\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\] ", line)


def test_stdout_carries_no_timestamps(workspace, capsys, tmp_path):
    code = main(["gen-data", "--out", str(tmp_path / "d2"), "--n", "6",
                 "--seed", "5", "--num-bins", "16"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "config: n = 6" in out
    assert not re.search(r"\[\d{4}-\d{2}-\d{2}T", out)


def test_flag_overrides_config(workspace, tmp_path, capsys):
    # config says steps = 2; the flag wins
    code = main(["pretrain", "--data", str(workspace / "ds"), "--out",
                 str(tmp_path / "p"), "--config", str(workspace / "tiny.cfg"),
                 "--steps", "1", "--seed", "1"])
    assert code == EXIT_OK
    assert "config: steps = 1" in capsys.readouterr().out


def test_unknown_config_key_is_usage_error(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("stepz = 3\n")
    code = main(["pretrain", "--data", str(workspace / "ds"), "--out",
                 str(tmp_path / "p"), "--config", str(bad)])
    assert code == EXIT_USAGE


def test_finetune_eval_infer_chain(workspace, tmp_path, capsys):
    code = main(["finetune", "--data", str(workspace / "ds"), "--out",
                 str(tmp_path / "ft"), "--init",
                 str(workspace / "pre/pretrain-last.ckpt"), "--steps", "1",
                 "--batch-size", "2", "--log-every", "1",
                 "--checkpoint-every", "1", "--freeze-image-encoder"])
    assert code == EXIT_OK
    ckpt = tmp_path / "ft/finetune-last.ckpt"
    assert ckpt.exists()
    capsys.readouterr()

    code = main(["eval", "--data", str(workspace / "ds"), "--ckpt", str(ckpt),
                 "--split", "train", "--out", str(tmp_path / "ev"),
                 "--overlays", "1"])
    assert code == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert re.fullmatch(r"AP50=\d\.\d{4}", out[-1])
    assert (tmp_path / "ev/predictions.jsonl").exists()

    image = next((workspace / "ds/images").iterdir())
    code = main(["infer", "--ckpt", str(ckpt), "--image", str(image),
                 "--instruction", "stop near the red circle",
                 "--overlay", str(tmp_path / "o.svg")])
    assert code == EXIT_OK
    line = capsys.readouterr().out.strip()
    assert re.fullmatch(
        r"\(-?\d+\.\d, -?\d+\.\d, -?\d+\.\d, -?\d+\.\d\) (wellformed|malformed)",
        line)
    assert (tmp_path / "o.svg").read_text().startswith("<svg")


def test_usage_errors_exit_one(capsys):
    assert main(["eval", "--data", "somewhere"]) == EXIT_USAGE
    assert main(["bogus-command"]) == EXIT_USAGE
    capsys.readouterr()


def test_missing_files_exit_two(workspace, tmp_path, capsys):
    assert main(["eval", "--data", str(tmp_path / "nope"), "--ckpt",
                 str(workspace / "pre/pretrain-last.ckpt")]) == EXIT_IO
    assert main(["infer", "--ckpt", str(tmp_path / "nope.ckpt"), "--image",
                 "x.ppm", "--instruction", "hi"]) == EXIT_IO
    capsys.readouterr()


def test_vocab_mismatch_exits_four(workspace, tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path / "other"), "--n", "8",
                 "--seed", "77", "--num-bins", "16"])
    assert code == EXIT_OK
    code = main(["eval", "--data", str(tmp_path / "other"), "--ckpt",
                 str(workspace / "pre/pretrain-last.ckpt")])
    assert code == EXIT_COMPAT
    capsys.readouterr()
