"""Command line front end.

Subcommands: gen-data, pretrain, finetune, eval, infer. Options can come from
a flat ``key = value`` config file (# starts a comment); explicit flags win.
The effective configuration is echoed to the run log. Exit codes: 0 success,
1 usage, 2 missing or unreadable files, 3 numeric failure, 4 incompatible
artifacts.
"""

from __future__ import annotations

import argparse
import sys
from datetime import datetime
from pathlib import Path

from .checkpoint import (CheckpointError, CompatibilityError,
                         check_vocab_matches, load_checkpoint)
from .data import (DataError, SceneGenerationError, generate_dataset,
                   load_dataset)
from .evalreport import evaluate, render_overlay, write_overlays
from .imgio import ImageIOError, read_ppm
from .model import GroundingModel, ModelConfig
from .postproc import prediction_record, render_box_text, write_predictions
from .tensor import NumericError
from .training import (TrainConfig, TrainingError, run_finetune, run_pretrain)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3
EXIT_COMPAT = 4

MODEL_KEYS = ("patch_size", "d_model", "n_heads", "n_layers_img", "n_layers_txt",
              "n_dec_layers", "max_instr_len", "max_gen_len", "num_bins")
TRAIN_KEYS = ("steps", "batch_size", "learning_rate", "clip_norm", "log_every",
              "checkpoint_every", "seed")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


class RunLog:
    """Plain lines on stdout, the same lines timestamped in the log file."""

    def __init__(self, path: Path | None) -> None:
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)

    def say(self, message: str) -> None:
        print(message)
        if self.path is not None:
            stamp = datetime.now().isoformat(timespec="seconds")
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(f"[{stamp}] {message}\n")


def parse_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` pairs; values become int, float, bool, or str."""
    values: dict = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise DataError(f"cannot read config {path}: {err}") from err
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = _coerce(value.strip())
    return values


def _coerce(text: str):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _apply_config(args: argparse.Namespace, allowed: tuple[str, ...]) -> None:
    """Fold config-file values into unset args; explicit flags stay put."""
    if not getattr(args, "config", None):
        return
    values = parse_config_file(args.config)
    unknown = set(values) - set(allowed)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)} "
                         f"(allowed: {sorted(allowed)})")
    for key, value in values.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)


def _fill_defaults(args: argparse.Namespace, defaults: dict) -> None:
    for key, value in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)


def _model_config(args: argparse.Namespace) -> ModelConfig:
    return ModelConfig(**{k: getattr(args, k) for k in MODEL_KEYS})


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(**{k: getattr(args, k) for k in TRAIN_KEYS})


def _echo_config(log: RunLog, args: argparse.Namespace, keys: tuple[str, ...]) -> None:
    for key in keys:
        log.say(f"config: {key} = {getattr(args, key)}")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    for key in MODEL_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="groundseq",
                     description="Vision-language grounding as sequence prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--caption-frac", dest="caption_frac", type=float)
    g.add_argument("--num-bins", dest="num_bins", type=int)

    pt = sub.add_parser("pretrain", help="mixed-task training from scratch or --init")
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--config")
    pt.add_argument("--init", help="checkpoint to resume from")
    _add_train_flags(pt)
    _add_model_flags(pt)

    ft = sub.add_parser("finetune", help="grounding-only training from --init")
    ft.add_argument("--data", required=True)
    ft.add_argument("--out", required=True)
    ft.add_argument("--config")
    ft.add_argument("--init", required=True)
    ft.add_argument("--freeze-image-encoder", dest="freeze_image_encoder",
                    action="store_true", default=None)
    _add_train_flags(ft)

    ev = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    ev.add_argument("--data", required=True)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--out", help="directory for predictions and overlays")
    ev.add_argument("--beam", type=int, default=1)
    ev.add_argument("--overlays", type=int, default=0,
                    help="write SVG overlays for the first N samples")

    inf = sub.add_parser("infer", help="one image, one instruction, one box")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--image", required=True)
    inf.add_argument("--instruction", required=True)
    inf.add_argument("--beam", type=int, default=1)
    inf.add_argument("--overlay", help="write an SVG overlay here")
    return parser


def cmd_gen_data(args: argparse.Namespace) -> int:
    _apply_config(args, ("n", "seed", "caption_frac", "num_bins"))
    _fill_defaults(args, {"n": 1000, "seed": 0, "caption_frac": 0.5,
                          "num_bins": 256})
    log = RunLog(Path(args.out) / "run.log")
    _echo_config(log, args, ("out", "n", "seed", "caption_frac", "num_bins"))
    summary = generate_dataset(args.out, n=args.n, seed=args.seed,
                               caption_frac=args.caption_frac,
                               num_bins=args.num_bins)
    log.say(f"wrote {summary['n']} samples: splits {summary['splits']}, "
            f"tasks {summary['tasks']}")
    return EXIT_OK


def _load_for_training(args: argparse.Namespace):
    dataset = load_dataset(args.data)
    if dataset.vocab is None:
        raise DataError(f"{args.data} has no vocab.txt")
    return dataset


def cmd_pretrain(args: argparse.Namespace) -> int:
    _apply_config(args, TRAIN_KEYS + MODEL_KEYS)
    _fill_defaults(args, {"steps": 2000, "batch_size": 16, "learning_rate": 3e-4,
                          "clip_norm": 1.0, "log_every": 50,
                          "checkpoint_every": 500, "seed": 0})
    _fill_defaults(args, {k: getattr(ModelConfig(), k) for k in MODEL_KEYS})
    dataset = _load_for_training(args)
    log = RunLog(Path(args.out) / "run.log")
    _echo_config(log, args, ("data", "out", "init") + TRAIN_KEYS + MODEL_KEYS)

    resume = None
    if args.init:
        resume = load_checkpoint(args.init)
        check_vocab_matches(resume.model, dataset.vocab)
        model = resume.model
        log.say(f"resuming from {args.init} at step {resume.step}")
    else:
        config = _model_config(args)
        if config.num_bins != dataset.num_bins:
            raise CompatibilityError(
                f"model wants {config.num_bins} bins, dataset has {dataset.num_bins}")
        model = GroundingModel.from_seed(config, dataset.vocab, args.seed)
        log.say(f"fresh model with {model.n_parameters()} parameters")

    path = run_pretrain(model, dataset, _train_config(args), args.out,
                        resume=resume, log_fn=lambda r: log.say(f"train: {r}"))
    log.say(f"final checkpoint: {path}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    _apply_config(args, TRAIN_KEYS + ("freeze_image_encoder",))
    _fill_defaults(args, {"steps": 1000, "batch_size": 16, "learning_rate": 3e-5,
                          "clip_norm": 1.0, "log_every": 50,
                          "checkpoint_every": 500, "seed": 0,
                          "freeze_image_encoder": False})
    dataset = _load_for_training(args)
    log = RunLog(Path(args.out) / "run.log")
    _echo_config(log, args, ("data", "out", "init", "freeze_image_encoder")
                 + TRAIN_KEYS)

    bundle = load_checkpoint(args.init)
    check_vocab_matches(bundle.model, dataset.vocab)
    resume = bundle if bundle.stage == "finetune" else None
    if resume is not None:
        log.say(f"resuming finetune from {args.init} at step {bundle.step}")
    path = run_finetune(bundle.model, dataset, _train_config(args), args.out,
                        resume=resume,
                        freeze_image_encoder=bool(args.freeze_image_encoder),
                        log_fn=lambda r: log.say(f"train: {r}"))
    log.say(f"final checkpoint: {path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    bundle = load_checkpoint(args.ckpt)
    if dataset.vocab is not None:
        check_vocab_matches(bundle.model, dataset.vocab)
    model = bundle.model
    out_dir = Path(args.out) if args.out else None
    log = RunLog(out_dir / "run.log" if out_dir else None)
    log.say(f"config: data = {args.data}")
    log.say(f"config: ckpt = {args.ckpt}")
    log.say(f"config: split = {args.split}")
    log.say(f"config: beam = {args.beam}")

    ids = [sid for sid in dataset.ids(args.split)
           if dataset.manifest["samples"][sid]["task"] == "GROUND"]
    if not ids:
        raise DataError(f"split {args.split!r} has no grounding samples")

    records = []
    truth = {}
    overlay_rows = []
    for i, sid in enumerate(ids):
        sample = dataset.sample(sid)
        output = model.predict_box(sample.image, sample.instruction,
                                   beam_width=args.beam)
        records.append(prediction_record(sid, output))
        truth[sid] = sample.box
        if out_dir is not None and i < args.overlays:
            overlay_rows.append({"sample_id": sid, "image": sample.image,
                                 "instruction": sample.instruction,
                                 "predicted": output.box, "truth": sample.box,
                                 "wellformed": output.wellformed})

    result = evaluate(records, truth)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_predictions(out_dir / "predictions.jsonl", records)
        if overlay_rows:
            write_overlays(out_dir / "overlays", overlay_rows)
        log.say(f"wrote {len(records)} predictions to {out_dir}")
    log.say(f"samples={result.n_samples} hits={result.n_hits} "
            f"malformed={result.n_malformed} mean_iou={result.mean_iou:.4f}")
    print(f"AP50={result.ap50:.4f}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    bundle = load_checkpoint(args.ckpt)
    image = read_ppm(args.image)
    output = bundle.model.predict_box(image, args.instruction, beam_width=args.beam)
    if args.overlay:
        svg = render_overlay(image, args.instruction, output.box,
                             wellformed=output.wellformed)
        Path(args.overlay).parent.mkdir(parents=True, exist_ok=True)
        Path(args.overlay).write_text(svg, encoding="utf-8")
    flag = "wellformed" if output.wellformed else "malformed"
    print(f"{render_box_text(output.box)} {flag}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except CompatibilityError as err:
        print(f"compatibility error: {err}", file=sys.stderr)
        return EXIT_COMPAT
    except (NumericError, TrainingError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ImageIOError, CheckpointError, SceneGenerationError,
            OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
