"""Command-line entry point: ``stablemamba <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric or
stability failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .autodiff import NumericError
from .blocks import POSITIONS, ConfigError, build_interleave_schedule
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corruption import KINDS, severity_sweep, write_sweep_csv
from .data import ImageDataset, load_image_dir, save_image_dir, toy_stripes
from .gradcheck import CHECKS, run_check
from .model import PRESET_NAMES, PRESETS, ModelConfig, count_flops, count_params, preset
from .plotting import plot_csv
from .probe import ProbeConfig, run_selective_copy
from .train import StabilityError, TrainConfig, evaluate, train

log = logging.getLogger("stablemamba")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

# Small enough to train on a laptop CPU in minutes.
TINY_MODEL = dict(embed_dim=32, depth=8, n_heads=2, patch_size=8, image_size=32, n_classes=2)
TINY_TRAIN = dict(lr=2e-3, weight_decay=0.05, warmup_epochs=5, total_epochs=200, batch_size=16,
                  eval_every=5, target_accuracy=1.0)
DATA_DEFAULTS = dict(source="toy", n_images=64, image_size=32, seed=0, eval_source="same", eval_seed=1)
SECTIONS = ("model", "train", "data", "probe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def default_config(preset_name: str | None = None) -> dict[str, dict[str, Any]]:
    model = preset(preset_name).to_dict() if preset_name else ModelConfig(**TINY_MODEL).to_dict()
    return {
        "model": model,
        "train": TrainConfig(**TINY_TRAIN).to_dict(),
        "data": dict(DATA_DEFAULTS),
        "probe": ProbeConfig().to_dict(),
    }


def apply_overrides(cfg: dict[str, dict[str, Any]], pairs: Sequence[str]) -> dict[str, dict[str, Any]]:
    """``section.key=value`` assignments; unknown sections or keys are errors."""
    cfg = copy.deepcopy(cfg)
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        section, dot, name = key.partition(".")
        if not dot or section not in cfg:
            raise ConfigError(f"override key {key!r} must be one of {list(SECTIONS)} followed by .field")
        if name not in cfg[section]:
            raise ConfigError(f"unknown key {key!r}; known {section} keys: {sorted(cfg[section])}")
        cfg[section][name] = _parse_value(value)
    return cfg


def merge_file(cfg: dict[str, dict[str, Any]], path: str) -> dict[str, dict[str, Any]]:
    loaded = json.loads(Path(path).read_text())
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be an object with sections {list(SECTIONS)}")
    pairs = []
    for section, values in loaded.items():
        if section not in cfg or not isinstance(values, dict):
            raise ConfigError(f"{path}: unknown section {section!r}; expected {list(SECTIONS)}")
        pairs += [f"{section}.{k}={json.dumps(v)}" for k, v in values.items()]
    return apply_overrides(cfg, pairs)


def effective_config(args) -> dict[str, dict[str, Any]]:
    cfg = default_config(getattr(args, "preset", None))
    if getattr(args, "config", None):
        cfg = merge_file(cfg, args.config)
    cfg = apply_overrides(cfg, getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
        cfg["probe"]["seed"] = args.seed
    ModelConfig.from_dict(cfg["model"])
    TrainConfig.from_dict(cfg["train"])
    ProbeConfig.from_dict(cfg["probe"])
    return cfg


def echo_config(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


def load_dataset(data: dict[str, Any], which: str = "train") -> ImageDataset:
    unknown = set(data) - set(DATA_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown data keys: {sorted(unknown)}")
    source = data["source"] if which == "train" else data["eval_source"]
    if which == "eval" and source == "same":
        return load_dataset(data, "train")
    if source == "toy":
        seed = data["seed"] if which == "train" else data["eval_seed"]
        return toy_stripes(int(data["n_images"]), int(data["image_size"]), int(seed))
    return load_image_dir(source)


# ---------------------------------------------------------------------------
# subcommands


def _write_rows(rows: list[dict], columns: Sequence[str], path: Path | None = None) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r[c] for c in columns])
    if path is not None:
        with open(path, "w", newline="") as fh:
            fw = csv.writer(fh, lineterminator="\n")
            fw.writerow(columns)
            for r in rows:
                fw.writerow([r[c] for c in columns])


def cmd_train(args) -> int:
    cfg = effective_config(args)
    out = Path(args.out)
    echo_config(cfg, out, "train")
    model_config = ModelConfig.from_dict(cfg["model"])
    train_config = TrainConfig.from_dict(cfg["train"])
    dataset = load_dataset(cfg["data"], "train")
    eval_set = load_dataset(cfg["data"], "eval")

    def on_checkpoint(tag, result, epoch):
        save_checkpoint(out / f"{tag}.ckpt", model_config, result.params, result.adam, train_config.to_dict(),
                        epoch, result.steps_run, result.rng_state, {"top1": result.best_top1})

    try:
        result = train(model_config, train_config, dataset, out, eval_set, on_checkpoint)
    except StabilityError as e:
        (out / "stability_failure.json").write_text(json.dumps(e.report(), indent=2) + "\n")
        print(f"stability failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if (out / "metrics.csv").exists():
            with contextlib.suppress(ValueError):
                plot_csv(out / "metrics.csv", out / "loss.svg")
    summary = {"best_top1": result.best_top1, "best_epoch": result.best_epoch,
               "epochs_run": result.epochs_run, "steps_run": result.steps_run}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _write_rows([summary], list(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(cfg["data"], "eval")
    top1, n_correct, n_total = evaluate(ckpt.model_config, ckpt.params, dataset)
    row = {"top1": top1, "n_correct": n_correct, "n_total": n_total}
    out = None
    if args.out:
        out = Path(args.out)
        echo_config(cfg, out, "eval")
        out = out / "eval_result.csv"
    _write_rows([row], list(row), out)
    return EXIT_OK


def cmd_corrupt_eval(args) -> int:
    cfg = effective_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(cfg["data"], "eval")
    out = Path(args.out)
    echo_config(cfg, out, "corrupt-eval")
    kinds = KINDS if args.kind == "all" else (args.kind,)
    for kind in kinds:
        dump = out / f"dump_{kind}" if args.dump else None
        rows = severity_sweep(ckpt.model_config, ckpt.params, dataset, kind, dump_dir=dump)
        path = out / f"sweep_{kind}.csv"
        write_sweep_csv(rows, path)
        plot_csv(path, path.with_suffix(".svg"))
        print(f"# {kind}")
        _write_rows(rows, ("severity", "accuracy", "n_correct", "n_total", "parameter"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = list(CHECKS) if args.all or not args.block else args.block
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown block(s) {unknown}; registered: {list(CHECKS)}")
    rows, ok = [], True
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["block", "max_rel_error", "passed", "seconds"])
    for name in names:
        r = run_check(name, seed=args.seed or 0)
        ok &= r.passed
        w.writerow([name, f"{r.max_rel_error:.3e}", r.passed, f"{r.seconds:.1f}"])
        sys.stdout.flush()
        rows.append(r)
    return EXIT_OK if ok else EXIT_NUMERIC


def _preset_keys(args) -> list[str]:
    return [args.preset.upper()] if args.preset else list(PRESETS)


def cmd_params(args) -> int:
    rows = []
    for key in _preset_keys(args):
        c = preset(key)
        rows.append({"model": PRESET_NAMES[key], "embed_dim": c.embed_dim, "depth": c.depth,
                     "params_M": f"{count_params(c) / 1e6:.2f}", "flops_G": f"{count_flops(c) / 1e9:.2f}"})
    _write_rows(rows, list(rows[0]))
    return EXIT_OK


def cmd_flops(args) -> int:
    sizes = args.image_size or [224, 448]
    rows = []
    for key in _preset_keys(args):
        c = preset(key)
        for s in sizes:
            if s % c.patch_size:
                raise ConfigError(f"image size {s} is not divisible by patch_size {c.patch_size}")
            rows.append({"model": PRESET_NAMES[key], "image_size": s, "tokens": c.n_patches(s) + 1,
                         "flops_G": f"{count_flops(c, image_size=s) / 1e9:.3f}"})
    _write_rows(rows, list(rows[0]))
    return EXIT_OK


def cmd_schedule(args) -> int:
    if args.preset:
        c = preset(args.preset)
        depth, ratio, position = c.depth, c.ratio_n, c.transformer_position
    else:
        depth, ratio, position = args.depth, args.ratio, args.position
    s = build_interleave_schedule(depth, ratio, position)
    print(str(s))
    if args.detail:
        print(f"pattern={s.pattern} mamba={s.n_mamba} transformer={s.n_transformer}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = effective_config(args)
    out = Path(args.out)
    echo_config(cfg, out, "synth")
    if args.task == "stripes":
        d = cfg["data"]
        save_image_dir(toy_stripes(int(d["n_images"]), int(d["image_size"]), int(d["seed"])), out)
        print(f"wrote {d['n_images']} images and labels.csv to {out}")
        return EXIT_OK
    probe_config = ProbeConfig.from_dict(cfg["probe"])
    _, result = run_selective_copy(probe_config)
    with open(out / "probe_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows([i, repr(v)] for i, v in enumerate(result.losses))
    plot_csv(out / "probe_loss.csv", out / "probe_loss.svg")
    row = {"task": "selective_copy", "seq_len": probe_config.seq_len, "accuracy": result.accuracy,
           "steps": result.steps_run, "seconds": f"{result.seconds:.1f}"}
    (out / "probe_result.json").write_text(json.dumps(row, indent=2) + "\n")
    _write_rows([row], list(row))
    return EXIT_OK


def cmd_plot(args) -> int:
    path = plot_csv(args.csv, args.out)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out_default: str | None = None) -> None:
    p.add_argument("--config", help="JSON file with model/train/data/probe sections")
    p.add_argument("--set", nargs="+", metavar="K=V", action="extend", default=[],
                   help="override a config field, e.g. train.lr=1e-3 (repeatable)")
    p.add_argument("--seed", type=int, help="seed for training and data order")
    p.add_argument("--out", default=out_default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stablemamba", description="Interleaved Mamba/attention models at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a classifier and write metrics and checkpoints")
    _common(p, "runs/train")
    p.add_argument("--preset", choices=list(PRESETS), help="start from a named model preset")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("corrupt-eval", help="accuracy versus corruption severity")
    _common(p, "runs/corrupt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=[*KINDS, "all"], default="all")
    p.add_argument("--dump", action="store_true", help="also write the corrupted images as PNG")
    p.set_defaults(func=cmd_corrupt_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every block")
    p.add_argument("--all", action="store_true", help="run every registered check (default)")
    p.add_argument("--block", nargs="+", help="run only these checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts of the presets")
    p.add_argument("--preset", choices=list(PRESETS))
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("flops", help="forward FLOPs of the presets")
    p.add_argument("--preset", choices=list(PRESETS))
    p.add_argument("--image-size", type=int, action="append")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("schedule", help="print the interleaved layer pattern")
    p.add_argument("--depth", type=int, default=24)
    p.add_argument("--ratio", type=int, default=7, help="Mamba blocks per Transformer block")
    p.add_argument("--position", choices=POSITIONS, default="middle")
    p.add_argument("--preset", choices=list(PRESETS))
    p.add_argument("--detail", action="store_true", help="also print the full pattern and block counts")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("synth", help="selective-copy probe, or write the toy image set")
    _common(p, "runs/synth")
    p.add_argument("--task", choices=["copy", "stripes"], default="copy")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plot", help="render a metrics or sweep CSV as an SVG line chart")
    p.add_argument("csv")
    p.add_argument("--out", help="SVG path (default: next to the CSV)")
    p.set_defaults(func=cmd_plot)
    return parser


@contextlib.contextmanager
def thread_limit():
    """Honour ``STABLEMAMBA_THREADS`` (0 means one thread, fully deterministic)."""
    value = os.environ.get("STABLEMAMBA_THREADS")
    if value is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    n = int(value)
    with threadpool_limits(limits=max(n, 1)):
        yield


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"stablemamba: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except (StabilityError, NumericError, FloatingPointError) as e:
        print(f"stablemamba: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, ValueError, KeyError) as e:
        print(f"stablemamba: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError) as e:
        print(f"stablemamba: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
