import csv
import json
import subprocess
import sys

import pytest

from stablemamba.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

SUBCOMMANDS = ["train", "eval", "corrupt-eval", "gradcheck", "params", "flops", "schedule", "synth", "plot"]
FAST = ["model.embed_dim=16", "model.depth=2", "model.ratio_n=1", "model.d_state=4",
        "train.total_epochs=3", "train.warmup_epochs=1", "train.eval_every=1", "train.batch_size=8",
        "data.n_images=16"]


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_help_exits_zero_without_side_effects(command, in_tmp, capsys):
    code, out, _ = run([command, "--help"], capsys)
    assert code == EXIT_OK
    assert "usage" in out
    assert list(in_tmp.iterdir()) == []


def test_usage_errors(capsys):
    assert run([], capsys)[0] == EXIT_USAGE
    assert run(["fly"], capsys)[0] == EXIT_USAGE
    assert run(["schedule", "--depth", "x"], capsys)[0] == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK


def test_params_tiny(capsys):
    code, out, _ = run(["params", "--preset", "T"], capsys)
    assert code == EXIT_OK
    row = list(csv.DictReader(out.splitlines()))[0]
    assert row["model"] == "StableMamba-T"
    assert abs(float(row["params_M"]) - 7) <= 0.7


def test_params_all_presets(capsys):
    rows = list(csv.DictReader(run(["params"], capsys)[1].splitlines()))
    assert [r["model"] for r in rows] == ["StableMamba-T", "StableMamba-S", "StableMamba-M", "StableMamba-B"]


def test_flops(capsys):
    code, out, _ = run(["flops", "--preset", "T"], capsys)
    rows = list(csv.DictReader(out.splitlines()))
    assert code == EXIT_OK
    assert [int(r["image_size"]) for r in rows] == [224, 448]
    assert [int(r["tokens"]) for r in rows] == [197, 785]
    assert run(["flops", "--image-size", "100"], capsys)[0] == EXIT_USAGE


def test_schedule(capsys):
    code, out, _ = run(["schedule", "--depth", "24", "--ratio", "7", "--position", "middle"], capsys)
    assert code == EXIT_OK and out.strip() == "MMMTMMMM×3"
    out = run(["schedule", "--depth", "8", "--ratio", "7", "--position", "end", "--detail"], capsys)[1]
    assert "pattern=MMMMMMMT mamba=7 transformer=1" in out
    code, _, err = run(["schedule", "--depth", "10", "--ratio", "7"], capsys)
    assert code == EXIT_USAGE and "10" in err


def test_unknown_override_key_rejected(in_tmp, capsys):
    code, _, err = run(["train", "--set", "train.momentum=0.9"], capsys)
    assert code == EXIT_USAGE and "momentum" in err
    assert run(["train", "--set", "optim.lr=1"], capsys)[0] == EXIT_USAGE
    assert run(["train", "--set", "train.lr"], capsys)[0] == EXIT_USAGE
    assert run(["train", "--set", "data.colour=1"], capsys)[0] == EXIT_USAGE


def test_config_file_errors(in_tmp, capsys):
    (in_tmp / "bad.json").write_text(json.dumps({"model": {"embed_dim": 16, "width": 2}}))
    assert run(["train", "--config", "bad.json"], capsys)[0] == EXIT_USAGE
    (in_tmp / "sec.json").write_text(json.dumps({"optimizer": {}}))
    assert run(["train", "--config", "sec.json"], capsys)[0] == EXIT_USAGE
    assert run(["train", "--config", "missing.json"], capsys)[0] == EXIT_IO


def test_missing_and_corrupt_checkpoint(in_tmp, capsys):
    assert run(["eval", "--checkpoint", "nope.ckpt"], capsys)[0] == EXIT_IO
    (in_tmp / "junk.ckpt").write_bytes(b"junk")
    assert run(["eval", "--checkpoint", "junk.ckpt"], capsys)[0] == EXIT_IO


def test_stability_failure_exit_code(in_tmp, capsys):
    code, _, err = run(["train", "--out", "run", "--set", *FAST, "train.inject_nonfinite_step=2"], capsys)
    assert code == EXIT_NUMERIC
    report = json.loads((in_tmp / "run" / "stability_failure.json").read_text())
    assert report["step"] == 2 and report["where"] == "gradient"
    assert (in_tmp / "run" / "loss.svg").exists()


def test_train_eval_corrupt_plot_workflow(in_tmp, capsys):
    code, out, _ = run(["train", "--out", "run", "--seed", "3", "--set", *FAST], capsys)
    assert code == EXIT_OK
    run_dir = in_tmp / "run"
    for name in ("config.json", "metrics.csv", "eval.csv", "loss.svg", "best.ckpt", "last.ckpt", "summary.json"):
        assert (run_dir / name).exists(), name
    echoed = json.loads((run_dir / "config.json").read_text())
    assert echoed["train"]["seed"] == 3 and echoed["model"]["embed_dim"] == 16
    summary = json.loads((run_dir / "summary.json").read_text())

    code, out, _ = run(["eval", "--checkpoint", "run/best.ckpt", "--set", *FAST], capsys)
    assert code == EXIT_OK
    assert float(list(csv.DictReader(out.splitlines()))[0]["top1"]) == summary["best_top1"]

    code, out, _ = run(["corrupt-eval", "--checkpoint", "run/best.ckpt", "--kind", "gaussian_blur", "--out", "sweep",
                        "--dump", "--set", *FAST], capsys)
    assert code == EXIT_OK
    with open(in_tmp / "sweep" / "sweep_gaussian_blur.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["severity"]) for r in rows] == list(range(6))
    assert float(rows[0]["accuracy"]) == summary["best_top1"]
    assert (in_tmp / "sweep" / "sweep_gaussian_blur.svg").read_text().lstrip().startswith("<?xml")
    assert len(list((in_tmp / "sweep" / "dump_gaussian_blur" / "s3").glob("*.png"))) == 16

    code, out, _ = run(["plot", "run/eval.csv", "--out", "eval.svg"], capsys)
    assert code == EXIT_OK and (in_tmp / "eval.svg").exists()


def test_plot_is_deterministic(in_tmp, capsys):
    (in_tmp / "m.csv").write_text("step,epoch,lr,loss,grad_norm\n0,0,0.0,1.0,2.0\n1,0,0.1,0.5,1.0\n")
    run(["plot", "m.csv", "--out", "a.svg"], capsys)
    run(["plot", "m.csv", "--out", "b.svg"], capsys)
    assert (in_tmp / "a.svg").read_bytes() == (in_tmp / "b.svg").read_bytes()
    (in_tmp / "odd.csv").write_text("x,y\n1,2\n")
    assert run(["plot", "odd.csv"], capsys)[0] == EXIT_USAGE
    assert run(["plot", "absent.csv"], capsys)[0] == EXIT_IO


def test_synth_stripes_then_train_from_directory(in_tmp, capsys):
    assert run(["synth", "--task", "stripes", "--out", "imgs", "--set", "data.n_images=8"], capsys)[0] == EXIT_OK
    assert (in_tmp / "imgs" / "labels.csv").exists()
    code, _, _ = run(["train", "--out", "run", "--set", *FAST, "data.source=imgs", "train.total_epochs=2"], capsys)
    assert code == EXIT_OK


def test_synth_copy_small(in_tmp, capsys):
    code, out, _ = run(["synth", "--out", "probe", "--set", "probe.seq_len=16", "probe.stages=[[16,4]]",
                        "probe.eval_samples=8", "probe.depth=1", "probe.d_model=8"], capsys)
    assert code == EXIT_OK
    result = json.loads((in_tmp / "probe" / "probe_result.json").read_text())
    assert 0 <= result["accuracy"] <= 1 and result["steps"] == 4
    assert (in_tmp / "probe" / "probe_loss.svg").exists()


def test_gradcheck_single_block(capsys):
    code, out, _ = run(["gradcheck", "--block", "rms_norm", "mlp"], capsys)
    rows = list(csv.DictReader(out.splitlines()))
    assert code == EXIT_OK
    assert [r["block"] for r in rows] == ["rms_norm", "mlp"]
    assert all(r["passed"] == "True" for r in rows)
    assert run(["gradcheck", "--block", "conv3d"], capsys)[0] == EXIT_USAGE


def test_thread_limit_env(monkeypatch, capsys):
    monkeypatch.setenv("STABLEMAMBA_THREADS", "0")
    assert run(["schedule"], capsys)[0] == EXIT_OK


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "stablemamba.cli", "schedule"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "MMMTMMMM×3"
