"""End-to-end acceptance checks, one test per criterion.

Each test attaches its measured values with ``record_property``; the
conftest prints one PASS/FAIL line per criterion at the end of the run.
"""

import csv
import json
import time

import numpy as np
import pytest

from stablemamba.blocks import build_interleave_schedule
from stablemamba.checkpoint import load_checkpoint, save_checkpoint
from stablemamba.cli import EXIT_NUMERIC, TINY_MODEL, TINY_TRAIN, main
from stablemamba.corruption import (
    SWEEP_COLUMNS,
    block_dct,
    block_idct,
    gaussian_blur,
    jpeg_compress,
    psnr,
    severity_sweep,
    write_sweep_csv,
)
from stablemamba.autodiff import Tensor
from stablemamba.data import natural_test_image, toy_stripes
from stablemamba.gradcheck import CHECKS, TOLERANCE, run_check
from stablemamba.model import ModelConfig, count_flops, count_params, forward, preset
from stablemamba.probe import ProbeConfig, run_selective_copy
from stablemamba.ssm import selective_scan_chunked, selective_scan_sequential, zoh_discretize
from stablemamba.train import TrainConfig, evaluate, train

TABLE1_PARAMS_M = {"T": 7, "S": 27, "M": 76, "B": 101}


def unrolled_sum(a_bar, b_bar, c, u, d):
    """y_t = sum_{s<=t} C_t (prod_{r=s+1..t} A_r) B_s u_s + d u_t, one output step at a time."""
    length = len(u)
    y = np.empty_like(u)
    for t in range(length):
        # weights[s] = prod_{r=s+1..t} a_r, built right to left
        tail = np.cumprod(a_bar[t:0:-1], axis=0)[::-1]
        weights = np.concatenate([tail, np.ones_like(a_bar[:1])]) if t else np.ones_like(a_bar[:1])
        h = (weights * b_bar[:t + 1] * u[:t + 1, :, None]).sum(axis=0)
        y[t] = h @ c[t] + d * u[t]
    return y


@pytest.fixture(scope="module")
def overfit_run():
    """The scaled-tiny configuration trained on the 64-image two-class set."""
    config = ModelConfig(**TINY_MODEL)
    tc = TrainConfig(**TINY_TRAIN)
    data = toy_stripes(64, 32, seed=0)
    t0 = time.perf_counter()
    result = train(config, tc, data)
    return config, tc, data, result, time.perf_counter() - t0


def test_criterion_1_scan_oracle_equivalence(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    lengths = [1, 2, 512] + list(rng.integers(1, 513, size=97))
    worst = 0.0
    for length in lengths:
        d, n = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        a_bar = rng.uniform(0.5, 1.0, (length, d, n))
        b_bar = rng.normal(size=(length, d, n))
        c, u, skip = rng.normal(size=(length, n)), rng.normal(size=(length, d)), rng.normal(size=d)
        chunk = int(rng.integers(1, length + 1))
        seq = selective_scan_sequential(a_bar, b_bar, c, u, skip)
        chunked = selective_scan_chunked(a_bar, b_bar, c, u, skip, chunk)
        oracle = unrolled_sum(a_bar, b_bar, c, u, skip)
        worst = max(worst, np.max(np.abs(chunked - seq)), np.max(np.abs(seq - oracle)),
                    np.max(np.abs(chunked - oracle)))
    seconds = time.perf_counter() - t0
    record_property("instances", len(lengths))
    record_property("max_abs_diff", f"{worst:.2e}")
    assert worst < 1e-10
    assert seconds < 60


def test_criterion_2_zoh_correctness(record_property):
    f64 = np.float64
    a_bar, b_bar = zoh_discretize(Tensor([[-1.0]], dtype=f64), Tensor([[2.0]], dtype=f64), Tensor([[1.0]], dtype=f64))
    err_a = abs(a_bar.data.item() - np.exp(-1.0))
    err_b = abs(b_bar.data.item() - 2 * (1 - np.exp(-1.0)))
    assert abs(a_bar.data.item() - 0.367879) < 1e-6 and abs(b_bar.data.item() - 1.264241) < 1e-6
    branch = 0.0
    for rate in (1e-4, -1e-4):
        series = zoh_discretize(Tensor([[-rate * (1 - 1e-12)]], dtype=f64), Tensor([[1.0]], dtype=f64),
                                Tensor([[1.0]], dtype=f64))[1].data.item()
        exact = zoh_discretize(Tensor([[-rate]], dtype=f64), Tensor([[1.0]], dtype=f64),
                               Tensor([[1.0]], dtype=f64))[1].data.item()
        branch = max(branch, abs(series - exact), abs(series - np.expm1(-rate) / -rate))
    record_property("closed_form_err", f"{max(err_a, err_b):.1e}")
    record_property("branch_gap", f"{branch:.1e}")
    assert err_a < 1e-9 and err_b < 1e-9
    assert branch < 1e-10


def test_criterion_3_gradient_suite(record_property):
    t0 = time.perf_counter()
    required = {"attention", "mlp", "rms_norm", "mamba_layer_fwd", "mamba_layer_bwd", "bidirectional_mamba",
                "mamba_block", "transformer_block", "stable_mamba_stack", "cross_entropy"}
    assert required <= set(CHECKS)
    results = [run_check(name) for name in CHECKS]
    seconds = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    record_property("checks", len(results))
    record_property("worst", f"{worst.name}:{worst.max_rel_error:.1e}")
    record_property("seconds", f"{seconds:.0f}")
    failed = [(r.name, r.max_rel_error) for r in results if not r.max_rel_error < TOLERANCE]
    assert not failed
    assert seconds < 600


def test_criterion_4_footprints(record_property):
    counts = {k: count_params(preset(k)) for k in TABLE1_PARAMS_M}
    for k, target in TABLE1_PARAMS_M.items():
        record_property(f"params_{k}", f"{counts[k] / 1e6:.2f}M")
        assert abs(counts[k] - target * 1e6) <= 0.10 * target * 1e6
    f224 = count_flops(preset("T"), image_size=224)
    f448 = count_flops(preset("T"), image_size=448)
    record_property("flops_T_224", f"{f224 / 1e9:.3f}G")
    record_property("flops_T_448", f"{f448 / 1e9:.3f}G")
    assert abs(f224 - 1.2e9) <= 0.15 * 1.2e9
    assert abs(f448 - 4.5e9) <= 0.15 * 4.5e9


def test_criterion_5_schedule(record_property):
    s = build_interleave_schedule(24, 7, "middle")
    assert (s.n_mamba, s.n_transformer) == (21, 3)
    assert s.pattern == "MMMTMMMM" * 3
    record_property("schedule", str(s))
    for ratio_n in (1, 3, 5, 7, 11):
        variants = [build_interleave_schedule(24, ratio_n, pos) for pos in ("start", "middle", "end")]
        assert len({(v.n_mamba, v.n_transformer) for v in variants}) == 1
        assert variants[0].pattern == ("T" + "M" * ratio_n) * (24 // (ratio_n + 1))
        assert variants[2].pattern == ("M" * ratio_n + "T") * (24 // (ratio_n + 1))


def test_criterion_6_desk_scale_learning(overfit_run, record_property):
    config, tc, data, result, seconds = overfit_run
    top1 = evaluate(config, result.params, data)[0]
    record_property("train_top1", top1)
    record_property("epochs", result.epochs_run)
    record_property("train_seconds", f"{seconds:.0f}")
    assert top1 >= 0.99 and result.epochs_run <= 200 and seconds < 15 * 60

    probe = ProbeConfig(seq_len=256, seed=0)
    _, pr = run_selective_copy(probe)
    record_property("copy_accuracy", f"{pr.accuracy:.3f}")
    record_property("probe_seconds", f"{pr.seconds:.0f}")
    assert pr.accuracy >= 0.95


def test_criterion_7_stability_instrumentation(tmp_path, capsys, record_property):
    config = ModelConfig(**TINY_MODEL)
    tc = TrainConfig(**dict(TINY_TRAIN, total_epochs=4, warmup_epochs=1, target_accuracy=None, hflip=True, seed=5))
    data = toy_stripes(32, seed=2)
    train(config, tc, data, out_dir=tmp_path / "a")
    train(config, tc, data, out_dir=tmp_path / "b")
    for name in ("metrics.csv", "eval.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    record_property("log_rows", len((tmp_path / "a" / "metrics.csv").read_text().splitlines()) - 1)

    code = main(["train", "--out", str(tmp_path / "bad"), "--set", "train.inject_nonfinite_step=3",
                 "train.total_epochs=3", "train.warmup_epochs=1", "data.n_images=32"])
    capsys.readouterr()
    report = json.loads((tmp_path / "bad" / "stability_failure.json").read_text())
    record_property("exit_code", code)
    assert code == EXIT_NUMERIC
    assert report["step"] == 3 and report["grad_norm"] == "inf"


def test_criterion_8_corruption_pipeline(overfit_run, tmp_path, record_property):
    rng = np.random.default_rng(8)
    plane = rng.uniform(0, 255, (64, 64))
    dct_err = np.abs(block_idct(block_dct(plane)) - plane).reshape(8, 8, 8, 8).max(axis=(1, 3)).max()
    assert dct_err < 1e-4

    impulse = np.zeros((1, 65, 65))
    impulse[0, 32, 32] = 1.0
    sums = [gaussian_blur(impulse, s).sum() for s in range(1, 6)]
    assert max(abs(s - 1) for s in sums) < 1e-6

    image = natural_test_image(64)
    for kind in ("gaussian_blur", "jpeg"):
        corrupt = gaussian_blur if kind == "gaussian_blur" else jpeg_compress
        assert np.array_equal(corrupt(image, 0), image)
    curve = [psnr(image, jpeg_compress(image, s)) for s in range(1, 6)]
    record_property("jpeg_psnr", "/".join(f"{p:.1f}" for p in curve))
    assert all(a > b for a, b in zip(curve, curve[1:]))

    config, _, data, result, _ = overfit_run
    held_out = toy_stripes(64, 32, seed=1)
    rows = severity_sweep(config, result.params, held_out, "gaussian_blur")
    path = tmp_path / "sweep.csv"
    write_sweep_csv(rows, path)
    with open(path) as fh:
        table = list(csv.DictReader(fh))
    assert tuple(table[0]) == SWEEP_COLUMNS
    acc = [float(r["accuracy"]) for r in table]
    record_property("blur_accuracy", "/".join(f"{a:.2f}" for a in acc))
    assert [int(r["severity"]) for r in table] == list(range(6))
    assert acc[5] <= acc[0]


def test_criterion_9_checkpoint_roundtrip(overfit_run, tmp_path, record_property):
    config, tc, data, result, _ = overfit_run
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, config, result.params, result.adam, tc.to_dict(), result.epochs_run, result.steps_run,
                    result.rng_state)
    loaded = load_checkpoint(path, expected_config=config)
    held_out = toy_stripes(64, 32, seed=1)
    in_memory = forward(config, result.params, held_out.images).data
    restored = forward(loaded.model_config, loaded.params, held_out.images).data
    assert np.array_equal(in_memory, restored)
    assert evaluate(loaded.model_config, loaded.params, held_out) == evaluate(config, result.params, held_out)

    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(OSError, match="digest"):
        load_checkpoint(path)
    record_property("digests_verified", True)
