"""Registry of finite-difference gradient checks, one per differentiable block.

Each check builds a float64 instance, projects the output onto a fixed
random direction to get a scalar, and compares tape gradients with central
differences. Parameters are moved off the stock initialisation first: at
init many SSM gradients are around 1e-9, below the central-difference noise
floor, which would measure rounding rather than the backward rules.

Deep compositions get a smaller perturbation. With h fixed at 1e-4 the
error there is dominated by the O(h^2) truncation term, which grows with
the curvature a larger random offset induces through 24 layers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (
    build_interleave_schedule,
    init_attention,
    init_mamba_block,
    init_mlp,
    init_transformer_block,
    mamba_block,
    mlp,
    self_attention,
    stable_mamba_stack,
    transformer_block,
)
from .model import ModelConfig, forward, init_params
from .params import map_tensors, named_parameters, parameters
from .train import cross_entropy
from .ssm import bidirectional_mamba, fused_selective_scan, init_bidir, init_mamba_layer, mamba_layer

TOLERANCE = 1e-4
F64 = np.float64


def generic_point(obj, rng: np.random.Generator, scale: float = 0.3):
    """Copy of a parameter tree with noise added and step-size biases of order one."""
    obj = map_tensors(obj, lambda t: Tensor(t.data.astype(F64) + rng.normal(0, scale, t.shape)))
    for name, t in named_parameters(obj):
        if name.endswith("b_delta"):
            t.data = rng.normal(0, 0.5, t.shape)
    return obj


def _projected(f: Callable[[], Tensor], shape, rng) -> Callable[..., Tensor]:
    r = rng.normal(size=shape)
    return lambda *_: ad.tsum(f() * r)


@dataclass
class Check:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]
    max_per_input: int | None = None


def _attention(rng):
    p = generic_point(init_attention(rng, 8, 2, F64), rng)
    x = Tensor(rng.normal(size=(5, 8)))
    return _projected(lambda: self_attention(x, p), (5, 8), rng), [x] + parameters(p)


def _mlp(rng):
    p = generic_point(init_mlp(rng, 6, F64), rng)
    x = Tensor(rng.normal(size=(4, 6)))
    return _projected(lambda: mlp(x, p), (4, 6), rng), [x] + parameters(p)


def _rms_norm(rng):
    x = Tensor(rng.normal(size=(3, 7)))
    g = Tensor(rng.normal(size=7))
    return _projected(lambda: ad.rms_norm(x, g, 1e-6), (3, 7), rng), [x, g]


def _selective_scan(rng):
    u = Tensor(rng.normal(size=(2, 9, 5)))
    delta = Tensor(rng.uniform(0.05, 1.5, size=(2, 9, 5)))
    a_log = Tensor(rng.normal(0, 0.5, size=(5, 3)))
    b, c = Tensor(rng.normal(size=(2, 9, 3))), Tensor(rng.normal(size=(2, 9, 3)))
    d = Tensor(rng.normal(size=5))
    return _projected(lambda: fused_selective_scan(u, delta, a_log, b, c, d, chunk_len=3), (2, 9, 5), rng), \
        [u, delta, a_log, b, c, d]


def _mamba_layer(direction):
    def build(rng):
        p = generic_point(init_mamba_layer(rng, 6, d_state=4, dtype=F64), rng)
        x = Tensor(rng.normal(size=(7, 6)))
        return _projected(lambda: mamba_layer(x, p, direction), (7, 6), rng), [x] + parameters(p)
    return build


def _bidir(rng):
    p = generic_point(init_bidir(rng, 6, d_state=4, dtype=F64), rng)
    x = Tensor(rng.normal(size=(7, 6)))
    return _projected(lambda: bidirectional_mamba(x, p), (7, 6), rng), [x] + parameters(p)


def _mamba_block(rng):
    p = generic_point(init_mamba_block(rng, 8, d_state=4, dtype=F64), rng)
    x = Tensor(rng.normal(size=(6, 8)))
    return _projected(lambda: mamba_block(x, p), (6, 8), rng), [x] + parameters(p)


def _transformer_block(rng):
    p = generic_point(init_transformer_block(rng, 8, 2, F64), rng)
    x = Tensor(rng.normal(size=(6, 8)))
    return _projected(lambda: transformer_block(x, p), (6, 8), rng), [x] + parameters(p)


def _stack(rng):
    # the full 24-layer 1:7 stack at tiny width
    schedule = build_interleave_schedule(24, 7, "middle")
    blocks = [init_transformer_block(rng, 32, 2, F64) if k == "T" else init_mamba_block(rng, 32, dtype=F64)
              for k in schedule.kinds]
    blocks = generic_point(blocks, rng, scale=0.1)
    x = Tensor(rng.normal(size=(16, 32)))
    return _projected(lambda: stable_mamba_stack(x, schedule, blocks), (16, 32), rng), [x] + parameters(blocks)


def _model(rng):
    config = ModelConfig(embed_dim=32, depth=8, n_heads=2, patch_size=8, image_size=32, n_classes=3)
    p = generic_point(init_params(config, 0, F64), rng, scale=0.2)
    images = rng.uniform(size=(2, 3, 32, 32))
    return _projected(lambda: forward(config, p, images), (2, 3), rng), parameters(p)


def _cross_entropy(rng):
    logits = Tensor(rng.normal(size=(4, 5)))
    labels = rng.integers(0, 5, size=4)
    return (lambda *_: cross_entropy(logits, labels, smoothing=0.1)), [logits]


CHECKS: dict[str, Check] = {c.name: c for c in [
    Check("rms_norm", _rms_norm),
    Check("attention", _attention),
    Check("mlp", _mlp),
    Check("cross_entropy", _cross_entropy),
    Check("selective_scan", _selective_scan),
    Check("mamba_layer_fwd", _mamba_layer("fwd")),
    Check("mamba_layer_bwd", _mamba_layer("bwd")),
    Check("bidirectional_mamba", _bidir),
    Check("mamba_block", _mamba_block),
    Check("transformer_block", _transformer_block),
    Check("stable_mamba_stack", _stack, max_per_input=3),
    Check("model_forward", _model, max_per_input=2),
]}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_check(name: str, seed: int = 0, h: float = 1e-4) -> CheckResult:
    check = CHECKS[name]
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    fn, inputs = check.build(rng)
    err = ad.finite_diff_check(fn, inputs, h=h, max_per_input=check.max_per_input, rng=rng)
    return CheckResult(name, err, time.perf_counter() - t0)
