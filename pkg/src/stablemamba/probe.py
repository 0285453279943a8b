"""Token-level Mamba stack trained on the selective-copy task."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import NORM_EPS, MambaBlockParams, init_mamba_block, mamba_block
from .data import CopyTask, synth_selective_copy
from .params import named_parameters
from .blocks import ConfigError
from .train import adamw_step, cross_entropy, decay_mask_for, init_adam

log = logging.getLogger(__name__)


@dataclass
class ProbeConfig:
    seq_len: int = 256
    n_tokens: int = 8
    n_marked: int = 2
    d_model: int = 64
    depth: int = 4
    d_state: int = 8
    mamba_ffn: bool = False
    # length curriculum: [length, max steps] stages, the last one at seq_len
    stages: list = field(default_factory=lambda: [[32, 600], [64, 200], [128, 200], [256, 200]])
    batch_size: int = 8
    lr: float = 3e-3
    warmup_steps: int = 30
    weight_decay: float = 0.0
    eval_samples: int = 256
    seed: int = 0
    # a stage ends early once a running window of train batches is this accurate
    stage_accuracy: float = 0.98
    window: int = 10

    def __post_init__(self):
        if not self.stages or self.stages[-1][0] != self.seq_len:
            raise ConfigError(f"the last curriculum stage must run at seq_len={self.seq_len}, got {self.stages}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ProbeConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ProbeConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TokenModel:
    embed: Tensor  # [V, D]
    blocks: list[MambaBlockParams]
    norm_f: Tensor
    head_w: Tensor  # [D, n_tokens]
    head_b: Tensor


def init_token_model(config: ProbeConfig, vocab: int, dtype=np.float32) -> TokenModel:
    rng = np.random.default_rng(config.seed)
    d = config.d_model
    return TokenModel(
        embed=Tensor(rng.normal(0, 1.0, (vocab, d)).astype(dtype)),
        blocks=[init_mamba_block(rng, d, config.d_state, with_ffn=config.mamba_ffn, dtype=dtype)
                for _ in range(config.depth)],
        norm_f=Tensor(np.ones(d, dtype)),
        head_w=Tensor(rng.normal(0, 0.02, (d, config.n_tokens)).astype(dtype)),
        head_b=Tensor(np.zeros(config.n_tokens, dtype)),
    )


def token_logits(model: TokenModel, tokens: np.ndarray, n_out: int) -> Tensor:
    """Logits over data tokens (class ``k`` is token ``k + 1``) at the last ``n_out`` positions."""
    z = ad.take_rows(model.embed, tokens)
    for block in model.blocks:
        z = mamba_block(z, block)
    z = ad.rms_norm(z[..., -n_out:, :], model.norm_f, NORM_EPS)
    return z @ model.head_w + model.head_b


def copy_accuracy(model: TokenModel, task: CopyTask, batch_size: int = 32) -> float:
    correct = 0
    for s in range(0, len(task), batch_size):
        logits = token_logits(model, task.tokens[s:s + batch_size], task.n_marked).data
        correct += int(np.sum(np.argmax(logits, axis=-1) + 1 == task.targets[s:s + batch_size]))
    return correct / task.targets.size


@dataclass
class ProbeResult:
    accuracy: float
    steps_run: int
    seconds: float
    losses: list[float] = field(default_factory=list)


def _lr(step: int, config: ProbeConfig) -> float:
    return config.lr * min(1.0, (step + 1) / config.warmup_steps)


def run_selective_copy(config: ProbeConfig) -> tuple[TokenModel, ProbeResult]:
    """Train on freshly sampled batches through the length curriculum, then score held-out sequences."""
    vocab = config.n_tokens + 2
    model = init_token_model(config, vocab)
    named = list(named_parameters(model))
    plist = [p for _, p in named]
    mask = decay_mask_for([n for n, _ in named], plist)
    adam = init_adam(plist)
    losses: list[float] = []
    t0 = time.perf_counter()
    step = 0
    for length, max_steps in config.stages:
        window: list[float] = []
        for _ in range(max_steps):
            batch = synth_selective_copy(length, config.n_tokens, config.n_marked,
                                         seed=config.seed * 1_000_003 + step + 1, n_samples=config.batch_size)
            for p in plist:
                p.requires_grad = True
                p.grad = None
            with ad.Tape() as tape:
                logits = token_logits(model, batch.tokens, batch.n_marked)
                loss = cross_entropy(logits, batch.targets - 1)
            tape.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in plist]
            adamw_step(plist, grads, adam, _lr(step, config), config.weight_decay, mask)
            losses.append(float(loss.data))
            acc = float(np.mean(np.argmax(logits.data, axis=-1) + 1 == batch.targets))
            window = (window + [acc])[-config.window:]
            if step % 20 == 0:
                log.info("probe L=%d step %d loss %.4f acc %.3f", length, step, losses[-1], np.mean(window))
            step += 1
            if len(window) == config.window and np.mean(window) >= config.stage_accuracy:
                break
    for p in plist:
        p.requires_grad = False
        p.grad = None
    held_out = synth_selective_copy(config.seq_len, config.n_tokens, config.n_marked,
                                    seed=config.seed + 7_777_777, n_samples=config.eval_samples)
    acc = copy_accuracy(model, held_out)
    return model, ProbeResult(acc, step, time.perf_counter() - t0, losses)
