"""Transformer and Mamba blocks and their interleaved stacking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssm import BidirParams, bidirectional_mamba, init_bidir

NORM_EPS = 1e-6
MLP_RATIO = 4

MAMBA = "M"
TRANSFORMER = "T"


class ConfigError(ValueError):
    """Inconsistent architecture configuration."""


@dataclass
class AttentionParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor  # no key bias: it shifts every score in a row equally
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.n_heads:
            raise ConfigError(f"model dim {d} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[0] // self.n_heads


@dataclass
class MLPParams:
    w1: Tensor  # [D, 4D]
    b1: Tensor
    w2: Tensor  # [4D, D]
    b2: Tensor


@dataclass
class TransformerBlockParams:
    norm1: Tensor
    attn: AttentionParams
    norm2: Tensor
    mlp: MLPParams


@dataclass
class MambaBlockParams:
    norm1: Tensor
    mixer: BidirParams
    norm2: Tensor | None = None
    ffn: MLPParams | None = None


BlockParams = Union[TransformerBlockParams, MambaBlockParams]


def _heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, length, d = x.shape
    return ad.swapaxes(ad.reshape(x, (*lead, length, n_heads, d // n_heads)), -2, -3)


def self_attention(x: Tensor, params: AttentionParams, return_weights: bool = False):
    """Multi-head global self-attention over ``[..., L, D]`` (no causal mask)."""
    h = params.n_heads
    q = _heads(x @ params.w_q + params.b_q, h)
    k = _heads(x @ params.w_k, h)
    v = _heads(x @ params.w_v + params.b_v, h)
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(params.head_dim))
    weights = ad.softmax(scores, axis=-1)
    z = ad.swapaxes(weights @ v, -2, -3)
    z = ad.reshape(z, x.shape)
    out = z @ params.w_o + params.b_o
    return (out, weights) if return_weights else out


def mlp(x: Tensor, params: MLPParams) -> Tensor:
    return ad.gelu(x @ params.w1 + params.b1) @ params.w2 + params.b2


def transformer_block(z: Tensor, params: TransformerBlockParams) -> Tensor:
    z = z + self_attention(ad.rms_norm(z, params.norm1, NORM_EPS), params.attn)
    return z + mlp(ad.rms_norm(z, params.norm2, NORM_EPS), params.mlp)


def mamba_block(z: Tensor, params: MambaBlockParams, chunk_len: int | None = None) -> Tensor:
    z = z + bidirectional_mamba(ad.rms_norm(z, params.norm1, NORM_EPS), params.mixer, chunk_len)
    if params.ffn is None:
        return z
    return z + mlp(ad.rms_norm(z, params.norm2, NORM_EPS), params.ffn)


# ---------------------------------------------------------------------------
# interleaving


@dataclass(frozen=True)
class InterleaveSchedule:
    kinds: tuple[str, ...]
    ratio_n: int
    position: str

    @property
    def depth(self) -> int:
        return len(self.kinds)

    @property
    def n_mamba(self) -> int:
        return self.kinds.count(MAMBA)

    @property
    def n_transformer(self) -> int:
        return self.kinds.count(TRANSFORMER)

    @property
    def pattern(self) -> str:
        return "".join(self.kinds)

    def __str__(self) -> str:
        group = self.ratio_n + 1
        if not self.kinds:
            return ""
        unit = self.pattern[:group]
        reps = self.depth // group
        if reps > 1 and unit * reps == self.pattern:
            return f"{unit}×{reps}"
        return self.pattern


POSITIONS = ("start", "middle", "end")


def transformer_index(ratio_n: int, position: str) -> int:
    if position == "start":
        return 0
    if position == "middle":
        return ratio_n // 2
    if position == "end":
        return ratio_n
    raise ConfigError(f"unknown transformer position {position!r}; expected one of {POSITIONS}")


def build_interleave_schedule(depth: int, ratio_n: int, position: str = "middle") -> InterleaveSchedule:
    """One Transformer block per ``ratio_n`` Mamba blocks, placed per group."""
    if ratio_n < 0:
        raise ConfigError(f"ratio_n must be >= 0, got {ratio_n}")
    group = ratio_n + 1
    if depth % group:
        raise ConfigError(f"depth {depth} is not divisible by group size ratio_n + 1 = {group}")
    t_at = transformer_index(ratio_n, position)
    unit = [MAMBA] * ratio_n
    unit.insert(t_at, TRANSFORMER)
    return InterleaveSchedule(tuple(unit * (depth // group)), ratio_n, position)


def schedule_from_pattern(pattern: str) -> InterleaveSchedule:
    """Arbitrary schedule, e.g. ``"MMMM"`` for a pure Mamba stack."""
    bad = set(pattern) - {MAMBA, TRANSFORMER}
    if bad:
        raise ConfigError(f"schedule pattern may only contain M and T, got {sorted(bad)}")
    return InterleaveSchedule(tuple(pattern), len(pattern), "custom")


def stable_mamba_stack(x: Tensor, schedule: InterleaveSchedule, blocks: Sequence[BlockParams],
                       chunk_len: int | None = None) -> Tensor:
    if len(blocks) != schedule.depth:
        raise ConfigError(f"schedule has {schedule.depth} layers but {len(blocks)} parameter sets were given")
    for kind, params in zip(schedule.kinds, blocks):
        if kind == TRANSFORMER:
            if not isinstance(params, TransformerBlockParams):
                raise ConfigError("schedule expects a Transformer block here")
            x = transformer_block(x, params)
        else:
            if not isinstance(params, MambaBlockParams):
                raise ConfigError("schedule expects a Mamba block here")
            x = mamba_block(x, params, chunk_len)
    return x


# ---------------------------------------------------------------------------
# initialisation


def _linear(rng, d_in, d_out, dtype, std=0.02):
    return Tensor(rng.normal(0, std, (d_in, d_out)).astype(dtype)), Tensor(np.zeros(d_out, dtype))


def init_attention(rng, d_model: int, n_heads: int, dtype=np.float32) -> AttentionParams:
    w_q, b_q = _linear(rng, d_model, d_model, dtype)
    w_k, _ = _linear(rng, d_model, d_model, dtype)
    w_v, b_v = _linear(rng, d_model, d_model, dtype)
    w_o, b_o = _linear(rng, d_model, d_model, dtype)
    return AttentionParams(w_q, b_q, w_k, w_v, b_v, w_o, b_o, n_heads)


def init_mlp(rng, d_model: int, dtype=np.float32) -> MLPParams:
    w1, b1 = _linear(rng, d_model, MLP_RATIO * d_model, dtype)
    w2, b2 = _linear(rng, MLP_RATIO * d_model, d_model, dtype)
    return MLPParams(w1, b1, w2, b2)


def init_transformer_block(rng, d_model: int, n_heads: int, dtype=np.float32) -> TransformerBlockParams:
    return TransformerBlockParams(
        norm1=Tensor(np.ones(d_model, dtype)),
        attn=init_attention(rng, d_model, n_heads, dtype),
        norm2=Tensor(np.ones(d_model, dtype)),
        mlp=init_mlp(rng, d_model, dtype),
    )


def init_mamba_block(rng, d_model: int, d_state: int = 16, expand: int = 2, conv_width: int = 4,
                     with_ffn: bool = True, dtype=np.float32) -> MambaBlockParams:
    return MambaBlockParams(
        norm1=Tensor(np.ones(d_model, dtype)),
        mixer=init_bidir(rng, d_model, d_state, expand, conv_width, dtype),
        norm2=Tensor(np.ones(d_model, dtype)) if with_ffn else None,
        ffn=init_mlp(rng, d_model, dtype) if with_ffn else None,
    )
