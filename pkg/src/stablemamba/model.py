"""Classifier assembly, presets and footprint accounting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (
    MLP_RATIO,
    NORM_EPS,
    TRANSFORMER,
    BlockParams,
    ConfigError,
    InterleaveSchedule,
    build_interleave_schedule,
    init_mamba_block,
    init_transformer_block,
    schedule_from_pattern,
    stable_mamba_stack,
)
from .ssm import dt_rank


class GeometryError(ConfigError):
    """Input geometry does not match the model configuration."""


@dataclass
class ModelConfig:
    preset: str = "custom"
    embed_dim: int = 192
    depth: int = 24
    ratio_n: int = 7
    transformer_position: str = "middle"
    patch_size: int = 16
    tubelet_len: int = 1
    image_size: int = 224
    n_frames: int = 1
    n_heads: int = 3
    n_classes: int = 1000
    use_cls_token: bool = True
    in_chans: int = 3
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    mamba_ffn: bool = True
    # explicit layer pattern ("MMMM", "TT", ...) overriding ratio/position
    schedule_pattern: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.n_frames % self.tubelet_len:
            raise ConfigError(f"n_frames {self.n_frames} is not divisible by tubelet_len {self.tubelet_len}")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        if self.schedule_pattern is not None:
            if len(self.schedule_pattern) != self.depth:
                raise ConfigError(
                    f"schedule_pattern length {len(self.schedule_pattern)} differs from depth {self.depth}"
                )
            schedule_from_pattern(self.schedule_pattern)
        elif self.depth % (self.ratio_n + 1):
            raise ConfigError(f"depth {self.depth} is not divisible by ratio_n + 1 = {self.ratio_n + 1}")

    @property
    def schedule(self) -> InterleaveSchedule:
        if self.schedule_pattern is not None:
            return schedule_from_pattern(self.schedule_pattern)
        return build_interleave_schedule(self.depth, self.ratio_n, self.transformer_position)

    @property
    def is_video(self) -> bool:
        return self.n_frames > 1

    def n_patches(self, image_size: int | None = None, n_frames: int | None = None) -> int:
        s = self.image_size if image_size is None else image_size
        t = self.n_frames if n_frames is None else n_frames
        return (t // self.tubelet_len) * (s // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches() + int(self.use_cls_token)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# Depth/width per preset, calibrated against the parameter counter below.
PRESETS: dict[str, dict[str, Any]] = {
    "T": dict(embed_dim=222, depth=8, n_heads=3),
    "S": dict(embed_dim=320, depth=16, n_heads=5),
    "M": dict(embed_dim=448, depth=24, n_heads=7),
    "B": dict(embed_dim=512, depth=24, n_heads=8),
}
PRESET_NAMES = {"T": "StableMamba-T", "S": "StableMamba-S", "M": "StableMamba-M", "B": "StableMamba-B"}


def preset(name: str, **overrides) -> ModelConfig:
    key = {v: k for k, v in PRESET_NAMES.items()}.get(name, name.upper())
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    base = dict(PRESETS[key], preset=key, ratio_n=7, transformer_position="middle", patch_size=16,
                image_size=224, n_classes=1000)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    embed_w: Tensor  # [D, C, t, p, p]
    embed_b: Tensor  # [D]
    pos: Tensor  # [tokens, D]
    cls: Tensor | None
    blocks: list[BlockParams] = field(default_factory=list)
    norm_f: Tensor | None = None
    head_w: Tensor | None = None
    head_b: Tensor | None = None


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    k = config.in_chans * config.tubelet_len * config.patch_size**2
    blocks: list[BlockParams] = []
    for kind in config.schedule.kinds:
        if kind == TRANSFORMER:
            blocks.append(init_transformer_block(rng, d, config.n_heads, dtype))
        else:
            blocks.append(init_mamba_block(rng, d, config.d_state, config.expand, config.conv_width,
                                           config.mamba_ffn, dtype))
    shape = (d, config.in_chans, config.tubelet_len, config.patch_size, config.patch_size)
    return ModelParams(
        embed_w=Tensor(rng.normal(0, k**-0.5, shape).astype(dtype)),
        embed_b=Tensor(np.zeros(d, dtype)),
        pos=Tensor(np.zeros((config.n_tokens, d), dtype)),
        cls=Tensor(rng.normal(0, 0.02, d).astype(dtype)) if config.use_cls_token else None,
        blocks=blocks,
        norm_f=Tensor(np.ones(d, dtype)),
        head_w=Tensor(rng.normal(0, 0.02, (d, config.n_classes)).astype(dtype)),
        head_b=Tensor(np.zeros(config.n_classes, dtype)),
    )


def _mlp_shapes(d: int) -> dict[str, tuple[int, ...]]:
    h = MLP_RATIO * d
    return {"w1": (d, h), "b1": (h,), "w2": (h, d), "b2": (d,)}


def _branch_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, e, n = config.embed_dim, config.expand * config.embed_dim, config.d_state
    r = dt_rank(d)
    return {
        "conv_w": (e, config.conv_width),
        "conv_b": (e,),
        "ssm.a_log": (e, n),
        "ssm.w_b": (e, n),
        "ssm.w_c": (e, n),
        "ssm.w_delta_down": (e, r),
        "ssm.w_delta_up": (r, e),
        "ssm.b_delta": (e,),
        "ssm.d_skip": (e,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Analytic inventory of every parameter tensor, keyed like ``named_parameters``."""
    d, e = config.embed_dim, config.expand * config.embed_dim
    out: dict[str, tuple[int, ...]] = {
        "embed_w": (d, config.in_chans, config.tubelet_len, config.patch_size, config.patch_size),
        "embed_b": (d,),
        "pos": (config.n_tokens, d),
    }
    if config.use_cls_token:
        out["cls"] = (d,)
    for i, kind in enumerate(config.schedule.kinds):
        pre = f"blocks.{i}"
        out[f"{pre}.norm1"] = (d,)
        if kind == TRANSFORMER:
            for name in ("q", "k", "v", "o"):
                out[f"{pre}.attn.w_{name}"] = (d, d)
                if name != "k":
                    out[f"{pre}.attn.b_{name}"] = (d,)
            out[f"{pre}.norm2"] = (d,)
            out.update({f"{pre}.mlp.{k}": v for k, v in _mlp_shapes(d).items()})
        else:
            out[f"{pre}.mixer.w_in"] = (d, 2 * e)
            for direction in ("fwd", "bwd"):
                out.update({f"{pre}.mixer.{direction}.{k}": v for k, v in _branch_shapes(config).items()})
            out[f"{pre}.mixer.w_out"] = (e, d)
            if config.mamba_ffn:
                out[f"{pre}.norm2"] = (d,)
                out.update({f"{pre}.ffn.{k}": v for k, v in _mlp_shapes(d).items()})
    out["norm_f"] = (d,)
    out["head_w"] = (d, config.n_classes)
    out["head_b"] = (config.n_classes,)
    return out


def count_params(config: ModelConfig) -> int:
    return int(sum(int(np.prod(s)) for s in param_shapes(config).values()))


def count_flops(config: ModelConfig, image_size: int | None = None, n_frames: int | None = None,
                flops_per_mac: int = 1) -> int:
    """Analytic multiply-accumulate count of one forward pass.

    Matmuls, the patch convolution, the depthwise conv, the selective scan
    (state update plus readout, ``2*E*N`` per token and direction) and the
    two attention products (``2*L^2*D`` per Transformer block) are counted;
    normalisation, activations and residual adds are not.
    """
    d, e, n = config.embed_dim, config.expand * config.embed_dim, config.d_state
    r = dt_rank(d)
    patches = config.n_patches(image_size, n_frames)
    length = patches + int(config.use_cls_token)
    patch_dim = config.in_chans * config.tubelet_len * config.patch_size**2

    macs = patches * patch_dim * d
    mlp = 2 * MLP_RATIO * d * d
    per_direction = config.conv_width * e + e * (r + 2 * n) + r * e + 2 * e * n
    for kind in config.schedule.kinds:
        if kind == TRANSFORMER:
            macs += length * (4 * d * d + mlp) + 2 * length * length * d
        else:
            macs += length * (2 * d * e + 2 * per_direction + e * d)
            if config.mamba_ffn:
                macs += length * mlp
    macs += d * config.n_classes
    return int(macs * flops_per_mac)


# ---------------------------------------------------------------------------
# forward


def patchify(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    """``[B, C, T, H, W]`` -> ``[B, L, C*t*p*p]``, time-major then row-major."""
    b, c, t, h, w = x.shape
    p, tl = config.patch_size, config.tubelet_len
    if h % p or w % p:
        raise GeometryError(f"spatial size {h}x{w} is not divisible by patch_size {p}")
    if t % tl:
        raise GeometryError(f"{t} frames are not divisible by tubelet_len {tl}")
    x = x.reshape(b, c, t // tl, tl, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 6, 1, 3, 5, 7)
    return x.reshape(b, (t // tl) * (h // p) * (w // p), c * tl * p * p)


def _embed(tokens_in: np.ndarray, params: ModelParams) -> Tensor:
    d = params.embed_w.shape[0]
    kernel = ad.swapaxes(ad.reshape(params.embed_w, (d, -1)), 0, 1)
    return Tensor(tokens_in.astype(params.embed_w.dtype, copy=False)) @ kernel + params.embed_b


def patch_embed_2d(image: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    """``[C, H, W]`` (or batched ``[B, C, H, W]``) -> ``[..., L, D]``."""
    single = image.ndim == 3
    x = image[None] if single else image
    tokens = _embed(patchify(x[:, :, None], config), params)
    return tokens[0] if single else tokens


def tubelet_embed_3d(video: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    """``[C, T, H, W]`` (or batched ``[B, C, T, H, W]``) -> ``[..., L, D]``."""
    single = video.ndim == 4
    x = video[None] if single else video
    tokens = _embed(patchify(x, config), params)
    return tokens[0] if single else tokens


def _check_geometry(x: np.ndarray, config: ModelConfig) -> None:
    c, *rest = x.shape[1:]
    expected = ([config.n_frames] if config.is_video else [1]) + [config.image_size] * 2
    if c != config.in_chans or list(rest) != expected:
        raise GeometryError(
            f"input geometry {tuple(x.shape[1:])} does not match config "
            f"({config.in_chans}, {expected[0]}, {config.image_size}, {config.image_size})"
        )


def features(config: ModelConfig, params: ModelParams, x: np.ndarray, chunk_len: int | None = None) -> Tensor:
    """Pooled representation ``[B, D]`` of a batch of images or clips."""
    x = np.asarray(x)
    if not config.is_video and x.ndim == 4:
        x = x[:, :, None]
    if x.ndim != 5:
        raise GeometryError(f"expected a batched image or video array, got shape {x.shape}")
    _check_geometry(x, config)
    z = _embed(patchify(x, config), params)
    batch = x.shape[0]
    if config.use_cls_token:
        cls = ad.reshape(params.cls, (1, 1, -1)) * np.ones((batch, 1, 1), dtype=z.dtype)
        z = ad.concat([cls, z], axis=1)
    z = z + params.pos
    z = stable_mamba_stack(z, config.schedule, params.blocks, chunk_len)
    z = ad.rms_norm(z, params.norm_f, NORM_EPS)
    return z[:, 0, :] if config.use_cls_token else ad.mean(z, axis=1)


def forward(config: ModelConfig, params: ModelParams, x: np.ndarray, chunk_len: int | None = None) -> Tensor:
    """Logits for one input (``[C, H, W]`` / ``[C, T, H, W]``) or a batch of them."""
    x = np.asarray(x)
    single = x.ndim == (4 if config.is_video else 3)
    if single:
        x = x[None]
    logits = features(config, params, x, chunk_len) @ params.head_w + params.head_b
    return logits[0] if single else logits
