"""AdamW, warmup plus cosine schedule, smoothed cross-entropy and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import ConfigError
from .data import ImageDataset
from .model import ModelConfig, ModelParams, forward, init_params
from .params import named_parameters

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

METRICS_COLUMNS = ("step", "epoch", "lr", "loss", "grad_norm")
EVAL_COLUMNS = ("epoch", "step", "top1", "n_correct", "n_total")


class StabilityError(FloatingPointError):
    """Non-finite loss or gradient during training."""

    def __init__(self, step: int, epoch: int, loss: float, grad_norm: float, where: str):
        self.step, self.epoch, self.loss, self.grad_norm, self.where = step, epoch, loss, grad_norm, where
        super().__init__(f"non-finite {where} at step {step} (epoch {epoch}): loss={loss}, grad_norm={grad_norm}")

    def report(self) -> dict[str, Any]:
        return {"step": self.step, "epoch": self.epoch, "loss": repr(self.loss),
                "grad_norm": repr(self.grad_norm), "where": self.where}


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.1
    warmup_epochs: int = 5
    total_epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    label_smoothing: float = 0.0
    min_lr: float = 1e-6
    log_every: int = 1
    eval_every: int = 1
    hflip: bool = False
    # stop once train-set top-1 reaches this value (None trains every epoch)
    target_accuracy: float | None = None
    # debugging hook: poison the gradients at this step
    inject_nonfinite_step: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be in [0, total_epochs={self.total_epochs})"
            )
        if self.lr < 0 or self.weight_decay < 0 or self.min_lr < 0:
            raise ConfigError("lr, min_lr and weight_decay must be >= 0")
        if self.batch_size < 1 or self.log_every < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, log_every and eval_every must be >= 1")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_at(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear warmup from 0, then cosine from the peak down to ``min_lr`` at the last step."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    warm = config.warmup_epochs * steps_per_epoch
    last = config.total_epochs * steps_per_epoch - 1
    if step < warm:
        return config.lr * step / warm
    span = max(last - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return config.min_lr + (config.lr - config.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def init_adam(params: Sequence[Tensor]) -> AdamState:
    return AdamState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
               weight_decay: float = 0.0, decay_mask: Sequence[bool] | None = None,
               betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS) -> AdamState:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ad.DimensionError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay and (decay_mask is None or decay_mask[i]):
            p.data *= p.data.dtype.type(1.0 - lr * weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


def decay_mask_for(names: Sequence[str], params: Sequence[Tensor]) -> list[bool]:
    """Decay matrices only: no biases, gains, positions, class token or ``a_log``."""
    skip = ("pos", "cls")
    return [p.ndim >= 2 and n not in skip and not n.endswith("a_log") for n, p in zip(names, params)]


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy; ``s/(K-1)`` mass on every wrong class."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if not 0 <= smoothing < 1:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    if labels.shape != logits.shape[:-1]:
        raise ad.DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    if smoothing and k < 2:
        raise ValueError("label smoothing needs at least two classes")
    target = np.full(logits.shape, smoothing / (k - 1) if smoothing else 0.0, dtype=logits.dtype)
    np.put_along_axis(target, labels[..., None], 1.0 - smoothing, axis=-1)
    per_item = -ad.tsum(ad.log_softmax(logits, axis=-1) * target, axis=-1)
    return ad.mean(per_item)


# ---------------------------------------------------------------------------
# evaluation


def predict(config: ModelConfig, params: ModelParams, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class per image; ``np.argmax`` resolves ties to the lowest index."""
    out = []
    for start in range(0, len(images), batch_size):
        logits = forward(config, params, images[start:start + batch_size]).data
        out.append(np.argmax(logits, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(config: ModelConfig, params: ModelParams, dataset: ImageDataset,
             batch_size: int = 64) -> tuple[float, int, int]:
    """Top-1 accuracy, number correct, number evaluated."""
    if dataset.n_classes > config.n_classes:
        raise ConfigError(f"dataset has {dataset.n_classes} classes but the model has {config.n_classes}")
    pred = predict(config, params, dataset.images, batch_size)
    n_correct = int(np.sum(pred == dataset.labels))
    n = len(dataset)
    return (n_correct / n if n else 0.0), n_correct, n


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    metrics: list[dict[str, float]] = field(default_factory=list)
    evals: list[dict[str, float]] = field(default_factory=list)
    best_top1: float = -1.0
    best_epoch: int = -1
    epochs_run: int = 0
    steps_run: int = 0
    rng_state: dict | None = None


class _CsvLog:
    def __init__(self, path: Path | None, columns: Sequence[str]):
        self.columns = columns
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(columns)

    def write(self, row: dict) -> None:
        if self._fh is not None:
            self._writer.writerow([_fmt(row[c]) for c in self.columns])
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _grad_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: ImageDataset,
          out_dir: str | Path | None = None, eval_set: ImageDataset | None = None,
          on_checkpoint: Callable[[str, TrainResult, int], None] | None = None) -> TrainResult:
    """Deterministic AdamW training.

    Writes ``metrics.csv`` and ``eval.csv`` to ``out_dir`` when given.
    ``on_checkpoint(tag, result, epoch)`` is called with tag ``"best"`` when
    evaluation improves and ``"last"`` at the end. Raises
    :class:`StabilityError` as soon as a loss or gradient is non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.n_classes > model_config.n_classes:
        raise ConfigError(f"dataset has {dataset.n_classes} classes but the model has {model_config.n_classes}")
    tc = train_config
    eval_set = eval_set if eval_set is not None else dataset
    rng = np.random.default_rng(tc.seed)
    params = init_params(model_config, tc.seed)
    named = list(named_parameters(params))
    names = [n for n, _ in named]
    plist = [p for _, p in named]
    mask = decay_mask_for(names, plist)
    adam = init_adam(plist)
    result = TrainResult(params, adam)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics_log = _CsvLog(out / "metrics.csv" if out else None, METRICS_COLUMNS)
    eval_log = _CsvLog(out / "eval.csv" if out else None, EVAL_COLUMNS)

    n = len(dataset)
    steps_per_epoch = -(-n // tc.batch_size)
    step = 0
    try:
        for epoch in range(tc.total_epochs):
            order = rng.permutation(n)
            for start in range(0, n, tc.batch_size):
                idx = order[start:start + tc.batch_size]
                x = dataset.images[idx]
                if tc.hflip:
                    flip = rng.random(len(idx)) < 0.5
                    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
                for p in plist:
                    p.requires_grad = True
                    p.grad = None
                with ad.Tape() as tape:
                    loss = cross_entropy(forward(model_config, params, x), dataset.labels[idx], tc.label_smoothing)
                tape.backward(loss)
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in plist]
                if tc.inject_nonfinite_step is not None and step == tc.inject_nonfinite_step:
                    grads[0] = np.full_like(grads[0], np.inf)
                loss_v = float(loss.data)
                gnorm = _grad_norm(grads)
                lr = lr_at(step, steps_per_epoch, tc)
                row = {"step": step, "epoch": epoch, "lr": lr, "loss": loss_v, "grad_norm": gnorm}
                if not math.isfinite(loss_v) or not math.isfinite(gnorm):
                    metrics_log.write(row)
                    result.metrics.append(row)
                    raise StabilityError(step, epoch, loss_v, gnorm, "loss" if not math.isfinite(loss_v) else "gradient")
                adamw_step(plist, grads, adam, lr, tc.weight_decay, mask)
                if step % tc.log_every == 0:
                    metrics_log.write(row)
                    result.metrics.append(row)
                step += 1
            for p in plist:
                p.requires_grad = False
                p.grad = None
            result.epochs_run = epoch + 1
            result.steps_run = step
            last_epoch = epoch == tc.total_epochs - 1
            if (epoch + 1) % tc.eval_every == 0 or last_epoch:
                top1, n_correct, n_total = evaluate(model_config, params, eval_set)
                rec = {"epoch": epoch, "step": step, "top1": top1, "n_correct": n_correct, "n_total": n_total}
                eval_log.write(rec)
                result.evals.append(rec)
                log.info("epoch %d top1 %.4f", epoch, top1)
                if top1 > result.best_top1:
                    result.best_top1, result.best_epoch = top1, epoch
                    result.rng_state = rng.bit_generator.state
                    if on_checkpoint is not None:
                        on_checkpoint("best", result, epoch)
                if tc.target_accuracy is not None and top1 >= tc.target_accuracy:
                    break
    finally:
        metrics_log.close()
        eval_log.close()
        for p in plist:
            p.requires_grad = False
            p.grad = None
    result.rng_state = rng.bit_generator.state
    if on_checkpoint is not None:
        on_checkpoint("last", result, result.epochs_run - 1)
    return result
