"""Datasets: toy images, PNG/PPM directories and the selective-copy probe."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class ImageDataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    n_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def map(self, fn) -> "ImageDataset":
        """New dataset with ``fn`` applied to every image."""
        images = np.stack([fn(im) for im in self.images]) if len(self) else self.images.copy()
        return ImageDataset(images.astype(self.images.dtype, copy=False), self.labels.copy(), self.n_classes)


# ---------------------------------------------------------------------------
# synthetic images


def toy_stripes(n: int, image_size: int = 32, seed: int = 0, noise: float = 0.05) -> ImageDataset:
    """Two classes: horizontal (0) vs vertical (1) sinusoidal stripes.

    Period, phase and colours are random per image, classes alternate.
    """
    rng = np.random.default_rng(seed)
    coords = np.arange(image_size, dtype=np.float64)
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    labels = np.arange(n) % 2
    for i in range(n):
        period = rng.uniform(3.0, 6.0)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * coords / period + rng.uniform(0, 2 * np.pi))
        pattern = np.repeat(wave[:, None], image_size, axis=1)
        if labels[i] == 1:
            pattern = pattern.T
        lo, hi = rng.uniform(0.0, 0.35, 3), rng.uniform(0.65, 1.0, 3)
        img = lo[:, None, None] + (hi - lo)[:, None, None] * pattern[None]
        img += rng.normal(0, noise, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset(images, labels.astype(np.int64), 2)


def natural_test_image(size: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic smooth-plus-texture RGB image ``[3, size, size]`` for codec checks."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / size
    base = np.stack([
        0.5 + 0.4 * np.sin(2 * np.pi * (x + 0.3 * y)),
        0.5 + 0.4 * np.cos(2 * np.pi * (0.7 * x - y)),
        0.5 + 0.3 * np.sin(6 * np.pi * x * y),
    ])
    disk = ((x - 0.6) ** 2 + (y - 0.4) ** 2 < 0.05).astype(np.float64)
    base = base * (1 - 0.5 * disk) + 0.3 * disk
    texture = rng.normal(0, 0.06, (3, size, size))
    return np.clip(base + texture, 0.0, 1.0)


# ---------------------------------------------------------------------------
# image files


def read_image(path: str | Path) -> np.ndarray:
    """PNG or binary PPM/PGM to ``[C, H, W]`` float32 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def write_png(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG")


def load_image_dir(root: str | Path, manifest: str = "labels.csv", n_classes: int | None = None) -> ImageDataset:
    """Directory of images plus a ``path,label`` CSV manifest (paths relative to ``root``)."""
    root = Path(root)
    with open(root / manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"manifest {root / manifest} lists no images")
    if set(rows[0]) != {"path", "label"}:
        raise ValueError(f"manifest columns must be path,label; got {sorted(rows[0])}")
    images = np.stack([read_image(root / r["path"]) for r in rows])
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    k = n_classes if n_classes is not None else int(labels.max()) + 1
    return ImageDataset(images, labels, k)


def save_image_dir(dataset: ImageDataset, root: str | Path, manifest: str = "labels.csv") -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
            name = f"{i:05d}.png"
            write_png(root / name, img)
            w.writerow([name, int(label)])


# ---------------------------------------------------------------------------
# selective copy


@dataclass
class CopyTask:
    """Token sequences ``[N, L]``; targets ``[N, n_marked]`` at the last ``n_marked`` positions."""

    tokens: np.ndarray
    targets: np.ndarray
    n_tokens: int

    BLANK = 0

    @property
    def vocab_size(self) -> int:
        return self.n_tokens + 2  # blank, data tokens 1..n, query marker

    @property
    def query_token(self) -> int:
        return self.n_tokens + 1

    @property
    def n_marked(self) -> int:
        return self.targets.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)


def synth_selective_copy(seq_len: int, n_tokens: int, n_marked: int, seed: int, n_samples: int = 1) -> CopyTask:
    """Sparse data tokens scattered among blanks must be replayed, in order, at the end.

    The first ``seq_len - n_marked`` positions hold ``n_marked`` data tokens
    (values 1..``n_tokens``) at random positions and blanks elsewhere; the
    last ``n_marked`` positions hold the query marker.
    """
    if not 0 < n_marked < seq_len or 2 * n_marked > seq_len:
        raise ValueError(f"need 0 < n_marked <= seq_len/2, got n_marked={n_marked}, seq_len={seq_len}")
    rng = np.random.default_rng(seed)
    body = seq_len - n_marked
    tokens = np.zeros((n_samples, seq_len), dtype=np.int64)
    targets = rng.integers(1, n_tokens + 1, size=(n_samples, n_marked))
    for i in range(n_samples):
        pos = np.sort(rng.choice(body, size=n_marked, replace=False))
        tokens[i, pos] = targets[i]
    tokens[:, body:] = n_tokens + 1
    return CopyTask(tokens, targets, n_tokens)
