"""Gaussian-blur and JPEG corruptions at five severity levels.

Images are float arrays ``[C, H, W]`` in ``[0, 1]``. Severity 0 returns the
input untouched.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import write_png
from .train import evaluate

BLUR_SIGMA = {1: 1.0, 2: 2.0, 3: 3.0, 4: 4.0, 5: 6.0}
JPEG_QUALITY = {1: 25, 2: 18, 3: 15, 4: 10, 5: 7}
KINDS = ("gaussian_blur", "jpeg")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        if self.severity not in range(6):
            raise ValueError(f"severity must be in 0..5, got {self.severity}")

    @property
    def parameter(self) -> float | None:
        """Blur sigma or JPEG quality; ``None`` at severity 0."""
        if self.severity == 0:
            return None
        table = BLUR_SIGMA if self.kind == "gaussian_blur" else JPEG_QUALITY
        return table[self.severity]

    def apply(self, image: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian_blur":
            return gaussian_blur(image, self.severity)
        return jpeg_compress(image, self.severity)


# ---------------------------------------------------------------------------
# blur


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    widths = [(0, 0)] * x.ndim
    widths[axis] = (r, r)
    padded = np.pad(x, widths, mode="symmetric")
    windows = sliding_window_view(padded, len(kernel), axis=axis)
    return windows @ kernel


def blur_sigma(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with radius ``ceil(3 sigma)`` and mirrored borders."""
    k = gaussian_kernel(sigma)
    out = _convolve_axis(np.asarray(image, dtype=np.float64), k, -1)
    return _convolve_axis(out, k, -2)


def gaussian_blur(image: np.ndarray, severity: int) -> np.ndarray:
    if severity == 0:
        return image.copy()
    out = blur_sigma(image, BLUR_SIGMA[severity])
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


# ---------------------------------------------------------------------------
# JPEG

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


_DCT = dct_matrix(8)


def scaled_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling, clamped to baseline 1..255."""
    quality = min(max(int(quality), 1), 100)
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def _blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    nh, nw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nh * 8, nw * 8)


def block_dct(plane: np.ndarray) -> np.ndarray:
    """8x8 block DCT of a plane whose sides are multiples of 8."""
    return _DCT @ _blocks(plane) @ _DCT.T


def block_idct(coeffs: np.ndarray) -> np.ndarray:
    return _unblocks(_DCT.T @ coeffs @ _DCT)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128
    return np.stack([y, cb, cr])


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[0], ycc[1] - 128, ycc[2] - 128
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b])


def _code_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    coeffs = block_dct(plane - 128.0)
    coeffs = np.round(coeffs / table) * table
    return block_idct(coeffs) + 128.0


def jpeg_roundtrip(image: np.ndarray, quality: int, subsample: bool = True,
                   luma_table: np.ndarray | None = None, chroma_table: np.ndarray | None = None) -> np.ndarray:
    """Encode/decode through the lossy JPEG stages (no entropy coding)."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    rgb = np.round(np.clip(image, 0, 1) * 255.0)
    if c == 1:
        rgb = np.repeat(rgb, 3, axis=0)
    ph, pw = -h % 16, -w % 16
    rgb = np.pad(rgb, ((0, 0), (0, ph), (0, pw)), mode="symmetric")
    ycc = rgb_to_ycbcr(rgb)

    lt = scaled_table(LUMA_TABLE, quality) if luma_table is None else luma_table
    ct = scaled_table(CHROMA_TABLE, quality) if chroma_table is None else chroma_table
    out = np.empty_like(ycc)
    out[0] = _code_plane(ycc[0], lt)
    for ch in (1, 2):
        plane = ycc[ch]
        if subsample:
            hh, ww = plane.shape
            small = plane.reshape(hh // 2, 2, ww // 2, 2).mean(axis=(1, 3))
            small = np.pad(small, ((0, -small.shape[0] % 8), (0, -small.shape[1] % 8)), mode="symmetric")
            small = _code_plane(small, ct)[: hh // 2, : ww // 2]
            out[ch] = np.repeat(np.repeat(small, 2, axis=0), 2, axis=1)
        else:
            out[ch] = _code_plane(plane, ct)

    rgb = np.clip(np.round(ycbcr_to_rgb(out)), 0, 255)[:, :h, :w]
    if c == 1:
        rgb = rgb.mean(axis=0, keepdims=True).round()
    return (rgb / 255.0).astype(image.dtype if image.dtype.kind == "f" else np.float64)


def jpeg_compress(image: np.ndarray, severity: int) -> np.ndarray:
    if severity == 0:
        return image.copy()
    return jpeg_roundtrip(image, JPEG_QUALITY[severity])


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(peak**2 / mse)


def apply_corruption(image: np.ndarray, kind: str, severity: int) -> np.ndarray:
    return CorruptionSpec(kind, severity).apply(image)


# ---------------------------------------------------------------------------
# severity sweep

SWEEP_COLUMNS = ("severity", "accuracy", "n_correct", "n_total", "parameter")


def severity_sweep(config, params, dataset, kind: str, severities=range(6), batch_size: int = 64,
                   dump_dir=None) -> list[dict]:
    """Top-1 accuracy of a trained classifier on each corrupted copy of ``dataset``.

    Corruption is applied at evaluation only. With ``dump_dir`` set, the
    corrupted images are written there as ``s<severity>/<index>.png``.
    """
    rows = []
    for severity in severities:
        spec = CorruptionSpec(kind, severity)
        corrupted = dataset.map(spec.apply)
        if dump_dir is not None:
            sub = Path(dump_dir) / f"s{severity}"
            sub.mkdir(parents=True, exist_ok=True)
            for i, img in enumerate(corrupted.images):
                write_png(sub / f"{i:05d}.png", img)
        acc, n_correct, n_total = evaluate(config, params, corrupted, batch_size)
        param = spec.parameter
        rows.append({"severity": severity, "accuracy": acc, "n_correct": n_correct, "n_total": n_total,
                     "parameter": "" if param is None else param})
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in SWEEP_COLUMNS])
