"""Inference: per-patch scores, top-K image scores, and pixel anomaly maps.

The image-level anomaly score is the mean of the K highest per-patch
probabilities.  Localization maps reshape patch probabilities onto the grid,
bilinearly upsample to the source resolution (half-pixel-center convention),
and optionally smooth with a Gaussian kernel before clamping to [0, 1].
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from padkit import discriminator as disc
from padkit.errors import ConfigError, ShapeError
from padkit.records import DatasetManifest, read_record
from padkit.discriminator import DiscriminatorModel, PatchScores

DEFAULT_SIGMA = 4.0


def worker_count() -> int:
    """Worker cap for record-parallel stages, from GAD_THREADS if set."""
    env = os.environ.get("GAD_THREADS", "").strip()
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"GAD_THREADS must be an integer, got {env!r}") from None
        if value < 1:
            raise ConfigError(f"GAD_THREADS must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1


@dataclass
class ImageScore:
    score: float
    k_used: int


@dataclass
class AnomalyMap:
    values: np.ndarray  # float32 [image_h, image_w] in [0, 1]
    grid_h: int
    grid_w: int
    sigma: float


def image_score(scores: PatchScores, k: int) -> ImageScore:
    """Mean of the k largest patch probabilities.

    k=1 is exactly the max and k=N exactly the plain mean (no reordering, so
    the floating-point sum is bit-identical to numpy's mean of the input).
    """
    probs = scores.probabilities
    n = probs.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    if k == 1:
        return ImageScore(score=float(probs.max()), k_used=1)
    if k == n:
        return ImageScore(score=float(probs.mean()), k_used=n)
    top = np.partition(probs, n - k)[n - k :]
    return ImageScore(score=float(top.mean()), k_used=k)


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear interpolation with half-pixel-aligned sample centers.

    Constant inputs map to constant outputs; when the output size equals the
    input size the result is the input itself.
    """
    gh, gw = grid.shape
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"output size must be positive, got {out_h}x{out_w}")
    src_y = (np.arange(out_h, dtype=np.float64) + 0.5) * (gh / out_h) - 0.5
    src_x = (np.arange(out_w, dtype=np.float64) + 0.5) * (gw / out_w) - 0.5
    y0 = np.floor(src_y)
    x0 = np.floor(src_x)
    ty = src_y - y0
    tx = src_x - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y0c = np.clip(y0, 0, gh - 1)
    y1c = np.clip(y0 + 1, 0, gh - 1)
    x0c = np.clip(x0, 0, gw - 1)
    x1c = np.clip(x0 + 1, 0, gw - 1)
    g = grid.astype(np.float64)
    top = g[y0c][:, x0c] * (1 - tx) + g[y0c][:, x1c] * tx
    bot = g[y1c][:, x0c] * (1 - tx) + g[y1c][:, x1c] * tx
    return top * (1 - ty)[:, None] + bot * ty[:, None]


def anomaly_map(
    scores: PatchScores, image_h: int, image_w: int, sigma: float = DEFAULT_SIGMA
) -> AnomalyMap:
    """Patch probabilities -> pixel map: reshape, upsample, smooth, clamp.

    ``sigma`` is the Gaussian smoothing standard deviation in pixels;
    sigma=0 disables smoothing.
    """
    if image_h < 1 or image_w < 1:
        raise ConfigError(f"image size must be positive, got {image_h}x{image_w}")
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    grid = scores.probabilities.reshape(scores.grid_h, scores.grid_w)
    up = bilinear_upsample(grid, image_h, image_w)
    if sigma > 0:
        up = gaussian_filter(up, sigma=sigma, mode="reflect")
    np.clip(up, 0.0, 1.0, out=up)
    return AnomalyMap(
        values=up.astype(np.float32),
        grid_h=scores.grid_h,
        grid_w=scores.grid_w,
        sigma=sigma,
    )


@dataclass
class RecordScore:
    path: str
    class_name: str
    label: int
    image_score: float
    patch_scores: PatchScores
    map: AnomalyMap | None = None


def score_dataset(
    model: DiscriminatorModel,
    manifest: DatasetManifest,
    split: str,
    k: int,
    sigma: float = DEFAULT_SIGMA,
    with_maps: bool = False,
) -> list[RecordScore]:
    """Score every record of a split in manifest order (inference mode).

    Geometry mismatches name the offending file.  Records are processed by a
    small thread pool capped by GAD_THREADS; output order is by manifest.
    """
    entries = manifest.split_entries(split)
    if not entries:
        return []

    def score_one(entry) -> RecordScore:
        record = read_record(manifest.resolve(entry))
        if record.n_patches != model.n_patches or record.dim != model.dim:
            raise ShapeError(
                f"{manifest.resolve(entry)}: record geometry "
                f"({record.n_patches} patches, dim {record.dim}) does not match model "
                f"({model.n_patches} patches, dim {model.dim})"
            )
        patch_scores = disc.forward(
            model, record.features, grid=(record.grid_h, record.grid_w)
        )
        img = image_score(patch_scores, k)
        amap = (
            anomaly_map(patch_scores, record.image_h, record.image_w, sigma)
            if with_maps
            else None
        )
        return RecordScore(
            path=entry.path,
            class_name=entry.class_name,
            label=record.label,
            image_score=img.score,
            patch_scores=patch_scores,
            map=amap,
        )

    workers = min(worker_count(), len(entries))
    if workers <= 1:
        return [score_one(e) for e in entries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(score_one, entries))


def write_scores_csv(results: Sequence[RecordScore], path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "class", "label", "image_score"])
        for r in results:
            writer.writerow([r.path, r.class_name, r.label, f"{r.image_score:.17g}"])


def write_map_files(amap: AnomalyMap, stem: Path | str) -> tuple[Path, Path]:
    """Export a map as 16-bit grayscale PNG plus a raw little-endian f32 dump.

    PNG pixel value is round(65535 * p); the .f32 file is the row-major
    float32 map with no header (dimensions recoverable from the PNG).
    """
    from PIL import Image

    stem = Path(stem)
    png_path = stem.with_suffix(".png")
    raw_path = stem.with_suffix(".f32")
    quantized = np.round(amap.values.astype(np.float64) * 65535.0).astype(np.uint16)
    Image.fromarray(quantized).save(png_path)
    raw_path.write_bytes(np.ascontiguousarray(amap.values, dtype="<f4").tobytes())
    return png_path, raw_path
