"""Dataset export: images -> resized tensors -> frozen features -> GADF files.

Expected image layout (MVTec-style)::

    <images>/train/good/*.png
    <images>/test/good/*.png          (normal test images)
    <images>/test/<defect>/*.png      (anomalous test images)
    <masks>/<defect>/<stem>_mask.png  (optional ground-truth masks)

Every image is bilinearly rescaled to the working resolution (518 by
default), normalized with the backbone's published channel statistics, and
run once through the frozen transformer.  Spatial tokens after the final
layer norm become the feature grid; the last block's classification-query
attention over patch keys, renormalized per head, becomes the attention
matrix.  Masks are nearest-neighbor resized to the working resolution and
binarized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from gadf_exporter.gadf import (
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
    GadfRecord,
    write_gadf,
    write_manifest,
)
from gadf_exporter.vit import PATCH_SIZE, build_model

logger = logging.getLogger(__name__)

# Channel statistics the published backbone was trained with.
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
NORMAL_DIR = "good"


@dataclass
class ExportConfig:
    model_size: str = "base"
    checkpoint: str | None = None
    random_seed: int | None = None  # random-weight mode for dry runs
    n_registers: int | None = None
    resolution: int = 518
    images_root: Path = Path(".")
    masks_root: Path | None = None
    out_root: Path = Path("export")
    manifest_path: Path | None = None
    class_name: str | None = None
    batch_size: int = 4

    def __post_init__(self) -> None:
        if self.resolution % PATCH_SIZE != 0:
            raise ValueError(
                f"resolution {self.resolution} not divisible by patch size {PATCH_SIZE}"
            )


@dataclass
class ImageJob:
    path: Path
    split: str
    label: int
    mask_path: Path | None
    out_rel: str


def _grid_side(resolution: int) -> int:
    return resolution // PATCH_SIZE


def load_image_tensor(path: Path, resolution: int) -> torch.Tensor:
    """Decode, bilinear-resize to a square working resolution, normalize."""
    with Image.open(path) as img:
        img = img.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
        array = np.asarray(img, dtype=np.float32) / 255.0
    array = (array - np.array(NORM_MEAN, dtype=np.float32)) / np.array(
        NORM_STD, dtype=np.float32
    )
    return torch.from_numpy(array.transpose(2, 0, 1))


def load_mask(path: Path, resolution: int) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("L").resize((resolution, resolution), Image.NEAREST)
        return (np.asarray(img) > 0).astype(np.uint8)


def renormalize_attention(attention: np.ndarray) -> np.ndarray:
    """Rescale each head's patch-attention row to sum to 1.

    The classification query also attends to itself (and to register tokens
    in register variants), so the raw patch slice sums to less than one.
    """
    att = attention.astype(np.float64)
    sums = att.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("attention mass over patches must be positive")
    return (att / sums).astype(np.float32)


def discover_jobs(config: ExportConfig) -> list[ImageJob]:
    jobs: list[ImageJob] = []
    for split in ("train", "test"):
        split_dir = config.images_root / split
        if not split_dir.is_dir():
            continue
        for sub in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            label = LABEL_NORMAL if sub.name == NORMAL_DIR else LABEL_ANOMALOUS
            if split == "train" and label != LABEL_NORMAL:
                logger.warning("skipping non-normal train directory %s", sub)
                continue
            for image_path in sorted(sub.iterdir()):
                if image_path.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                mask_path = None
                if label == LABEL_ANOMALOUS and config.masks_root is not None:
                    candidate = (
                        config.masks_root / sub.name / f"{image_path.stem}_mask.png"
                    )
                    if candidate.is_file():
                        mask_path = candidate
                    else:
                        logger.warning("no mask for %s (looked at %s)", image_path, candidate)
                jobs.append(
                    ImageJob(
                        path=image_path,
                        split=split,
                        label=label,
                        mask_path=mask_path,
                        out_rel=f"{split}__{sub.name}__{image_path.stem}.gadf",
                    )
                )
    return jobs


def export_dataset(config: ExportConfig) -> Path:
    """Export every discovered image; returns the manifest path."""
    model = build_model(
        config.model_size,
        checkpoint=config.checkpoint,
        n_registers=config.n_registers,
        random_seed=config.random_seed,
    )
    if config.random_seed is not None:
        logger.warning(
            "exporting with RANDOM weights (seed %d); features are for format "
            "and geometry testing only",
            config.random_seed,
        )
    jobs = discover_jobs(config)
    if not jobs:
        raise ValueError(f"no images found under {config.images_root}")
    out_root = Path(config.out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    side = _grid_side(config.resolution)

    entries = []
    for start in range(0, len(jobs), config.batch_size):
        batch = jobs[start : start + config.batch_size]
        tensors = []
        kept = []
        for job in batch:
            try:
                tensors.append(load_image_tensor(job.path, config.resolution))
                kept.append(job)
            except OSError as exc:
                logger.warning("skipping unreadable image %s: %s", job.path, exc)
        if not kept:
            continue
        spatial, cls_attention = model.extract(torch.stack(tensors))
        features = spatial.numpy()
        attention = cls_attention.numpy()
        for i, job in enumerate(kept):
            mask = None
            if job.mask_path is not None:
                mask = load_mask(job.mask_path, config.resolution)
            record = GadfRecord(
                grid_h=side,
                grid_w=side,
                dim=features.shape[-1],
                features=features[i].astype(np.float32),
                n_heads=attention.shape[1],
                attention=renormalize_attention(attention[i]),
                label=job.label,
                image_h=config.resolution,
                image_w=config.resolution,
                pixel_mask=mask,
            )
            write_gadf(record, out_root / job.out_rel)
            entries.append(
                {
                    "path": job.out_rel,
                    "split": job.split,
                    "class": config.class_name or config.images_root.name,
                    "label": job.label,
                }
            )
        logger.info("exported %d/%d", min(start + config.batch_size, len(jobs)), len(jobs))

    manifest_path = (
        Path(config.manifest_path)
        if config.manifest_path is not None
        else out_root / "manifest.json"
    )
    write_manifest(entries, manifest_path, root=".")
    return manifest_path
