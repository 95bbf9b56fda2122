"""Standalone GADF writer/reader implementing the interchange byte format.

Kept independent of the detection engine on purpose: this module is written
against the format contract, so files it produces are a genuine
interoperability check for any consumer.

Layout (little-endian throughout)::

    "GADF" | u32 version=1 | u32 dim | u16 grid_h | u16 grid_w | u16 n_heads |
    u8 label | u8 has_pixel_mask | u32 image_h | u32 image_w |
    f32 features[grid_h*grid_w][dim] | f32 attention[n_heads][grid_h*grid_w] |
    (u8 pixel_mask[image_h*image_w] if has_pixel_mask)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"GADF"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHHBBII")

LABEL_NORMAL = 0
LABEL_ANOMALOUS = 1


@dataclass
class GadfRecord:
    grid_h: int
    grid_w: int
    dim: int
    features: np.ndarray  # float32 [grid_h*grid_w, dim]
    n_heads: int
    attention: np.ndarray  # float32 [n_heads, grid_h*grid_w]
    label: int
    image_h: int
    image_w: int
    pixel_mask: np.ndarray | None = None  # uint8 [image_h, image_w]


def write_gadf(record: GadfRecord, path: Path | str) -> None:
    n = record.grid_h * record.grid_w
    features = np.ascontiguousarray(record.features, dtype="<f4")
    attention = np.ascontiguousarray(record.attention, dtype="<f4")
    if features.shape != (n, record.dim):
        raise ValueError(f"features shape {features.shape} != ({n}, {record.dim})")
    if attention.shape != (record.n_heads, n):
        raise ValueError(f"attention shape {attention.shape} != ({record.n_heads}, {n})")
    if not np.all(np.isfinite(features)):
        raise ValueError("features must be finite")
    sums = attention.sum(axis=1, dtype=np.float64)
    if record.n_heads and not np.all(np.abs(sums - 1.0) <= 1e-4):
        raise ValueError("attention rows must sum to 1 within 1e-4")
    has_mask = record.pixel_mask is not None
    header = _HEADER.pack(
        MAGIC, VERSION, record.dim, record.grid_h, record.grid_w, record.n_heads,
        record.label, 1 if has_mask else 0, record.image_h, record.image_w,
    )
    parts = [header, features.tobytes(), attention.tobytes()]
    if has_mask:
        mask = np.ascontiguousarray(record.pixel_mask, dtype=np.uint8)
        if mask.shape != (record.image_h, record.image_w):
            raise ValueError("pixel mask shape mismatch")
        if mask.max(initial=0) > 1:
            raise ValueError("pixel mask must be binary")
        parts.append(mask.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_gadf(path: Path | str) -> GadfRecord:
    blob = Path(path).read_bytes()
    magic, version, dim, grid_h, grid_w, n_heads, label, has_mask, image_h, image_w = (
        _HEADER.unpack_from(blob, 0)
    )
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    n = grid_h * grid_w
    off = _HEADER.size
    features = np.frombuffer(blob, "<f4", n * dim, off).reshape(n, dim).copy()
    off += 4 * n * dim
    attention = np.frombuffer(blob, "<f4", n_heads * n, off).reshape(n_heads, n).copy()
    off += 4 * n_heads * n
    mask = None
    if has_mask:
        mask = (
            np.frombuffer(blob, np.uint8, image_h * image_w, off)
            .reshape(image_h, image_w)
            .copy()
        )
    return GadfRecord(
        grid_h=grid_h, grid_w=grid_w, dim=dim, features=features, n_heads=n_heads,
        attention=attention, label=label, image_h=image_h, image_w=image_w,
        pixel_mask=mask,
    )


def write_manifest(entries: list[dict], path: Path | str, root: str = ".") -> None:
    """Manifest JSON: {"root", "entries": [{"path", "split", "class", "label"}]}."""
    Path(path).write_text(
        json.dumps({"root": root, "entries": entries}, indent=2) + "\n"
    )
