"""Deterministic synthetic feature datasets with a brute-force oracle.

Each grid cell gets a fixed anchor vector; normal records scatter around
their anchors with small Gaussian noise.  Anomalous test records shift one
contiguous block of cells by a fixed magnitude in a random direction and
carry a pixel mask marking that block.  Because the generative recipe is
known, per-patch distance to the anchors provides an independent upper-bound
scorer for anything trained on the data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from padkit.errors import ConfigError, FormatError
from padkit.records import (
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
    DatasetManifest,
    FeatureRecord,
    ManifestEntry,
    load_manifest,
    normalize_attention,
    read_record,
    save_manifest,
    write_record,
)
from padkit.rng import PURPOSE_SYNTH, CounterRng

PATCH_PX = 14  # rendered pixel size of one grid cell
ANCHOR_NOISE = 0.1  # per-component std of normal records around anchors
ANCHORS_MAGIC = b"GADA"
ANCHORS_VERSION = 1


@dataclass
class SynthConfig:
    grid_h: int = 8
    grid_w: int = 8
    dim: int = 64
    n_heads: int = 4
    n_train: int = 200
    n_test_normal: int = 100
    n_test_anomalous: int = 100
    anomaly_shift: float = 2.0
    anomaly_extent: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        counts = (
            self.grid_h, self.grid_w, self.dim, self.n_heads,
            self.n_train, self.n_test_normal, self.n_test_anomalous,
        )
        if any(c < 1 for c in counts):
            raise ConfigError("all synthetic counts must be >= 1")
        if self.anomaly_shift < 0:
            raise ConfigError(f"anomaly_shift must be >= 0, got {self.anomaly_shift}")
        if not 0 < self.anomaly_extent <= 1:
            raise ConfigError(f"anomaly_extent must be in (0, 1], got {self.anomaly_extent}")

    def to_dict(self) -> dict:
        return {
            "grid_h": self.grid_h, "grid_w": self.grid_w, "dim": self.dim,
            "n_heads": self.n_heads, "n_train": self.n_train,
            "n_test_normal": self.n_test_normal, "n_test_anomalous": self.n_test_anomalous,
            "anomaly_shift": self.anomaly_shift, "anomaly_extent": self.anomaly_extent,
            "seed": self.seed,
        }


def _block_cells(config: SynthConfig, rng: CounterRng) -> np.ndarray:
    """Pick a contiguous near-rectangular block of ceil(extent*N) cells."""
    n = config.grid_h * config.grid_w
    m = int(np.ceil(config.anomaly_extent * n))
    w = min(int(np.ceil(np.sqrt(m))), config.grid_w)
    h = min(int(np.ceil(m / w)), config.grid_h)
    if h * w < m:  # grid too narrow for a square-ish block; widen
        w = min(int(np.ceil(m / h)), config.grid_w)
    top = rng.integer(config.grid_h - h + 1)
    left = rng.integer(config.grid_w - w + 1)
    cells = []
    for r in range(h):
        for c in range(w):
            if len(cells) == m:
                break
            cells.append((top + r) * config.grid_w + (left + c))
    return np.array(cells, dtype=np.int64)


def _attention_maps(config: SynthConfig, rng: CounterRng) -> np.ndarray:
    n = config.grid_h * config.grid_w
    raw = 1.0 + 0.5 * rng.uniform(config.n_heads * n).reshape(config.n_heads, n)
    return normalize_attention(raw)


def _make_record(
    config: SynthConfig,
    anchors: np.ndarray,
    rng: CounterRng,
    anomalous: bool,
) -> FeatureRecord:
    n = config.grid_h * config.grid_w
    features = anchors + ANCHOR_NOISE * rng.gaussian_matrix((n, config.dim))
    pixel_mask = None
    label = LABEL_NORMAL
    if anomalous:
        cells = _block_cells(config, rng)
        direction = rng.gaussian_matrix((config.dim,))
        direction /= np.linalg.norm(direction)
        features[cells] += config.anomaly_shift * direction
        label = LABEL_ANOMALOUS
        mask_grid = np.zeros((config.grid_h, config.grid_w), dtype=np.uint8)
        mask_grid.reshape(-1)[cells] = 1
        pixel_mask = np.kron(mask_grid, np.ones((PATCH_PX, PATCH_PX), dtype=np.uint8))
    return FeatureRecord(
        grid_h=config.grid_h,
        grid_w=config.grid_w,
        dim=config.dim,
        features=features.astype(np.float32),
        n_heads=config.n_heads,
        attention=_attention_maps(config, rng),
        label=label,
        image_h=config.grid_h * PATCH_PX,
        image_w=config.grid_w * PATCH_PX,
        pixel_mask=pixel_mask,
    )


def write_anchors(anchors: np.ndarray, config: SynthConfig, path: Path) -> None:
    """Anchors sidecar: magic "GADA" | u32 version | u32 dim | u16 gh | u16 gw |
    f32 anchors[gh*gw][dim] row-major, little-endian."""
    header = struct.pack(
        "<4sIIHH", ANCHORS_MAGIC, ANCHORS_VERSION, config.dim, config.grid_h, config.grid_w
    )
    path.write_bytes(header + np.ascontiguousarray(anchors, dtype="<f4").tobytes())


def read_anchors(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FormatError(f"anchors file missing: {path}")
    raw = path.read_bytes()
    magic, version, dim, gh, gw = struct.unpack_from("<4sIIHH", raw, 0)
    if magic != ANCHORS_MAGIC:
        raise FormatError(f"bad anchors magic {magic!r}")
    if version != ANCHORS_VERSION:
        raise FormatError(f"unsupported anchors version {version}")
    expected = 16 + 4 * gh * gw * dim
    if len(raw) != expected:
        raise FormatError(f"anchors file has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(gh * gw, dim).astype(np.float64)


def generate(config: SynthConfig, out_dir: Path | str) -> DatasetManifest:
    """Write a full synthetic dataset and return its loaded manifest.

    Layout under ``out_dir``: ``data/*.gadf``, ``manifest.json``,
    ``anchors.bin``, and ``synth_config.json``.  The same config (seed
    included) reproduces every file bitwise.
    """
    out_dir = Path(out_dir)
    data_dir = out_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    root = CounterRng(config.seed)
    n = config.grid_h * config.grid_w
    anchors = root.spawn(PURPOSE_SYNTH, 0).gaussian_matrix((n, config.dim))
    write_anchors(anchors, config, out_dir / "anchors.bin")

    entries: list[ManifestEntry] = []
    record_index = 1  # stream 0 belongs to the anchors
    for kind, count, split, anomalous in (
        ("train", config.n_train, "train", False),
        ("test_normal", config.n_test_normal, "test", False),
        ("test_anomalous", config.n_test_anomalous, "test", True),
    ):
        for i in range(count):
            rng = root.spawn(PURPOSE_SYNTH, record_index)
            record_index += 1
            record = _make_record(config, anchors, rng, anomalous)
            rel = f"data/{kind}_{i:04d}.gadf"
            write_record(record, out_dir / rel)
            entries.append(
                ManifestEntry(
                    path=rel,
                    split=split,
                    class_name="synthetic",
                    label=LABEL_ANOMALOUS if anomalous else LABEL_NORMAL,
                )
            )
    manifest = DatasetManifest(root=out_dir, entries=entries)
    save_manifest(manifest, out_dir / "manifest.json", root=".")
    (out_dir / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return load_manifest(out_dir / "manifest.json")


def load_config(dataset_dir: Path | str) -> SynthConfig:
    path = Path(dataset_dir) / "synth_config.json"
    if not path.is_file():
        raise FormatError(f"synthetic config missing: {path}")
    return SynthConfig(**json.loads(path.read_text()))


def oracle_scores(
    dataset_dir: Path | str, split: str = "test"
) -> list[tuple[str, int, float]]:
    """Ground-truth-aware scores: mean of the top ceil(extent*N) anchor distances.

    Returns (path, label, score) per record in manifest order.  Scores upper
    bound what any detector trained on the same files can achieve.
    """
    dataset_dir = Path(dataset_dir)
    config = load_config(dataset_dir)
    anchors = read_anchors(dataset_dir / "anchors.bin")
    manifest = load_manifest(dataset_dir / "manifest.json")
    n = config.grid_h * config.grid_w
    k = int(np.ceil(config.anomaly_extent * n))
    out = []
    for entry in manifest.split_entries(split):
        record = read_record(manifest.resolve(entry))
        dist = np.sum(
            (record.features.astype(np.float64) - anchors) ** 2, axis=1
        )
        top = np.partition(dist, n - k)[n - k :]
        out.append((entry.path, entry.label, float(top.mean())))
    return out


def patch_distances(record: FeatureRecord, anchors: np.ndarray) -> np.ndarray:
    """Squared distance of each patch feature to its cell anchor."""
    return np.sum((record.features.astype(np.float64) - anchors) ** 2, axis=1)
