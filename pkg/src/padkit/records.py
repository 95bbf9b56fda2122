"""Feature records, the GADF binary format, and dataset manifests.

A feature record carries one image's patch-feature grid, per-head attention
of the classification query over patches, a label, and (for anomalous test
images) a ground-truth pixel mask.  Records decouple the detection engine
from whichever backbone produced the features.

GADF file layout, all integers little-endian::

    magic "GADF" | u32 version=1 | u32 dim | u16 grid_h | u16 grid_w |
    u16 n_heads | u8 label | u8 has_pixel_mask | u32 image_h | u32 image_w |
    f32 features[grid_h*grid_w][dim]  (row-major) |
    f32 attention[n_heads][grid_h*grid_w] |
    u8 pixel_mask[image_h*image_w]    (row-major, only if has_pixel_mask)

Parsing is strict: wrong magic, unknown version, size mismatches, and
invariant violations each raise a distinct typed error; a file can never
silently parse to a different record.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from padkit.errors import (
    BadMagicError,
    ManifestError,
    NonFiniteFeaturesError,
    RecordInvariantError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from padkit.rng import PURPOSE_SHUFFLE, CounterRng

MAGIC = b"GADF"
FORMAT_VERSION = 1

LABEL_NORMAL = 0
LABEL_ANOMALOUS = 1
LABEL_UNKNOWN = 255
_VALID_LABELS = (LABEL_NORMAL, LABEL_ANOMALOUS, LABEL_UNKNOWN)

ATTENTION_SUM_TOL = 1e-4

_HEADER = struct.Struct("<4sIIHHHBBII")
HEADER_SIZE = _HEADER.size  # 28 bytes


@dataclass(eq=False)
class FeatureRecord:
    """One image's patch features, attention rows, label, and optional mask."""

    grid_h: int
    grid_w: int
    dim: int
    features: np.ndarray  # float32 [grid_h*grid_w, dim]
    n_heads: int
    attention: np.ndarray  # float32 [n_heads, grid_h*grid_w]
    label: int
    image_h: int
    image_w: int
    pixel_mask: np.ndarray | None = None  # uint8 [image_h, image_w], values 0/1

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> None:
        """Raise a typed error if any structural invariant is violated."""
        if self.grid_h < 1 or self.grid_w < 1 or self.dim < 1:
            raise RecordInvariantError(
                f"grid and dim must be positive, got {self.grid_h}x{self.grid_w}, dim={self.dim}"
            )
        if self.n_heads < 0:
            raise RecordInvariantError(f"n_heads must be >= 0, got {self.n_heads}")
        if self.image_h < 1 or self.image_w < 1:
            raise RecordInvariantError(
                f"image dimensions must be positive, got {self.image_h}x{self.image_w}"
            )
        if self.label not in _VALID_LABELS:
            raise RecordInvariantError(f"label must be one of {_VALID_LABELS}, got {self.label}")
        n = self.n_patches
        if self.features.shape != (n, self.dim) or self.features.dtype != np.float32:
            raise RecordInvariantError(
                f"features must be float32 [{n}, {self.dim}], got "
                f"{self.features.dtype} {self.features.shape}"
            )
        if not np.all(np.isfinite(self.features)):
            raise NonFiniteFeaturesError("features contain NaN or Inf")
        if self.attention.shape != (self.n_heads, n) or self.attention.dtype != np.float32:
            raise RecordInvariantError(
                f"attention must be float32 [{self.n_heads}, {n}], got "
                f"{self.attention.dtype} {self.attention.shape}"
            )
        if self.n_heads > 0:
            if not np.all(np.isfinite(self.attention)):
                raise RecordInvariantError("attention contains NaN or Inf")
            if np.any(self.attention < 0):
                raise RecordInvariantError("attention rows must be nonnegative")
            sums = self.attention.sum(axis=1, dtype=np.float64)
            bad = np.nonzero(np.abs(sums - 1.0) > ATTENTION_SUM_TOL)[0]
            if bad.size:
                raise RecordInvariantError(
                    f"attention row {bad[0]} sums to {sums[bad[0]]:.6f}, expected 1 "
                    f"within {ATTENTION_SUM_TOL}"
                )
        if self.pixel_mask is not None:
            if self.label not in (LABEL_ANOMALOUS, LABEL_UNKNOWN):
                raise RecordInvariantError("pixel mask present but label is normal")
            if (
                self.pixel_mask.shape != (self.image_h, self.image_w)
                or self.pixel_mask.dtype != np.uint8
            ):
                raise RecordInvariantError(
                    f"pixel_mask must be uint8 [{self.image_h}, {self.image_w}], got "
                    f"{self.pixel_mask.dtype} {self.pixel_mask.shape}"
                )
            if np.any(self.pixel_mask > 1):
                raise RecordInvariantError("pixel_mask values must be 0 or 1")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        scalars = ("grid_h", "grid_w", "dim", "n_heads", "label", "image_h", "image_w")
        if any(getattr(self, f) != getattr(other, f) for f in scalars):
            return False
        if not _bitwise_equal(self.features, other.features):
            return False
        if not _bitwise_equal(self.attention, other.attention):
            return False
        if (self.pixel_mask is None) != (other.pixel_mask is None):
            return False
        if self.pixel_mask is not None and not np.array_equal(self.pixel_mask, other.pixel_mask):
            return False
        return True


def _bitwise_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and bool(np.array_equal(a.view(np.uint32), b.view(np.uint32)))


def normalize_attention(attention: np.ndarray) -> np.ndarray:
    """Rescale each attention row to sum exactly to 1 (float32).

    Exporters call this once so that downstream validation can insist on unit
    row sums regardless of whether the backbone's softmax mass included the
    classification token itself.
    """
    att = np.asarray(attention, dtype=np.float64)
    sums = att.sum(axis=1, keepdims=True)
    if np.any(sums <= 0) or not np.all(np.isfinite(sums)):
        raise RecordInvariantError("attention rows must have positive finite mass")
    return (att / sums).astype(np.float32)


def record_byte_size(
    grid_h: int, grid_w: int, dim: int, n_heads: int, mask_pixels: int = 0
) -> int:
    """Exact on-disk size of a GADF file with these dimensions."""
    n = grid_h * grid_w
    return HEADER_SIZE + 4 * n * dim + 4 * n_heads * n + mask_pixels


def write_record(record: FeatureRecord, path: Path | str) -> None:
    """Serialize ``record`` to ``path`` in GADF format.

    The record is validated first; invariant violations are rejected before
    any bytes are written.
    """
    record.validate()
    Path(path).write_bytes(record_to_bytes(record))


def record_to_bytes(record: FeatureRecord) -> bytes:
    has_mask = record.pixel_mask is not None
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        record.dim,
        record.grid_h,
        record.grid_w,
        record.n_heads,
        record.label,
        1 if has_mask else 0,
        record.image_h,
        record.image_w,
    )
    parts = [
        header,
        np.ascontiguousarray(record.features, dtype="<f4").tobytes(),
        np.ascontiguousarray(record.attention, dtype="<f4").tobytes(),
    ]
    if has_mask:
        parts.append(np.ascontiguousarray(record.pixel_mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def read_record(path: Path | str) -> FeatureRecord:
    """Parse and validate a GADF file.

    Raises:
        BadMagicError: the file does not start with "GADF".
        UnsupportedVersionError: unknown format version.
        TruncatedPayloadError: byte count differs from the header's claim.
        RecordInvariantError / NonFiniteFeaturesError: payload parses but
            violates a record invariant.
    """
    return record_from_bytes(Path(path).read_bytes())


def record_from_bytes(blob: bytes) -> FeatureRecord:
    if len(blob) < HEADER_SIZE:
        raise TruncatedPayloadError(
            f"file has {len(blob)} bytes, shorter than the {HEADER_SIZE}-byte header"
        )
    magic, version, dim, grid_h, grid_w, n_heads, label, has_mask, image_h, image_w = (
        _HEADER.unpack_from(blob, 0)
    )
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    if has_mask not in (0, 1):
        raise RecordInvariantError(f"has_pixel_mask must be 0 or 1, got {has_mask}")
    mask_pixels = image_h * image_w if has_mask else 0
    expected = record_byte_size(grid_h, grid_w, dim, n_heads, mask_pixels)
    if len(blob) != expected:
        raise TruncatedPayloadError(
            f"expected {expected} bytes for {grid_h}x{grid_w} dim={dim} heads={n_heads} "
            f"mask={bool(has_mask)}, got {len(blob)}"
        )
    n = grid_h * grid_w
    off = HEADER_SIZE
    features = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    off += 4 * n * dim
    attention = np.frombuffer(blob, dtype="<f4", count=n_heads * n, offset=off).reshape(
        n_heads, n
    )
    off += 4 * n_heads * n
    pixel_mask = None
    if has_mask:
        pixel_mask = np.frombuffer(blob, dtype=np.uint8, count=mask_pixels, offset=off).reshape(
            image_h, image_w
        )
    record = FeatureRecord(
        grid_h=grid_h,
        grid_w=grid_w,
        dim=dim,
        features=features.copy(),
        n_heads=n_heads,
        attention=attention.copy(),
        label=label,
        image_h=image_h,
        image_w=image_w,
        pixel_mask=None if pixel_mask is None else pixel_mask.copy(),
    )
    record.validate()
    return record


# --- manifests ---------------------------------------------------------

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
_VALID_SPLITS = (SPLIT_TRAIN, SPLIT_TEST)


@dataclass
class ManifestEntry:
    path: str
    split: str
    class_name: str
    label: int


@dataclass
class DatasetManifest:
    """Resolved dataset manifest: a root directory plus validated entries."""

    root: Path
    entries: list[ManifestEntry]
    warnings: list[str] = field(default_factory=list)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in _VALID_SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path


def load_manifest(path: Path | str, check_files: bool = True) -> DatasetManifest:
    """Load and validate a JSON dataset manifest.

    The train split must contain only normal-labeled entries (one-class
    training); a violation reports the offending path.  A relative root is
    resolved against the manifest file's directory.  An empty test split is
    accepted but flagged in ``warnings``.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "root" not in doc or "entries" not in doc:
        raise ManifestError('manifest must be an object with "root" and "entries"')
    root = Path(doc["root"])
    if not root.is_absolute():
        root = path.parent / root
    entries: list[ManifestEntry] = []
    for i, raw in enumerate(doc["entries"]):
        try:
            entry = ManifestEntry(
                path=raw["path"],
                split=raw["split"],
                class_name=raw["class"],
                label=int(raw["label"]),
            )
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"entry {i} is malformed: {exc}") from exc
        if entry.split not in _VALID_SPLITS:
            raise ManifestError(f"entry {i} has unknown split {entry.split!r}")
        if entry.label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
            raise ManifestError(f"entry {i} has invalid label {entry.label}")
        if entry.split == SPLIT_TRAIN and entry.label != LABEL_NORMAL:
            raise ManifestError(
                f"train split must be normal-only, entry {entry.path!r} is labeled anomalous"
            )
        if check_files and not (root / entry.path).is_file():
            raise ManifestError(f"entry path does not resolve to a file: {root / entry.path}")
        entries.append(entry)
    manifest = DatasetManifest(root=root, entries=entries)
    if not manifest.split_entries(SPLIT_TEST):
        manifest.warnings.append("test split is empty")
    return manifest


def save_manifest(manifest: DatasetManifest, path: Path | str, root: str | None = None) -> None:
    doc = {
        "root": root if root is not None else str(manifest.root),
        "entries": [
            {"path": e.path, "split": e.split, "class": e.class_name, "label": e.label}
            for e in manifest.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def split_order(
    manifest: DatasetManifest, split: str, shuffle_seed: int | None = None
) -> list[ManifestEntry]:
    """Entries of a split, in manifest order or seeded-shuffle order."""
    entries = manifest.split_entries(split)
    if shuffle_seed is None:
        return entries
    rng = CounterRng(shuffle_seed).spawn(PURPOSE_SHUFFLE)
    perm = rng.permutation(len(entries))
    return [entries[i] for i in perm]


def iterate_split(
    manifest: DatasetManifest, split: str, shuffle_seed: int | None = None
) -> Iterator[FeatureRecord]:
    """Yield records of a split; deterministic order for a given seed.

    The one-class rule is enforced on the files themselves: a train-split
    file whose stored label is anomalous is rejected even if the manifest
    entry claimed otherwise.
    """
    for entry in split_order(manifest, split, shuffle_seed):
        record = read_record(manifest.resolve(entry))
        if split == SPLIT_TRAIN and record.label == LABEL_ANOMALOUS:
            raise ManifestError(
                f"train record {entry.path!r} is labeled anomalous in its file"
            )
        yield record


def load_split(
    manifest: DatasetManifest, split: str, shuffle_seed: int | None = None
) -> list[FeatureRecord]:
    return list(iterate_split(manifest, split, shuffle_seed))


def check_uniform_geometry(records: Sequence[FeatureRecord]) -> tuple[int, int, int]:
    """Assert all records share (grid_h, grid_w, dim); returns that triple."""
    if not records:
        raise ManifestError("no records to inspect")
    first = (records[0].grid_h, records[0].grid_w, records[0].dim)
    for r in records[1:]:
        if (r.grid_h, r.grid_w, r.dim) != first:
            raise RecordInvariantError(
                f"heterogeneous geometry: {first} vs ({r.grid_h}, {r.grid_w}, {r.dim})"
            )
    return first
