"""Synthetic dataset generation and the anchor-distance oracle."""

import numpy as np
import pytest

from padkit.errors import ConfigError, FormatError
from padkit.metrics import compute_auroc
from padkit.records import iterate_split, read_record
from padkit.synthetic import (
    ANCHOR_NOISE,
    PATCH_PX,
    SynthConfig,
    generate,
    load_config,
    oracle_scores,
    patch_distances,
    read_anchors,
)

TINY = dict(grid_h=2, grid_w=3, dim=8, n_heads=2, n_train=4,
            n_test_normal=3, n_test_anomalous=3)


def test_generation_is_bitwise_deterministic(tmp_path):
    config = SynthConfig(**TINY, seed=7)
    m1 = generate(config, tmp_path / "a")
    m2 = generate(config, tmp_path / "b")
    for e1, e2 in zip(m1.entries, m2.entries):
        assert e1.path == e2.path
        assert (m1.root / e1.path).read_bytes() == (m2.root / e2.path).read_bytes()
    assert (tmp_path / "a" / "anchors.bin").read_bytes() == (
        tmp_path / "b" / "anchors.bin"
    ).read_bytes()


def test_generated_records_satisfy_invariants(tmp_path):
    manifest = generate(SynthConfig(**TINY, seed=1), tmp_path / "ds")
    for split in ("train", "test"):
        for record in iterate_split(manifest, split):
            record.validate()
            assert record.grid_h == 2 and record.grid_w == 3
            assert record.image_h == 2 * PATCH_PX


def test_anomalous_records_carry_block_masks(tmp_path):
    manifest = generate(SynthConfig(**TINY, anomaly_extent=0.5, seed=2), tmp_path / "ds")
    anomalous = [e for e in manifest.split_entries("test") if e.label == 1]
    assert anomalous
    for entry in anomalous:
        record = read_record(manifest.resolve(entry))
        assert record.pixel_mask is not None
        cells = record.pixel_mask[::PATCH_PX, ::PATCH_PX]
        assert cells.sum() == int(np.ceil(0.5 * 6))
        # mask is constant within each patch cell
        expanded = np.kron(cells, np.ones((PATCH_PX, PATCH_PX), dtype=np.uint8))
        assert np.array_equal(expanded, record.pixel_mask)


def test_extent_one_marks_every_patch(tmp_path):
    manifest = generate(SynthConfig(**TINY, anomaly_extent=1.0, seed=3), tmp_path / "ds")
    for entry in manifest.split_entries("test"):
        if entry.label == 1:
            record = read_record(manifest.resolve(entry))
            assert record.pixel_mask.all()


def test_oracle_distances_zero_without_sampling_noise(tmp_path):
    config = SynthConfig(**TINY, seed=4)
    generate(config, tmp_path / "ds")
    anchors = read_anchors(tmp_path / "ds" / "anchors.bin")
    record = read_record(tmp_path / "ds" / "data" / "train_0000.gadf")
    record.features = anchors.astype(np.float32)
    assert np.allclose(patch_distances(record, anchors), 0.0, atol=1e-10)


def test_oracle_shifted_blocks_have_distance_near_delta_squared(tmp_path):
    config = SynthConfig(grid_h=4, grid_w=4, dim=32, n_heads=2, n_train=2,
                         n_test_normal=2, n_test_anomalous=20,
                         anomaly_shift=2.0, anomaly_extent=0.25, seed=5)
    manifest = generate(config, tmp_path / "ds")
    anchors = read_anchors(tmp_path / "ds" / "anchors.bin")
    shifted, clean = [], []
    for entry in manifest.split_entries("test"):
        record = read_record(manifest.resolve(entry))
        dist = patch_distances(record, anchors)
        if record.pixel_mask is None:
            clean.extend(dist)
        else:
            patch_mask = record.pixel_mask[::PATCH_PX, ::PATCH_PX].astype(bool).ravel()
            shifted.extend(dist[patch_mask])
            clean.extend(dist[~patch_mask])
    # shifted distance concentrates near delta^2 + E||noise||^2
    expected = 2.0**2 + ANCHOR_NOISE**2 * 32
    assert abs(np.mean(shifted) - expected) < 0.5
    assert np.mean(clean) < 0.7


def test_oracle_aces_default_configuration(tmp_path):
    manifest = generate(
        SynthConfig(n_train=2, n_test_normal=40, n_test_anomalous=40), tmp_path / "ds"
    )
    scored = oracle_scores(tmp_path / "ds")
    labels = np.array([label for _, label, _ in scored])
    values = np.array([score for _, _, score in scored])
    assert compute_auroc(values, labels) >= 0.99


def test_oracle_on_zero_shift_is_chance(tmp_path):
    manifest = generate(
        SynthConfig(grid_h=4, grid_w=4, dim=16, n_heads=2, n_train=2,
                    n_test_normal=100, n_test_anomalous=100,
                    anomaly_shift=0.0, seed=6),
        tmp_path / "ds",
    )
    scored = oracle_scores(tmp_path / "ds")
    labels = np.array([label for _, label, _ in scored])
    values = np.array([score for _, _, score in scored])
    assert 0.4 <= compute_auroc(values, labels) <= 0.6


def test_oracle_requires_anchor_file(tmp_path):
    generate(SynthConfig(**TINY, seed=8), tmp_path / "ds")
    (tmp_path / "ds" / "anchors.bin").unlink()
    with pytest.raises(FormatError, match="anchors"):
        oracle_scores(tmp_path / "ds")


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(grid_h=0)
    with pytest.raises(ConfigError):
        SynthConfig(anomaly_extent=0.0)
    with pytest.raises(ConfigError):
        SynthConfig(anomaly_extent=1.5)


def test_config_sidecar_round_trip(tmp_path):
    config = SynthConfig(**TINY, anomaly_shift=1.5, seed=11)
    generate(config, tmp_path / "ds")
    assert load_config(tmp_path / "ds") == config


def test_attention_rows_jittered_but_normalized(tmp_path):
    manifest = generate(SynthConfig(**TINY, seed=12), tmp_path / "ds")
    record = next(iterate_split(manifest, "train"))
    sums = record.attention.sum(axis=1, dtype=np.float64)
    assert np.allclose(sums, 1.0, atol=1e-4)
    assert record.attention.std() > 0  # jitter present, not exactly uniform
    assert np.all(record.attention > 0)
