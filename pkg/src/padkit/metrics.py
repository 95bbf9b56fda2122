"""AUROC estimation, per-class reports, few-shot protocol, and sweeps.

The AUROC estimator is the Mann-Whitney statistic computed by rank
summation with midranks for ties, which makes it exactly equal to the
pairwise definition P(anomalous > normal) + 0.5 * P(equal).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from padkit.errors import EvaluationError, ConfigError
from padkit.records import DatasetManifest
from padkit.rng import PURPOSE_SUBSAMPLE, CounterRng
from padkit.scoring import AnomalyMap, RecordScore, score_dataset
from padkit.training import TrainConfig, few_shot_manifest, train


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks (1-based) with tied values sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # average of ranks i+1 .. j+1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def compute_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outscores a random negative (ties half).

    Computed exactly via the rank-sum form of the Mann-Whitney U statistic.
    Requires both classes to be present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise EvaluationError(f"scores {scores.shape} and labels {labels.shape} differ")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUROC needs at least one positive and one negative sample")
    ranks = _midranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(
    maps: Sequence[AnomalyMap | np.ndarray],
    masks: Sequence[np.ndarray],
    pooled: bool = True,
) -> float:
    """AUROC over pixels; default pools every pixel of every image.

    Normal images contribute all-negative pixels via all-zero masks.  With
    ``pooled=False`` the AUROC is instead averaged over images that contain
    both classes of pixel.
    """
    if len(maps) != len(masks):
        raise EvaluationError(f"{len(maps)} maps vs {len(masks)} masks")
    flat_scores, flat_labels = [], []
    per_image = []
    for i, (amap, mask) in enumerate(zip(maps, masks)):
        values = amap.values if isinstance(amap, AnomalyMap) else np.asarray(amap)
        mask = np.asarray(mask)
        if values.shape != mask.shape:
            raise EvaluationError(
                f"pair {i}: map shape {values.shape} != mask shape {mask.shape}"
            )
        v = values.ravel()
        m = (mask.ravel() > 0).astype(np.int8)
        if pooled:
            flat_scores.append(v)
            flat_labels.append(m)
        elif m.any() and not m.all():
            per_image.append(compute_auroc(v, m))
    if pooled:
        return compute_auroc(np.concatenate(flat_scores), np.concatenate(flat_labels))
    if not per_image:
        raise EvaluationError("no image contains both pixel classes")
    return float(np.mean(per_image))


@dataclass
class EvalReport:
    """Per-class and aggregate AUROC plus the configuration that produced it."""

    per_class_image: dict[str, float]
    mean_image_auroc: float
    per_class_pixel: dict[str, float] = field(default_factory=dict)
    mean_pixel_auroc: float | None = None
    config_echo: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_class_image_auroc": self.per_class_image,
                "mean_image_auroc": self.mean_image_auroc,
                "per_class_pixel_auroc": self.per_class_pixel or None,
                "mean_pixel_auroc": self.mean_pixel_auroc,
                "config": self.config_echo,
                "warnings": self.warnings,
            },
            indent=2,
            sort_keys=True,
        )


def build_report(
    results: Sequence[RecordScore],
    masks_by_path: dict[str, np.ndarray] | None = None,
    config_echo: dict | None = None,
) -> EvalReport:
    """Group results by class and compute unweighted class-mean AUROCs.

    ``masks_by_path`` supplies ground-truth pixel masks (keyed like result
    paths) for the pixel metric; results must then carry maps.  Classes
    lacking both labels are skipped with a warning.
    """
    by_class: dict[str, list[RecordScore]] = {}
    for r in results:
        by_class.setdefault(r.class_name, []).append(r)
    report = EvalReport(
        per_class_image={}, mean_image_auroc=float("nan"), config_echo=config_echo or {}
    )
    for class_name in sorted(by_class):
        group = by_class[class_name]
        labels = np.array([r.label for r in group])
        if len(set(labels.tolist())) < 2:
            report.warnings.append(f"class {class_name!r} has a single label; skipped")
            continue
        scores = np.array([r.image_score for r in group])
        report.per_class_image[class_name] = compute_auroc(scores, labels)
        if masks_by_path is not None:
            maps, masks = [], []
            for r in group:
                if r.map is None:
                    raise EvaluationError(f"{r.path}: pixel metric requested but no map")
                mask = masks_by_path.get(r.path)
                if mask is None:
                    mask = np.zeros(r.map.values.shape, dtype=np.uint8)
                maps.append(r.map)
                masks.append(mask)
            report.per_class_pixel[class_name] = pixel_auroc(maps, masks)
    if not report.per_class_image:
        raise EvaluationError("no class had both normal and anomalous test records")
    report.mean_image_auroc = float(np.mean(list(report.per_class_image.values())))
    if report.per_class_pixel:
        report.mean_pixel_auroc = float(np.mean(list(report.per_class_pixel.values())))
    return report


# --- few-shot protocol --------------------------------------------------


@dataclass
class FewShotResult:
    shots: int
    aurocs: list[float]
    mean: float
    std: float

    def formatted(self) -> str:
        return format_mean_std(self.mean, self.std)


def format_mean_std(mean: float, std: float) -> str:
    """Render an AUROC as percent with seed spread, e.g. ``87.0±1.4``."""
    return f"{100.0 * mean:.1f}±{100.0 * std:.1f}"


def few_shot_eval(
    manifest: DatasetManifest,
    shots_list: Sequence[int],
    config: TrainConfig,
    out_dir: Path | str,
    n_seeds: int = 5,
    top_k: int | None = None,
) -> list[FewShotResult]:
    """Train from scratch on per-class subsamples and report mean +- std.

    For each shot count and each of ``n_seeds`` seeds, ``shots`` training
    records per class are drawn uniformly without replacement, a fresh model
    is trained, and image AUROC is computed on the full test split.
    """
    out_dir = Path(out_dir)
    results = []
    for shots in shots_list:
        if shots < 1:
            raise ConfigError(f"shots must be >= 1, got {shots}")
        aurocs = []
        for seed_idx in range(n_seeds):
            sub_rng = CounterRng(config.seed).spawn(PURPOSE_SUBSAMPLE, shots * 1000 + seed_idx)
            sub_manifest = few_shot_manifest(manifest, shots, sub_rng)
            run_config = _with_seed(config, config.seed + seed_idx)
            run_dir = out_dir / f"shots{shots}_seed{seed_idx}"
            model, _ = train(sub_manifest, run_config, run_dir)
            k = top_k if top_k is not None else model.n_patches
            scored = score_dataset(model, sub_manifest, "test", k=k, with_maps=False)
            labels = np.array([r.label for r in scored])
            scores = np.array([r.image_score for r in scored])
            aurocs.append(compute_auroc(scores, labels))
        results.append(
            FewShotResult(
                shots=shots,
                aurocs=aurocs,
                mean=float(np.mean(aurocs)),
                std=float(np.std(aurocs)),
            )
        )
    return results


def _with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    from dataclasses import replace

    return replace(config, seed=seed)


# --- hyperparameter sweeps ----------------------------------------------

SWEEP_AXES = ("k", "epsilon", "strategy")


@dataclass
class SweepRow:
    value: str
    image_auroc: float


def sweep(
    manifest: DatasetManifest,
    axis: str,
    values: Sequence,
    config: TrainConfig,
    out_dir: Path | str,
    top_k: int | None = None,
) -> list[SweepRow]:
    """AUROC as a function of one knob; emits CSV and an SVG plot.

    The K axis trains once and only re-scores; epsilon and strategy retrain
    per value.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[SweepRow] = []
    if axis == "k":
        model, _ = train(manifest, config, out_dir / "model")
        for value in values:
            k = int(value)
            scored = score_dataset(model, manifest, "test", k=k, with_maps=False)
            rows.append(SweepRow(value=str(k), image_auroc=_auroc_of(scored)))
    else:
        from dataclasses import replace

        for value in values:
            if axis == "epsilon":
                dist = replace(config.distortion, epsilon=float(value))
                label = f"{float(value):g}"
            else:
                from padkit.distortion import parse_strategies

                dist = replace(config.distortion, strategies=parse_strategies(str(value)))
                label = str(value)
            run_config = replace(config, distortion=dist)
            model, _ = train(manifest, run_config, out_dir / f"model_{axis}_{label}")
            k = top_k if top_k is not None else model.n_patches
            scored = score_dataset(model, manifest, "test", k=k, with_maps=False)
            rows.append(SweepRow(value=label, image_auroc=_auroc_of(scored)))
    _write_sweep_outputs(rows, axis, out_dir)
    return rows


def _auroc_of(scored: Sequence[RecordScore]) -> float:
    labels = np.array([r.label for r in scored])
    scores = np.array([r.image_score for r in scored])
    return compute_auroc(scores, labels)


def _write_sweep_outputs(rows: Sequence[SweepRow], axis: str, out_dir: Path) -> None:
    csv_path = out_dir / f"sweep_{axis}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis, "image_auroc"])
        for row in rows:
            writer.writerow([row.value, f"{row.image_auroc:.6f}"])
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = np.arange(len(rows))
    ax.plot(xs, [r.image_auroc for r in rows], marker="o")
    ax.set_xticks(xs)
    ax.set_xticklabels([r.value for r in rows], rotation=30, ha="right")
    ax.set_xlabel(axis)
    ax.set_ylabel("image AUROC")
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / f"sweep_{axis}.svg")
    plt.close(fig)
