"""Optimization loop: AdamW with cosine annealing over clean/distorted pairs.

Each step takes a batch of training records and builds two supervised
examples per record: the untouched features with an all-false target mask,
and a distorted copy with its distortion mask.  The discriminator minimizes
mean binary cross-entropy over both.  Evaluation runs at a configurable
cadence on the test split; the best checkpoint (by image-level AUROC) is
retained alongside the final one.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from padkit import discriminator as disc
from padkit.distortion import DistortionConfig, distort
from padkit.errors import ConfigError, ManifestError, NonFiniteComputationError, ShapeError
from padkit.records import DatasetManifest, FeatureRecord, check_uniform_geometry, load_split
from padkit.rng import (
    PURPOSE_DISTORT,
    PURPOSE_DROPOUT,
    PURPOSE_INIT,
    PURPOSE_SHUFFLE,
    CounterRng,
)


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the reference recipe."""

    lr0: float = 5e-4
    schedule_floor: float = 0.2
    betas: tuple[float, float] = (0.9, 0.999)
    adamw_eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 20
    # Run an eval pass every this many training records; None means once per
    # epoch.
    eval_every_images: int | None = 250
    # Top-K used for the image score during in-training evaluation; None
    # means all patches.
    eval_top_k: int | None = None
    distortion: DistortionConfig = field(default_factory=DistortionConfig)
    hyper: disc.Hyper = field(default_factory=disc.Hyper)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 <= self.schedule_floor <= 1.0:
            raise ConfigError(f"schedule_floor must be in [0, 1], got {self.schedule_floor}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def echo(self) -> dict:
        return {
            "lr0": self.lr0,
            "schedule_floor": self.schedule_floor,
            "betas": list(self.betas),
            "adamw_eps": self.adamw_eps,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "eval_every_images": self.eval_every_images,
            "eval_top_k": self.eval_top_k,
            "epsilon": self.distortion.epsilon,
            "fraction_low": self.distortion.fraction_low,
            "fraction_high": self.distortion.fraction_high,
            "strategies": [s.value for s in self.distortion.strategies],
            "n_heads": self.hyper.n_heads,
            "hidden": self.hyper.hidden,
            "dropout": self.hyper.dropout,
            "dropout_hidden": self.hyper.dropout_hidden,
            "seed": self.seed,
        }


def cosine_lr(step: int, total_steps: int, lr0: float, floor: float) -> float:
    """Cosine annealing from lr0 down to floor*lr0 across total_steps."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    lr_min = floor * lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    scratch: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            scratch={k: np.empty_like(p) for k, p in params.items()},
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    config: TrainConfig,
    no_decay: frozenset[str] = disc.NO_DECAY,
) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Weight decay multiplies by lr and skips the names in ``no_decay``.
    Raises on shape mismatch or non-finite gradients (the step is aborted
    before any parameter is touched).
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteComputationError(f"gradient {name}")
    beta1, beta2 = config.betas
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        s = state.scratch.get(name)
        if s is None:
            s = state.scratch[name] = np.empty_like(p)
        dt = p.dtype.type
        m *= dt(beta1)
        np.multiply(g, dt(1.0 - beta1), out=s)
        m += s
        v *= dt(beta2)
        np.multiply(g, g, out=s)
        s *= dt(1.0 - beta2)
        v += s
        # update = lr * (m / bc1) / (sqrt(v / bc2) + eps)
        np.multiply(v, dt(1.0 / bc2), out=s)
        np.sqrt(s, out=s)
        s += dt(config.adamw_eps)
        np.divide(m, s, out=s)
        s *= dt(lr / bc1)
        p -= s
        if config.weight_decay > 0.0 and name not in no_decay:
            p -= dt(lr * config.weight_decay) * p
    return state


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float


@dataclass
class EvalRecord:
    step: int
    images_seen: int
    image_auroc: float
    is_best: bool


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_checkpoint: str | None = None
    final_checkpoint: str | None = None
    best_auroc: float | None = None


ExampleHook = Callable[[str, np.ndarray], None]


def _image_scores_for_eval(
    model: disc.DiscriminatorModel, records: Sequence[FeatureRecord], top_k: int | None
) -> np.ndarray:
    """Top-K mean patch probability per record, dropout off, batched."""
    n = model.n_patches
    k = n if top_k is None else min(top_k, n)
    out = np.empty(len(records), dtype=np.float64)
    chunk = 32
    for start in range(0, len(records), chunk):
        batch = records[start : start + chunk]
        x = np.stack([r.features for r in batch])
        logits, _ = disc.forward_batch(model, x, train_mode=False)
        probs = disc.sigmoid_probabilities(logits)
        top = np.partition(probs, n - k, axis=1)[:, n - k :]
        out[start : start + len(batch)] = top.mean(axis=1)
    return out


def _rank_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    # Imported late: metrics depends on this module for the few-shot protocol.
    from padkit.metrics import compute_auroc

    return compute_auroc(scores, labels)


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir: Path | str,
    example_hook: ExampleHook | None = None,
    log_stream=None,
) -> tuple[disc.DiscriminatorModel, TrainHistory]:
    """Train a discriminator on the manifest's train split.

    Writes ``model_final.ckpt`` and ``model_best.ckpt`` under ``out_dir``
    plus a JSON-lines progress log.  Returns the final model and history.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_records = load_split(manifest, "train")
    if not train_records:
        raise ManifestError("train split is empty")
    grid_h, grid_w, dim = check_uniform_geometry(train_records)
    n_patches = grid_h * grid_w

    test_records = load_split(manifest, "test")
    test_labels = np.array([r.label for r in test_records], dtype=np.int64)
    can_eval = bool(len(test_records)) and len(set(test_labels.tolist())) == 2
    if test_records:
        check_uniform_geometry(list(test_records) + [train_records[0]])

    root = CounterRng(config.seed)
    model = disc.init_model(dim, n_patches, config.hyper, root.spawn(PURPOSE_INIT))
    params = dict(model.param_items())
    opt_state = AdamWState.for_params(params)

    n_train = len(train_records)
    steps_per_epoch = math.ceil(n_train / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    schedule_span = max(total_steps - 1, 1)

    history = TrainHistory()
    log_path = out_dir / "progress.jsonl"
    log_file = log_stream if log_stream is not None else open(log_path, "w")
    owns_log = log_stream is None

    best_path = out_dir / "model_best.ckpt"
    final_path = out_dir / "model_final.ckpt"
    meta = {"grid_h": grid_h, "grid_w": grid_w, "config": config.echo()}

    def run_eval(step: int, images_seen: int) -> None:
        if not can_eval:
            return
        scores = _image_scores_for_eval(model, test_records, config.eval_top_k)
        auroc = _rank_auroc(scores, test_labels)
        is_best = history.best_auroc is None or auroc > history.best_auroc
        if is_best:
            history.best_auroc = auroc
            disc.save_checkpoint(model, best_path, extra={**meta, "step": step})
            history.best_checkpoint = str(best_path)
        history.evals.append(
            EvalRecord(step=step, images_seen=images_seen, image_auroc=auroc, is_best=is_best)
        )
        log_file.write(
            json.dumps(
                {"step": step, "images_seen": images_seen, "image_auroc": auroc, "best": is_best}
            )
            + "\n"
        )

    example_counter = 0
    images_seen = 0
    next_eval_at = config.eval_every_images
    global_step = 0
    try:
        for epoch in range(config.epochs):
            t_epoch = time.perf_counter()
            order = root.spawn(PURPOSE_SHUFFLE, epoch).permutation(n_train)
            for start in range(0, n_train, config.batch_size):
                batch = [train_records[i] for i in order[start : start + config.batch_size]]
                xs, masks = [], []
                for record in batch:
                    xs.append(record.features)
                    clean_mask = np.zeros(n_patches, dtype=bool)
                    masks.append(clean_mask)
                    if example_hook is not None:
                        example_hook("clean", clean_mask)
                    outcome = distort(
                        record, config.distortion, root.spawn(PURPOSE_DISTORT, example_counter)
                    )
                    example_counter += 1
                    xs.append(outcome.features)
                    masks.append(outcome.mask)
                    if example_hook is not None:
                        example_hook("distorted", outcome.mask)
                x = np.stack(xs)
                mask = np.stack(masks)
                logits, cache = disc.forward_batch(
                    model, x, train_mode=True, rng=root.spawn(PURPOSE_DROPOUT, global_step)
                )
                step_loss = disc.loss(logits, mask)
                grads = disc.backward_batch(model, cache, mask)
                lr = cosine_lr(global_step, schedule_span, config.lr0, config.schedule_floor)
                adamw_step(params, grads, opt_state, lr, config)
                model.check_finite()
                history.steps.append(StepRecord(step=global_step, lr=lr, loss=step_loss))
                log_file.write(
                    json.dumps({"step": global_step, "lr": lr, "loss": step_loss}) + "\n"
                )
                global_step += 1
                images_seen += len(batch)
                if config.eval_every_images is not None and next_eval_at is not None:
                    if images_seen >= next_eval_at:
                        run_eval(global_step - 1, images_seen)
                        next_eval_at += config.eval_every_images
            if config.eval_every_images is None:
                run_eval(global_step - 1, images_seen)
            history.epoch_seconds.append(time.perf_counter() - t_epoch)
    finally:
        if owns_log:
            log_file.close()

    disc.save_checkpoint(model, final_path, extra={**meta, "step": global_step - 1})
    history.final_checkpoint = str(final_path)
    if history.best_checkpoint is None:
        disc.save_checkpoint(model, best_path, extra={**meta, "step": global_step - 1})
        history.best_checkpoint = str(best_path)
        history.best_auroc = history.evals[-1].image_auroc if history.evals else None
    return model, history


def few_shot_manifest(
    manifest: DatasetManifest, shots: int, subsample_rng: CounterRng
) -> DatasetManifest:
    """Manifest with the train split subsampled to ``shots`` per class."""
    by_class: dict[str, list] = {}
    for entry in manifest.split_entries("train"):
        by_class.setdefault(entry.class_name, []).append(entry)
    picked = []
    for class_name in sorted(by_class):
        pool = by_class[class_name]
        if len(pool) < shots:
            raise ManifestError(
                f"class {class_name!r} has {len(pool)} train records, need {shots}"
            )
        idx = np.sort(subsample_rng.choose(len(pool), shots))
        picked.extend(pool[i] for i in idx)
    entries = picked + manifest.split_entries("test")
    return replace(manifest, entries=entries, warnings=list(manifest.warnings))
