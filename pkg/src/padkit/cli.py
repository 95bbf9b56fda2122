"""Command-line entry point: synth / train / score / eval / sweep / fewshot.

Settings resolve in precedence order: built-in defaults, then the --mode
preset, then a TOML config file, then explicit flags.  When an explicit flag
overrides a preset value a notice is printed to stderr.  The fully resolved
configuration is echoed into every output artifact so a run can be
reproduced from its outputs alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from padkit import discriminator as disc
from padkit import metrics, scoring, synthetic
from padkit.distortion import DistortionConfig, parse_strategies
from padkit.errors import ConfigError, PadkitError
from padkit.records import load_manifest, read_record
from padkit.training import TrainConfig, train

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib


@dataclass(frozen=True)
class ModePreset:
    strategies: str
    top_k: int | None  # None means all patches
    epochs: int
    eval_every_images: int | None  # None means once per epoch


MODES = {
    "semantic": ModePreset(
        strategies="noise_all", top_k=None, epochs=20, eval_every_images=250
    ),
    "industrial": ModePreset(
        strategies="noise_random", top_k=10, epochs=160, eval_every_images=None
    ),
    "logical": ModePreset(
        strategies="noise_random+attn_shuffle", top_k=10, epochs=160, eval_every_images=None
    ),
}


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="padkit",
        description="Anomaly detection over exported patch-feature files",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--grid-h", type=_positive_int, default=8)
    p.add_argument("--grid-w", type=_positive_int, default=8)
    p.add_argument("--dim", type=_positive_int, default=64)
    p.add_argument("--heads", type=_positive_int, default=4)
    p.add_argument("--train", type=_positive_int, default=200, dest="n_train")
    p.add_argument("--test-normal", type=_positive_int, default=100)
    p.add_argument("--test-anomalous", type=_positive_int, default=100)
    p.add_argument("--shift", type=_nonneg_float, default=2.0)
    p.add_argument("--extent", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)

    def add_common(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
        p.add_argument("--config", help="TOML file with defaults for these flags")
        if with_mode:
            p.add_argument("--mode", choices=sorted(MODES))

    p = sub.add_parser("train", help="train a discriminator on a manifest")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--strategies", help="'+'-separated: noise_all, noise_random, attn_shuffle")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--eval-every", type=_positive_int, dest="eval_every_images")
    p.add_argument("--top-k", type=_positive_int, help="K for in-training evaluation")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("score", help="score a split with a trained checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--top-k", type=_positive_int)
    p.add_argument("--sigma", type=_nonneg_float, default=scoring.DEFAULT_SIGMA)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--maps-out", help="directory for anomaly-map PNG + f32 dumps")

    p = sub.add_parser("eval", help="compute an evaluation report from scores")
    p.add_argument("--scores", required=True, help="CSV produced by the score command")
    p.add_argument("--manifest", required=True)
    p.add_argument("--maps", help="maps directory written by score --maps-out")
    p.add_argument("--pixel-per-image", action="store_true",
                   help="also report per-image-averaged pixel AUROC")
    p.add_argument("--out", help="report JSON path (default: stdout)")

    p = sub.add_parser("sweep", help="AUROC as a function of one knob")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--axis", choices=metrics.SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--strategies")
    p.add_argument("--top-k", type=_positive_int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("fewshot", help="few-shot protocol over random subsamples")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--shots", required=True, help="comma-separated shot counts")
    p.add_argument("--seeds", type=_positive_int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--strategies")
    p.add_argument("--top-k", type=_positive_int)
    p.add_argument("--seed", type=int)

    return parser


def _load_toml(path: str | None) -> dict:
    if not path:
        return {}
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"config file not found: {file}")
    with open(file, "rb") as fh:
        return tomllib.load(fh)


_UNSET = object()


def _resolve(args, key: str, toml_doc: dict, preset_value, default):
    """defaults < preset < TOML < explicit flag, with an override notice."""
    explicit = getattr(args, key, None)
    if explicit is not None:
        if preset_value is not _UNSET and explicit != preset_value:
            print(
                f"notice: --{key.replace('_', '-')}={explicit} overrides the "
                f"--mode preset value {preset_value}",
                file=sys.stderr,
            )
        return explicit
    if key in toml_doc:
        return toml_doc[key]
    if preset_value is not _UNSET:
        return preset_value
    return default


def _build_train_config(args, toml_doc: dict) -> tuple[TrainConfig, int | None]:
    preset = MODES[args.mode] if getattr(args, "mode", None) else None

    def pv(attr):
        return getattr(preset, attr) if preset is not None else _UNSET

    strategies_spec = _resolve(args, "strategies", toml_doc, pv("strategies"), "noise_random")
    epsilon = _resolve(args, "epsilon", toml_doc, _UNSET, 0.25)
    epochs = _resolve(args, "epochs", toml_doc, pv("epochs"), 20)
    eval_every = _resolve(
        args, "eval_every_images", toml_doc, pv("eval_every_images"), 250
    )
    top_k = _resolve(args, "top_k", toml_doc, pv("top_k"), None)
    batch_size = _resolve(args, "batch_size", toml_doc, _UNSET, 8)
    lr0 = _resolve(args, "lr0", toml_doc, _UNSET, 5e-4)
    seed = _resolve(args, "seed", toml_doc, _UNSET, 0)
    distortion = DistortionConfig(
        epsilon=float(epsilon), strategies=parse_strategies(str(strategies_spec))
    )
    config = TrainConfig(
        lr0=float(lr0),
        batch_size=int(batch_size),
        epochs=int(epochs),
        eval_every_images=None if eval_every in (None, "epoch") else int(eval_every),
        eval_top_k=top_k if top_k is None else int(top_k),
        distortion=distortion,
        seed=int(seed),
    )
    return config, (top_k if top_k is None else int(top_k))


def _cmd_synth(args) -> int:
    config = synthetic.SynthConfig(
        grid_h=args.grid_h,
        grid_w=args.grid_w,
        dim=args.dim,
        n_heads=args.heads,
        n_train=args.n_train,
        n_test_normal=args.test_normal,
        n_test_anomalous=args.test_anomalous,
        anomaly_shift=args.shift,
        anomaly_extent=args.extent,
        seed=args.seed,
    )
    manifest = synthetic.generate(config, args.out)
    print(json.dumps({"out": args.out, "entries": len(manifest.entries)}))
    return 0


def _cmd_train(args) -> int:
    toml_doc = _load_toml(args.config)
    config, _ = _build_train_config(args, toml_doc)
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"command": "train", "manifest": args.manifest, "mode": args.mode, **config.echo()}
    (out_dir / "run_config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    model, history = train(manifest, config, out_dir)
    summary = {
        "final_checkpoint": history.final_checkpoint,
        "best_checkpoint": history.best_checkpoint,
        "best_image_auroc": history.best_auroc,
        "steps": len(history.steps),
        "final_loss": history.steps[-1].loss if history.steps else None,
    }
    print(json.dumps(summary))
    return 0


def _cmd_score(args) -> int:
    toml_doc = _load_toml(args.config)
    preset = MODES[args.mode] if args.mode else None
    top_k = _resolve(
        args, "top_k", toml_doc, preset.top_k if preset else _UNSET, None
    )
    model, meta = disc.load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    k = model.n_patches if top_k is None else int(top_k)
    results = scoring.score_dataset(
        model,
        manifest,
        args.split,
        k=k,
        sigma=args.sigma,
        with_maps=args.maps_out is not None,
    )
    scoring.write_scores_csv(results, args.out)
    echo = {
        "command": "score",
        "checkpoint": args.checkpoint,
        "manifest": args.manifest,
        "split": args.split,
        "top_k": k,
        "sigma": args.sigma,
        "checkpoint_meta": meta,
    }
    Path(args.out).with_suffix(".config.json").write_text(
        json.dumps(echo, indent=2, sort_keys=True) + "\n"
    )
    if args.maps_out:
        maps_dir = Path(args.maps_out)
        maps_dir.mkdir(parents=True, exist_ok=True)
        for r in results:
            scoring.write_map_files(r.map, maps_dir / _map_stem(r.path))
    print(json.dumps({"scored": len(results), "csv": args.out}))
    return 0


def _map_stem(record_path: str) -> str:
    return record_path.replace("/", "__").replace("\\", "__").removesuffix(".gadf")


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    rows = _read_scores_csv(args.scores)
    by_path = {e.path: e for e in manifest.entries}
    results = []
    masks_by_path: dict[str, np.ndarray] | None = None
    if args.maps:
        masks_by_path = {}
    for row in rows:
        entry = by_path.get(row["path"])
        if entry is None:
            raise ConfigError(f"scored path {row['path']!r} not present in manifest")
        amap = None
        if args.maps:
            record = read_record(manifest.resolve(entry))
            raw = Path(args.maps) / (_map_stem(entry.path) + ".f32")
            if not raw.is_file():
                raise ConfigError(f"map dump missing for {entry.path!r}: {raw}")
            values = np.frombuffer(raw.read_bytes(), dtype="<f4").reshape(
                record.image_h, record.image_w
            )
            amap = scoring.AnomalyMap(
                values=values, grid_h=record.grid_h, grid_w=record.grid_w, sigma=float("nan")
            )
            masks_by_path[entry.path] = (
                record.pixel_mask
                if record.pixel_mask is not None
                else np.zeros((record.image_h, record.image_w), dtype=np.uint8)
            )
        results.append(
            scoring.RecordScore(
                path=entry.path,
                class_name=entry.class_name,
                label=int(row["label"]),
                image_score=float(row["image_score"]),
                patch_scores=None,
                map=amap,
            )
        )
    config_echo = {"command": "eval", "scores": args.scores, "manifest": args.manifest}
    score_config = Path(args.scores).with_suffix(".config.json")
    if score_config.is_file():
        config_echo["score_config"] = json.loads(score_config.read_text())
    report = metrics.build_report(results, masks_by_path, config_echo)
    if args.maps and args.pixel_per_image:
        per_image = {}
        for class_name in report.per_class_pixel:
            group = [r for r in results if r.class_name == class_name]
            per_image[class_name] = metrics.pixel_auroc(
                [r.map for r in group],
                [masks_by_path[r.path] for r in group],
                pooled=False,
            )
        report.config_echo["per_class_pixel_auroc_per_image"] = per_image
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _read_scores_csv(path: str) -> list[dict]:
    import csv

    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"scores CSV not found: {file}")
    with open(file, newline="") as fh:
        return list(csv.DictReader(fh))


def _cmd_sweep(args) -> int:
    toml_doc = _load_toml(args.config)
    config, top_k = _build_train_config(args, toml_doc)
    manifest = load_manifest(args.manifest)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = metrics.sweep(manifest, args.axis, values, config, args.out, top_k=top_k)
    print(json.dumps({"axis": args.axis, "rows": [[r.value, r.image_auroc] for r in rows]}))
    return 0


def _cmd_fewshot(args) -> int:
    toml_doc = _load_toml(args.config)
    config, top_k = _build_train_config(args, toml_doc)
    manifest = load_manifest(args.manifest)
    shots_list = [int(v) for v in args.shots.split(",") if v.strip()]
    results = metrics.few_shot_eval(
        manifest, shots_list, config, args.out, n_seeds=args.seeds, top_k=top_k
    )
    out_doc = {
        "config": config.echo(),
        "results": [
            {
                "shots": r.shots,
                "mean": r.mean,
                "std": r.std,
                "formatted": r.formatted(),
                "aurocs": r.aurocs,
            }
            for r in results
        ],
    }
    out_path = Path(args.out) / "fewshot.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(out_doc, indent=2) + "\n")
    print(json.dumps({r.shots: r.formatted() for r in results}))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "score": _cmd_score,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "fewshot": _cmd_fewshot,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except PadkitError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
