"""Command-line entry point: generate, train, eval, bench, scale, export-fig.

Every subcommand that writes files also writes a manifest next to them with
the resolved flags, seeds, and sha256 of each output, so a run can be
reproduced byte-for-byte from its manifest (timing columns excepted).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, bench, evaluation, scaling, simgen
from .core import Dataset, read_dataset, write_dataset
from .models import (
    MODEL_KINDS,
    DistancePredictor,
    PhysicsPredictor,
    Predictor,
    build_model,
    NetPredictor,
    fit_distance_baseline,
    predictor_from_checkpoint,
    predictor_to_checkpoint,
)
from .nnengine import load_checkpoint, save_checkpoint
from .train import TrainConfig, train

DATASET_FILE = "dataset.jsonl"
FLEET_FILE = "fleet.json"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path: Path, subcommand: str, config: dict,
                    inputs: list[Path], outputs: list[Path]) -> None:
    manifest = {
        "tool": "evroute",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_dataset_dir(data_dir: str) -> tuple[Dataset, Path]:
    path = Path(data_dir) / DATASET_FILE
    if not path.exists():
        raise FileNotFoundError(f"no {DATASET_FILE} under {data_dir}")
    return read_dataset(path), path


def _load_fleet(data_dir: str):
    path = Path(data_dir) / FLEET_FILE
    if not path.exists():
        raise FileNotFoundError(f"no {FLEET_FILE} under {data_dir}")
    return simgen.fleet_from_json(json.loads(path.read_text()))


def _parse_models(arg: str) -> list[str]:
    names = [m.strip() for m in arg.split(",") if m.strip()]
    unknown = [m for m in names if m not in MODEL_KINDS]
    if unknown:
        raise argparse.ArgumentTypeError(
            f"unknown model name(s) {unknown}; valid names: {', '.join(MODEL_KINDS)}"
        )
    return names


# -- subcommands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    config = simgen.GeneratorConfig(
        seed=args.seed,
        n_routes=args.routes,
        route_length_range=(args.len_min, args.len_max),
        stem_fraction=args.stem_fraction,
    )
    dataset = simgen.generate_dataset(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    routes_path = out / DATASET_FILE
    write_dataset(dataset, routes_path)
    fleet_path = out / FLEET_FILE
    fleet_path.write_text(json.dumps(simgen.fleet_to_json(config.vehicle_fleet), indent=2) + "\n")
    outputs = [routes_path, out / "schema.json", fleet_path]
    _write_manifest(out / "generate.manifest.json", "generate", {
        "seed": args.seed, "routes": args.routes,
        "len_min": args.len_min, "len_max": args.len_max,
        "stem_fraction": args.stem_fraction,
    }, inputs=[], outputs=outputs)
    n_segments = sum(len(r) for r in dataset.routes)
    print(f"wrote {len(dataset.routes)} routes ({n_segments} segments) to {routes_path}")
    return 0


def _history_csv(history) -> str:
    lines = ["epoch,train_mae_kwh,val_route_mape_pct"]
    lines += [f"{e},{loss!r},{mape!r}" for e, loss, mape in history]
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    dataset, data_path = _load_dataset_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = args.model
    history = []
    if kind == "distance":
        baseline = fit_distance_baseline(dataset.routes_in("train"))
        predictor: Predictor = DistancePredictor(baseline, dataset.schema)
        print(f"distance baseline: slope {baseline.slope:.6f} Wh/m, "
              f"intercept {baseline.intercept:.3f} Wh")
    elif kind == "physics":
        predictor = PhysicsPredictor(_load_fleet(args.data), dataset.schema)
        print("physics baseline uses the fleet constants; nothing to fit")
    else:
        config = TrainConfig(
            lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
            patience=args.patience if args.patience > 0 else None, seed=args.seed,
        )
        result = train(kind, dataset, config)
        predictor = result.predictor
        history = result.history
        print(f"{kind}: {result.epochs_run} epochs in {result.train_seconds:.1f}s, "
              f"best val route MAPE {result.best_val_mape:.3f}%")

    ckpt_path = out / f"{kind}.ckpt"
    save_checkpoint(ckpt_path, predictor_to_checkpoint(predictor))
    history_path = out / f"{kind}_history.csv"
    history_path.write_text(_history_csv(history))
    _write_manifest(out / f"train-{kind}.manifest.json", "train", {
        "model": kind, "data": args.data, "lr": args.lr, "batch_size": args.batch_size,
        "epochs": args.epochs, "patience": args.patience, "seed": args.seed,
    }, inputs=[data_path], outputs=[ckpt_path, history_path])
    print(f"wrote {ckpt_path}")
    return 0


def _load_predictors(ckpt_dir: str, names: list[str], strict: bool = True):
    loaded: list[Predictor | tuple[str, Exception]] = []
    for name in names:
        path = Path(ckpt_dir) / f"{name}.ckpt"
        try:
            loaded.append(predictor_from_checkpoint(load_checkpoint(path)))
        except Exception as exc:  # noqa: BLE001 - grid rows degrade gracefully
            if strict:
                raise
            loaded.append((name, exc))
    return loaded


def cmd_eval(args) -> int:
    dataset, data_path = _load_dataset_dir(args.data)
    if args.models:
        names = args.models
    else:
        names = [k for k in MODEL_KINDS if (Path(args.ckpt_dir) / f"{k}.ckpt").exists()]
        if not names:
            raise FileNotFoundError(f"no checkpoints found under {args.ckpt_dir}")
    predictors = _load_predictors(args.ckpt_dir, names, strict=True)
    report = evaluation.build_report(predictors, dataset, level=args.level)
    out = Path(args.out)
    report.write_csv(out)
    _write_manifest(out.parent / "eval.manifest.json", "eval", {
        "data": args.data, "ckpt_dir": args.ckpt_dir, "models": names, "level": args.level,
    }, inputs=[data_path], outputs=[out])
    print(report.to_csv(), end="")
    print(f"(n_test={report.n_routes}, n_hot={report.n_hot}, n_cold={report.n_cold}, "
          f"skipped_pairs={report.n_skipped_pairs})")
    return 0


def cmd_bench(args) -> int:
    if args.data:
        dataset, _ = _load_dataset_dir(args.data)
    else:
        config = simgen.GeneratorConfig(
            seed=args.seed, n_routes=args.n_routes,
            route_length_range=(args.len_min, args.len_max),
        )
        dataset = simgen.generate_dataset(config)

    if args.untrained:
        predictors: list[Predictor | tuple[str, Exception]] = []
        for name in args.models:
            if name == "distance":
                predictors.append(
                    DistancePredictor(fit_distance_baseline(dataset.routes_in("train")),
                                      dataset.schema))
            elif name == "physics":
                predictors.append(PhysicsPredictor(simgen.default_fleet(), dataset.schema))
            else:
                model = build_model(name, dataset.schema.width,
                                    np.random.default_rng(args.seed))
                predictors.append(NetPredictor(model, name, dataset.schema))
    else:
        if not args.ckpt_dir:
            raise ValueError("either --ckpt-dir or --untrained is required")
        predictors = _load_predictors(args.ckpt_dir, args.models, strict=False)
        loaded = [p for p in predictors if not isinstance(p, tuple)]
        if len({p.schema_fingerprint for p in loaded}) > 1:
            raise ValueError("checkpoints were trained against different schemas")
        if loaded and args.data is None:
            # synthetic routes must be encoded exactly like the training data
            dataset = dataclasses.replace(dataset, schema=loaded[0].schema)

    batch = bench.encode_inference_batch(dataset)
    results = bench.bench_grid(predictors, batch, warmups=args.warmups,
                               repeats=args.repeats, threads=args.threads)
    out = Path(args.out)
    bench.write_grid_csv(results, out)
    _write_manifest(out.parent / "bench.manifest.json", "bench", {
        "models": args.models, "data": args.data, "n_routes": args.n_routes,
        "len_min": args.len_min, "len_max": args.len_max, "seed": args.seed,
        "threads": args.threads, "warmups": args.warmups, "repeats": args.repeats,
        "untrained": args.untrained, "ckpt_dir": args.ckpt_dir,
    }, inputs=[], outputs=[out])
    print(bench.grid_to_csv(results), end="")
    return 0


def cmd_scale(args) -> int:
    d = args.segments
    raw = scaling.optimal_params_raw(d)
    n = scaling.optimal_params(d)
    print(f"D = {d:g} segments")
    print(f"log10(N) = {scaling.SLOPE} * log10(D) + {scaling.INTERCEPT} "
          f"= {scaling.SLOPE * math.log10(d) + scaling.INTERCEPT:.6f}")
    print(f"N = {raw:.3f} -> {n} parameters")
    import warnings as _warnings

    with _warnings.catch_warnings(record=True) as caught:
        _warnings.simplefilter("always")
        preset = scaling.preset_for_budget(n)
    counts = scaling.preset_param_counts()
    print(f"preset: {preset} ({counts[preset]} parameters)")
    for w in caught:
        print(f"warning: {w.message}")
    print(scaling.SIZING_NOTE)
    return 0


def cmd_export_fig(args) -> int:
    dataset, data_path = _load_dataset_dir(args.data)
    fleet = _load_fleet(args.data)
    out = Path(args.out)
    simgen.export_soc_scatter(dataset, fleet, out)
    _write_manifest(out.parent / "export-fig.manifest.json", "export-fig", {
        "data": args.data,
    }, inputs=[data_path], outputs=[out])
    print(f"wrote {out} ({len(dataset.routes)} routes)")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evroute",
        description="EV route energy estimation: synthetic data, estimators, eval, bench",
    )
    parser.add_argument("--version", action="version", version=f"evroute {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--routes", type=int, default=1000)
    p.add_argument("--len-min", type=int, default=20)
    p.add_argument("--len-max", type=int, default=100)
    p.add_argument("--stem-fraction", type=float, default=0.10)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file whose keys override flag defaults")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit one model kind and write a checkpoint")
    p.add_argument("--data", required=True, help="directory from `generate`")
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10, help="early-stopping patience; 0 disables")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file whose keys override flag defaults")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MAPE comparison grid over trained models")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--models", type=_parse_models, default=None,
                   help="comma-separated subset (default: all checkpoints present)")
    p.add_argument("--level", choices=("route", "segment"), default="route")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--config", help="JSON file whose keys override flag defaults")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="forward-pass latency grid")
    p.add_argument("--models", type=_parse_models,
                   default=list(("ffn", "rnn", "ret-20k", "ret-300k", "ret-3m")))
    p.add_argument("--ckpt-dir", default=None)
    p.add_argument("--untrained", action="store_true",
                   help="bench freshly initialized models instead of checkpoints")
    p.add_argument("--data", default=None, help="bench routes from this dataset dir")
    p.add_argument("--n-routes", type=int, default=bench.DEFAULT_N_ROUTES)
    p.add_argument("--len-min", type=int, default=20)
    p.add_argument("--len-max", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--warmups", type=int, default=bench.DEFAULT_WARMUPS)
    p.add_argument("--repeats", type=int, default=bench.DEFAULT_REPEATS)
    p.add_argument("--out", required=True, help="bench CSV path")
    p.add_argument("--config", help="JSON file whose keys override flag defaults")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("scale", help="compute-optimal parameter count for a data size")
    p.add_argument("--segments", type=float, required=True)
    p.add_argument("--config", help="JSON file whose keys override flag defaults")
    p.set_defaults(func=cmd_scale)

    p = sub.add_parser("export-fig", help="SOC-vs-distance scatter CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file whose keys override flag defaults")
    p.set_defaults(func=cmd_export_fig)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Apply --config JSON values as subparser defaults, then reparse."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    config_path = argv[idx + 1]
    overrides = json.loads(Path(config_path).read_text())
    if not isinstance(overrides, dict):
        raise ValueError(f"{config_path}: config must be a JSON object")
    for action in parser._subparsers._group_actions[0].choices.values():  # noqa: SLF001
        known = {a.dest for a in action._actions}  # noqa: SLF001
        action.set_defaults(**{k: v for k, v in overrides.items() if k in known})
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
    except (OSError, ValueError) as exc:
        parser.error(str(exc))  # exits 2
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error surface
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
