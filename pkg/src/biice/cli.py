"""``biice`` command line: synth, train, importance, curves, localize, gradcheck, export-concepts.

Exit codes: 0 success, 1 runtime failure, 2 usage/config/format error.
Progress goes to stdout as JSON lines; errors go to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import ConfigError, load_config, model_config, synth_config, train_config
from .data import (
    FormatError,
    check_pairing,
    generate_synthetic,
    load_annotations,
    load_dataset,
    save_annotations,
    save_dataset,
)
from .model import BiIceParams, forward, load_params, save_params, split_composition
from .numerics import ContractError, TrainingError, make_rng
from .objectives import LossWeights
from .training import fit, gradient_check

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _paths(args, doc: dict) -> dict:
    paths = dict(doc.get("paths", {}))
    for key in ("data", "ann", "val", "out", "params"):
        if getattr(args, key, None):
            paths[key] = getattr(args, key)
    return paths


def _require(paths: dict, key: str) -> str:
    if not paths.get(key):
        raise UsageError(f"--{key} is required")
    return paths[key]


def _load_params(path):
    if not path or not Path(path).is_file():
        raise UsageError(f"params file not found: {path}")
    return load_params(path)


def cmd_synth(args) -> int:
    doc = load_config(args.config) if args.config else {}
    cfg = synth_config(doc)
    out = _out_dir(_require(_paths(args, doc), "out"))
    dataset, ann, planted = generate_synthetic(cfg)
    save_dataset(out / "data.biem", dataset)
    save_annotations(out / "ann.bian", ann)
    ev.export_concepts(out / "planted.biem", [planted])
    _emit({"samples": len(dataset), "n_patches": dataset.n_patches, "dim": dataset.dim,
           "n_classes": dataset.n_classes, "n_planted": cfg.n_planted,
           "n_global": cfg.n_global, "n_spatial": cfg.n_planted - cfg.n_global,
           "class_counts": np.bincount(dataset.labels, minlength=cfg.n_classes).tolist(),
           "files": ["data.biem", "ann.bian", "planted.biem"]})
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_config(args.config)
    config = model_config(doc)
    tcfg = train_config(doc)
    paths = _paths(args, doc)
    if tcfg.lambda_expl > 0 and not paths.get("ann"):
        raise UsageError("lambda_expl > 0 requires --ann; set loss.lambda_expl to 0 to train without annotations")
    dataset = load_dataset(_require(paths, "data"))
    ann = None
    if paths.get("ann") and tcfg.lambda_expl > 0:
        ann = load_annotations(paths["ann"])
        check_pairing(dataset, ann, config.n_global, config.n_spatial)
    val = load_dataset(paths["val"]) if paths.get("val") else None
    out = _out_dir(_require(paths, "out"))

    lines = []

    def log(metrics):
        lines.append(metrics)
        _emit(metrics)

    params, snapshots, _ = fit(dataset, val, config, tcfg, ann=ann, log=log)
    save_params(out / "params.bin", params, config)
    np.save(out / "snapshots.npy", np.stack([s.zeta for s in snapshots]).astype("<f8"))
    with open(out / "metrics.jsonl", "w") as fh:
        for m in lines:
            fh.write(json.dumps(m, sort_keys=True) + "\n")
    ev.write_json(out / "run.json", {"model": config.to_dict(), "train": tcfg.to_dict(),
                                     "snapshot_epochs": [s.epoch for s in snapshots]})
    return EXIT_OK


def cmd_importance(args) -> int:
    params, config = _load_params(args.params)
    dataset = load_dataset(args.data)
    out = _out_dir(args.out)
    labels = [args.label] if args.label is not None else sorted(set(dataset.labels.tolist()))
    reports = [ev.concept_importance(params, config, dataset, y, args.threshold).to_dict() for y in labels]
    ev.write_json(out / "importance.json", {"threshold": args.threshold, "n_global": config.n_global,
                                            "classes": reports})
    _emit({"written": "importance.json", "classes": labels})
    return EXIT_OK


def cmd_curves(args) -> int:
    params, config = _load_params(args.params)
    dataset = load_dataset(args.data)
    out = _out_dir(args.out)
    cache = ev.CompositionCache.build(params, config, dataset)
    order = ev.importance_order(params, config, dataset, cache)
    modes = ["insertion", "deletion"] if args.mode == "both" else [args.mode]
    summary = {"order": order, "random_orders": args.random_seeds, "seed": args.seed}
    for mode in modes:
        curve_fn = ev.c_insertion_curve if mode == "insertion" else ev.c_deletion_curve
        curve = curve_fn(params, config, dataset, order, cache)
        rand = ev.random_baseline_curves(params, config, dataset, mode, args.random_seeds, args.seed, cache)
        ev.write_csv(out / f"{mode}.csv", ["fraction", "f", "f_random_mean", "f_random_std"],
                     zip(curve.grid, curve.f, rand.f, rand.std))
        summary[mode] = {"auc": curve.auc, "random_auc": rand.auc}
    ev.write_json(out / "curves_summary.json", summary)
    _emit(summary)
    return EXIT_OK


def cmd_localize(args) -> int:
    params, config = _load_params(args.params)
    dataset = load_dataset(args.data)
    if not 0 <= args.sample < len(dataset):
        raise UsageError(f"--sample must lie in [0, {len(dataset)})")
    out = _out_dir(args.out)
    phi = forward(dataset.z[args.sample], params, config).phi
    phi_global, phi_spatial = split_composition(phi, config.n_global)
    grid = ev.localization_grid(phi_spatial, config.n_global)
    doc = {"sample": args.sample, "label": int(dataset.labels[args.sample]), "threshold": args.threshold,
           "grid": grid.to_dict(), "global_scores": phi_global.tolist(),
           "activated": ev.activated_patches(phi_spatial, args.threshold, config.n_global)}
    ev.write_json(out / "localize.json", doc)
    _emit({"written": "localize.json", "activated": len(doc["activated"])})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.params:
        params, config = _load_params(args.params)
    else:
        doc = load_config(args.config) if args.config else {
            "model": {"n_concepts": 4, "dim": 8, "n_patches": 6, "n_classes": 3, "n_global": 1}}
        config = model_config(doc)
        params = BiIceParams.init(config, make_rng([args.seed, 1]))
    rng = make_rng([args.seed, 7])
    b = args.batch
    z = rng.normal(size=(b, config.n_patches, config.dim))
    labels = rng.integers(0, config.n_classes, size=b)
    qg = rng.integers(0, 2, size=(b, config.n_global)).astype(float)
    qs = rng.integers(0, 2, size=(b, config.n_patches, config.n_spatial)).astype(float)
    report = gradient_check(params, config, z, labels, LossWeights(1.0, 0.5), qg, qs, seed=args.seed)
    worst = max(report.values())
    _emit({"max_rel_error": worst, "tolerance": GRADCHECK_TOL, "per_tensor": report})
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_RUNTIME


def cmd_export_concepts(args) -> int:
    run = Path(args.run)
    snap_path = run / "snapshots.npy"
    if not snap_path.is_file():
        raise UsageError(f"snapshot file not found: {snap_path}")
    banks = np.load(snap_path)
    out = _out_dir(args.out)
    ev.export_concepts(out / "concepts.biem", banks)
    summary = {"snapshots": len(banks)}
    if len(banks) >= 2:
        series = ev.convergence_metrics(banks)
        ev.write_series_csv(out / "convergence.csv", series)
        summary["final_separation"] = series["separation"][-1]
    if args.planted:
        planted = load_dataset(args.planted).z[0]
        summary["planted_recovery"] = ev.planted_recovery(banks[-1], planted)
    ev.write_json(out / "concepts_summary.json", summary)
    _emit(summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biice", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-concept dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--ann")
    p.add_argument("--val")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    def analysis(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--params", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        return p

    p = analysis("importance", cmd_importance, "per-class concept importance")
    p.add_argument("--class", dest="label", type=int)
    p.add_argument("--threshold", type=float, default=ev.ACTIVATION_THRESHOLD)

    p = analysis("curves", cmd_curves, "C-insertion / C-deletion curves")
    p.add_argument("--mode", choices=["insertion", "deletion", "both"], default="both")
    p.add_argument("--random-seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = analysis("localize", cmd_localize, "spatial concept grid for one sample")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--threshold", type=float, default=ev.ACTIVATION_THRESHOLD)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--config")
    p.add_argument("--params")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-concepts", help="per-epoch concept vectors and convergence series")
    p.add_argument("--run", required=True, help="output directory of a train run")
    p.add_argument("--planted", help="planted.biem from synth, for recovery scoring")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_concepts)
    return parser


def _fail(code: int, kind: str, exc: BaseException, **extra) -> int:
    print(json.dumps({"error": kind, "message": str(exc), **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", exc, schema_path=exc.path)
    except (UsageError, FormatError, ContractError, FileNotFoundError) as exc:
        return _fail(EXIT_USAGE, type(exc).__name__, exc)
    except (TrainingError, OSError) as exc:
        return _fail(EXIT_RUNTIME, type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())
