"""Command-line pipeline: simulate, sweep, train, evaluate, predict.

Every subcommand reads flags plus an optional JSON config file and
writes plain CSV/JSON artifacts into --out. Outputs carry no
timestamps or machine identifiers, so rerunning a subcommand with the
same inputs reproduces every file byte for byte.

Exit codes: 0 success; 1 runtime failure (solver non-convergence,
rejected dataset, malformed input data); 2 usage or config error
(bad flags, unknown config keys, invalid geometry); 3 selfcheck
found failing oracles.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace

import numpy as np

from .dataset import (
    FeatureConfig,
    GridSpec,
    MinMaxNormalizer,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_train_test,
    standard_grid,
)
from .inverse import (
    export_measured,
    ingest_measured,
    predict_geometry,
    sensitivity_analysis,
)
from .ml import (
    DEFAULT_FOREST_GRID,
    GEOMETRY_TARGETS,
    Hyperparams,
    _grid_cells,
    kfold_cv,
    load_model,
    metrics_report,
    save_model,
    train_geometry_model,
)
from .modesolver import EigenConfig
from .resonance import (
    ResonanceSolverConfig,
    ResonatorSpec,
    fit_quadratic,
    integrated_dispersion,
    resonance_band,
)
from .selfcheck import run_selfcheck

TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    pass


# --- config file handling ----------------------------------------------------

_EIGEN_KEYS = {"rtol", "max_iterations", "shift"}
_RESONANCE_KEYS = {
    "threshold_hz",
    "max_iterations",
    "band_um",
    "strategy",
    "n_samples",
    "pump_wavelength_um",
    "clad_box_um",
    "grid_points",
    "eigen",
    "use_bend",
}
_GRID_KEYS = {"radii_um", "widths_um", "heights_um"}
_FEATURE_KEYS = {"window", "include_d1"}
_HP_KEYS = {
    "max_depth",
    "min_samples_leaf",
    "n_estimators",
    "bootstrap_fraction",
    "bootstrap",
    "max_features",
    "seed",
}
_TRAIN_KEYS = {"param_grid", "folds", "seed", "normalize", "split_ratio", "base"}
_TOP_KEYS = {"resonance", "grid", "features", "train"}


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown {where} keys {unknown}; allowed: {sorted(allowed)}"
        )


def load_config(path: str | None) -> dict:
    """Read and strictly validate the run config; {} when no file given."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    _reject_unknown(cfg, _TOP_KEYS, "top-level config")
    for name, keys in (
        ("resonance", _RESONANCE_KEYS),
        ("grid", _GRID_KEYS),
        ("features", _FEATURE_KEYS),
        ("train", _TRAIN_KEYS),
    ):
        section = cfg.get(name)
        if section is None:
            continue
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        _reject_unknown(section, keys, f"config.{name}")
    if "eigen" in cfg.get("resonance", {}):
        _reject_unknown(cfg["resonance"]["eigen"], _EIGEN_KEYS, "config.resonance.eigen")
    train = cfg.get("train", {})
    if "param_grid" in train:
        _reject_unknown(train["param_grid"], _HP_KEYS, "config.train.param_grid")
        for key, values in train["param_grid"].items():
            if not isinstance(values, list) or not values:
                raise ConfigError(
                    f"config.train.param_grid.{key} must be a non-empty list"
                )
    if "base" in train:
        _reject_unknown(train["base"], _HP_KEYS, "config.train.base")
    return cfg


def _build(ctor, kwargs: dict, where: str):
    try:
        return ctor(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def resonance_config_from(cfg: dict) -> ResonanceSolverConfig:
    section = dict(cfg.get("resonance", {}))
    for key in ("band_um", "clad_box_um", "grid_points"):
        if key in section:
            section[key] = tuple(section[key])
    if "eigen" in section:
        section["eigen"] = _build(EigenConfig, section["eigen"], "resonance.eigen")
    return _build(ResonanceSolverConfig, section, "resonance config")


def grid_from(cfg: dict) -> GridSpec:
    section = cfg.get("grid")
    if section is None:
        return standard_grid()
    std = standard_grid()
    return _build(
        GridSpec,
        {
            "radii_um": tuple(section.get("radii_um", std.radii_um)),
            "widths_um": tuple(section.get("widths_um", std.widths_um)),
            "heights_um": tuple(section.get("heights_um", std.heights_um)),
        },
        "grid config",
    )


def features_from(cfg: dict) -> FeatureConfig:
    section = dict(cfg.get("features", {}))
    if "window" in section:
        section["window"] = tuple(section["window"])
    return _build(FeatureConfig, section, "feature config")


# --- small output helpers ----------------------------------------------------

def _write_text(path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _write_json(path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _positive_spec(radius: float, width: float, height: float) -> ResonatorSpec:
    try:
        return ResonatorSpec(radius_um=radius, width_um=width, height_um=height)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# --- subcommands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = resonance_config_from(load_config(args.config))
    spec = _positive_spec(args.radius, args.width, args.height)
    out = _ensure_out(args.out)

    rs = resonance_band(spec, cfg)
    prof = integrated_dispersion(rs)
    prof.write_csv(os.path.join(out, "dint.csv"))
    # measured-file schema, so `predict` can consume simulated output
    export_measured(prof, os.path.join(out, "profile.csv"))

    freq = rs.omega / TWO_PI
    lines = ["frequency_hz,fsr_hz"]
    for i in range(len(freq) - 1):
        mid = (freq[i] + freq[i + 1]) / 2.0
        lines.append("%.9e,%.9e" % (mid, freq[i + 1] - freq[i]))
    _write_text(os.path.join(out, "fsr.csv"), "\n".join(lines) + "\n")

    fit_obj = None
    if len(prof.mu) >= 5:
        fit = fit_quadratic(prof, window=(int(prof.mu.min()), int(prof.mu.max())))
        fit_obj = {
            "q0_hz": fit.q0_hz,
            "q1_hz": fit.q1_hz,
            "q2_hz": fit.q2_hz,
            "window_mu": [int(prof.mu.min()), int(prof.mu.max())],
            "residual_rms_hz": fit.residual_rms_hz,
            "n_modes": fit.n_modes,
        }
    pump_idx = int(np.flatnonzero(rs.m == rs.m0)[0])
    summary = {
        "geometry": {
            "radius_um": spec.radius_um,
            "width_um": spec.width_um,
            "height_um": spec.height_um,
        },
        "band_um": list(cfg.band_um),
        "pump": {
            "m0": int(rs.m0),
            "wavelength_um": float(rs.wavelengths_um()[pump_idx]),
            "frequency_hz": float(rs.omega[pump_idx] / TWO_PI),
        },
        "d1_hz": prof.d1 / TWO_PI,
        "n_modes": int(len(rs.m)),
        "fit": fit_obj,
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    print(
        f"simulated {len(rs.m)} modes -> {out}/dint.csv, profile.csv, "
        "fsr.csv, summary.json"
    )
    return 0


def cmd_sweep(args) -> int:
    cfg_all = load_config(args.config)
    grid = grid_from(cfg_all)
    cfg = resonance_config_from(cfg_all)
    feat = features_from(cfg_all)
    out = _ensure_out(args.out)

    progress = None
    if args.verbose:
        def progress(i, total):
            print(f"solved {i + 1}/{total}", file=sys.stderr)

    ds = generate_dataset(grid, cfg, feat, jobs=args.jobs, progress=progress)
    csv_path = os.path.join(out, "dataset.csv")
    save_dataset(ds, csv_path)
    rejected = len(ds.meta.get("rejects", []))
    print(f"wrote {len(ds)} records ({rejected} rejects) -> {csv_path}")
    return 0


def _cv_cell(payload):
    """Worker for parallel grid search; returns the table row pieces."""
    idx, X, Y, hp_dict, k, seed = payload
    report = kfold_cv(X, Y, Hyperparams(**hp_dict), k=k, seed=seed)
    return idx, list(report.fold_scores), report.mean_score


def _run_grid_search(X, Y, param_grid, base_hp, k, seed, jobs):
    """Exhaustive CV over the grid; identical results for any jobs."""
    cells = _grid_cells(param_grid)
    payloads = [
        (i, X, Y, {**asdict(base_hp), **cell}, k, seed)
        for i, cell in enumerate(cells)
    ]
    rows: list = [None] * len(cells)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for idx, scores, mean in pool.map(_cv_cell, payloads, chunksize=1):
                rows[idx] = (scores, mean)
    else:
        for payload in payloads:
            idx, scores, mean = _cv_cell(payload)
            rows[idx] = (scores, mean)
    table = [
        {"params": cell, "fold_scores": scores, "mean_score": mean}
        for cell, (scores, mean) in zip(cells, rows)
    ]
    best_idx = 0
    for i, (_, mean) in enumerate(rows):
        if mean > rows[best_idx][1]:
            best_idx = i
    best_hp = Hyperparams(**{**asdict(base_hp), **cells[best_idx]})
    return best_hp, table


def _model_id(dataset_path: str, cfg_all: dict, seed: int) -> str:
    digest = hashlib.sha256()
    with open(dataset_path, "rb") as fh:
        digest.update(fh.read())
    digest.update(json.dumps(cfg_all, sort_keys=True).encode())
    digest.update(str(seed).encode())
    return digest.hexdigest()[:16]


def cmd_train(args) -> int:
    cfg_all = load_config(args.config)
    train_cfg = cfg_all.get("train", {})
    seed = args.seed if args.seed is not None else int(train_cfg.get("seed", 0))
    folds = int(train_cfg.get("folds", 4))
    normalize = bool(train_cfg.get("normalize", True))
    param_grid = train_cfg.get("param_grid", dict(DEFAULT_FOREST_GRID))
    base = dict(train_cfg.get("base", {}))
    base["seed"] = seed
    base_hp = _build(Hyperparams, base, "train.base hyperparameters")
    out = _ensure_out(args.out)

    ds = load_dataset(args.dataset)
    split_ratio = train_cfg.get("split_ratio")
    if split_ratio is not None:
        train_ds, test_ds = split_train_test(ds, ratio=float(split_ratio), seed=seed)
        save_dataset(train_ds, os.path.join(out, "train_split.csv"))
        save_dataset(test_ds, os.path.join(out, "test_split.csv"))
    else:
        train_ds = ds

    X = train_ds.features_matrix()
    Y = train_ds.targets_matrix()
    if normalize:
        # CV in normalized space keeps the NMAE comparable across targets
        Xs = MinMaxNormalizer.fit(X).apply(X)
        Ys = MinMaxNormalizer.fit(Y).apply(Y)
    else:
        Xs, Ys = X, Y
    best_hp, table = _run_grid_search(
        Xs, Ys, param_grid, base_hp, folds, seed, args.jobs
    )

    model = train_geometry_model(
        train_ds,
        hp=best_hp,
        normalize=normalize,
        train_meta={
            "model_id": _model_id(args.dataset, cfg_all, seed),
            "dataset_csv": os.path.basename(args.dataset),
            "dataset_config_hash": train_ds.meta.get("config_hash"),
            "seed": seed,
            "folds": folds,
            "normalized": normalize,
            "best_params": {k: getattr(best_hp, k) for k in param_grid},
            "cv_mean_nmae": max(row["mean_score"] for row in table),
        },
    )
    model_path = os.path.join(out, "model.json")
    save_model(model, model_path)

    param_names = list(param_grid.keys())
    header = param_names + [f"fold{i}_nmae" for i in range(folds)] + ["mean_nmae"]
    lines = [",".join(header)]
    for row in table:
        cells = [str(row["params"][k]) for k in param_names]
        cells += ["%.17g" % s for s in row["fold_scores"]]
        cells.append("%.17g" % row["mean_score"])
        lines.append(",".join(cells))
    _write_text(os.path.join(out, "grid_table.csv"), "\n".join(lines) + "\n")

    best_str = ", ".join(f"{k}={getattr(best_hp, k)}" for k in param_names)
    print(f"trained on {len(train_ds)} records; best: {best_str} -> {model_path}")
    return 0


def _prefix_nmae_rows(model, X, Y) -> list[str]:
    """NMAE per target vs ensemble size, denormalized to physical units."""
    Xs = X if model.normalizer is None else model.normalizer["features"].apply(X)
    if model.multi_output:
        stacks = np.stack([t.predict(Xs) for t in model.forests["joint"].trees])
        n_trees = stacks.shape[0]
    else:
        per_target = [
            np.stack([t.predict(Xs)[:, 0] for t in model.forests[t_name].trees])
            for t_name in model.targets
        ]
        n_trees = min(p.shape[0] for p in per_target)
    rows = []
    for count in range(1, n_trees + 1):
        if model.multi_output:
            pred = stacks[:count].mean(axis=0)
        else:
            pred = np.column_stack([p[:count].mean(axis=0) for p in per_target])
        if model.normalizer is not None:
            pred = model.normalizer["targets"].invert(pred)
        values = [
            -float(np.mean(np.abs(pred[:, j] - Y[:, j])))
            for j in range(len(model.targets))
        ]
        rows.append("%d," % count + ",".join("%.17g" % v for v in values))
    return rows


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    if tuple(ds.feature_config.names()) != tuple(model.feature_names):
        raise ConfigError(
            f"dataset features {ds.feature_config.names()} do not match "
            f"model features {list(model.feature_names)}"
        )
    out = _ensure_out(args.out)
    X = ds.features_matrix()
    Y = ds.targets_matrix()
    pred = model.predict(X)
    report = metrics_report(Y, pred, GEOMETRY_TARGETS)

    metrics = report.to_dict()
    metrics["n_samples"] = len(ds)
    metrics["model_id"] = model.train_meta.get("model_id")
    _write_json(os.path.join(out, "metrics.json"), metrics)

    ape = report.per_sample_ape
    header = ",".join(
        list(GEOMETRY_TARGETS) + [f"ape_{t}_percent" for t in GEOMETRY_TARGETS]
    )
    lines = [header]
    for i in range(len(ds)):
        cells = ["%.9e" % v for v in Y[i]] + ["%.9e" % v for v in ape[i]]
        lines.append(",".join(cells))
    _write_text(os.path.join(out, "per_sample_ape.csv"), "\n".join(lines) + "\n")

    tree_lines = ["n_trees," + ",".join(f"nmae_{t}" for t in GEOMETRY_TARGETS)]
    tree_lines += _prefix_nmae_rows(model, X, Y)
    _write_text(
        os.path.join(out, "nmae_vs_trees.csv"), "\n".join(tree_lines) + "\n"
    )

    mape_str = ", ".join(
        f"{t}={m:.2f}%" for t, m in zip(GEOMETRY_TARGETS, report.mape_percent)
    )
    print(f"evaluated {len(ds)} samples: MAPE {mape_str} -> {out}/metrics.json")
    return 0


def _parse_actual(text: str | None):
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError("--actual expects 'radius_um,width_um,height_um'")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--actual values must be numeric, got {text!r}") from None


def cmd_predict(args) -> int:
    model = load_model(args.model)
    actual = _parse_actual(args.actual)
    prof = ingest_measured(args.input, pump_wavelength_um=args.pump_nm * 1e-3)
    est = predict_geometry(model, prof, actual=actual)
    out = _ensure_out(args.out)
    _write_json(os.path.join(out, "estimate.json"), est.to_dict())
    print(
        "predicted radius %.4f um, width %.4f um, height %.4f um"
        % (est.radius_um, est.width_um, est.height_um)
    )
    for warning in est.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


def _parse_band(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError("--band expects 'low_um,high_um'")
    try:
        lo, hi = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--band values must be numeric, got {text!r}") from None
    if not lo < hi:
        raise ConfigError(f"--band must be increasing, got {text!r}")
    return (lo, hi)


def cmd_sensitivity(args) -> int:
    cfg_all = load_config(args.config)
    cfg = resonance_config_from(cfg_all) if "resonance" in cfg_all else None
    spec = _positive_spec(args.radius, args.width, args.height)
    if args.delta <= -1.0:
        raise ConfigError(f"--delta {args.delta} would collapse the geometry")
    band = _parse_band(args.band)
    out = _ensure_out(args.out)
    report = sensitivity_analysis(spec, delta=args.delta, band_um=band, cfg=cfg)
    _write_json(os.path.join(out, "sensitivity.json"), report.to_dict())
    for entry in report.entries:
        print(
            f"{entry.parameter}: MAPE {entry.mape_percent:.4f}% "
            f"({entry.n_compared} modes, {entry.n_excluded} below floor)"
        )
    return 0


def cmd_selfcheck(args) -> int:
    failures = run_selfcheck()
    return 0 if failures == 0 else 3


# --- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ringdesign",
        description=(
            "Ring microresonator dispersion simulation and tree-ensemble "
            "geometry prediction."
        ),
        epilog=(
            "exit codes: 0 success; 1 runtime failure; "
            "2 usage/config error; 3 selfcheck failure"
        ),
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="progress output on stderr"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    jobs_default = os.cpu_count() or 1

    p = sub.add_parser("simulate", help="resonance comb and D_int for one geometry")
    p.add_argument("--radius", type=float, required=True, help="ring radius, um")
    p.add_argument("--width", type=float, required=True, help="core width, um")
    p.add_argument("--height", type=float, required=True, help="core height, um")
    p.add_argument("--config", help="JSON run config (resonance section)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="solve a geometry grid into a dataset CSV")
    p.add_argument("--config", help="JSON run config (grid/resonance/features)")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--jobs", type=int, default=jobs_default,
        help="worker processes (results do not depend on this)",
    )
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="grid search + k-fold CV, write model JSON")
    p.add_argument("--dataset", required=True, help="dataset CSV from sweep")
    p.add_argument("--config", help="JSON run config (train section)")
    p.add_argument("--seed", type=int, default=None,
                   help="overrides train.seed from the config")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=jobs_default)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a model against a dataset CSV")
    p.add_argument("--model", required=True, help="model JSON from train")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="estimate geometry from a dispersion file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True,
                   help="CSV: wavelength_nm,dint_hz or mode_index,resonance_hz")
    p.add_argument("--pump-nm", type=float, default=1557.0)
    p.add_argument("--actual", help="known geometry 'r_um,w_um,h_um' for errors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sensitivity", help="D_int shift per 10%% dimension change")
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--width", type=float, required=True)
    p.add_argument("--height", type=float, required=True)
    p.add_argument("--delta", type=float, default=0.10)
    p.add_argument("--band", default="1.5,1.6", help="wavelength band 'lo,hi' um")
    p.add_argument("--config", help="JSON run config (resonance section)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("selfcheck", help="run the built-in oracle battery")
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
