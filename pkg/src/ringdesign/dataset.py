"""Geometry-grid dataset generation, splitting, and normalization.

A dataset row maps one ring geometry (radius, width, height) to the
quadratic-fit coefficients of its integrated dispersion. Geometries are
enumerated over a rectangular grid, solved independently (optionally in
parallel), and persisted as CSV with a JSON sidecar carrying the full
provenance: grid, solver configuration, feature configuration, and any
rejected geometries with their reasons. Generation is deterministic, so
rerunning with the same configuration reproduces the files byte for
byte.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .materials import MaterialLibrary, DEFAULT_LIBRARY
from .resonance import (
    ResonanceSolverConfig,
    ResonatorSpec,
    fit_quadratic,
    integrated_dispersion,
    resonance_band,
)

TARGET_NAMES = ("radius_um", "width_um", "height_um")


class DatasetError(RuntimeError):
    pass


class TooManyRejectsError(DatasetError):
    """More than the tolerated share of geometries failed to solve."""


@dataclass(frozen=True)
class GridSpec:
    radii_um: tuple[float, ...]
    widths_um: tuple[float, ...]
    heights_um: tuple[float, ...]

    def __post_init__(self):
        for name, axis in (
            ("radii_um", self.radii_um),
            ("widths_um", self.widths_um),
            ("heights_um", self.heights_um),
        ):
            if len(axis) == 0:
                raise ValueError(f"{name} must be non-empty")
            if any(v <= 0 for v in axis):
                raise ValueError(f"{name} must be positive")
            if any(a >= b for a, b in zip(axis, axis[1:])):
                raise ValueError(f"{name} must be strictly increasing")

    def size(self) -> int:
        return len(self.radii_um) * len(self.widths_um) * len(self.heights_um)


def standard_grid() -> GridSpec:
    """Survey grid: 6 radii x 11 widths x 7 heights = 462 geometries."""
    return GridSpec(
        radii_um=(30.0, 50.0, 70.0, 90.0, 110.0, 130.0),
        widths_um=(1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0),
        heights_um=(0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8),
    )


def enumerate_grid(spec: GridSpec) -> list[tuple[float, float, float]]:
    """Cartesian product, radius slowest, width middle, height fastest."""
    return [
        (r, w, h)
        for r in spec.radii_um
        for w in spec.widths_um
        for h in spec.heights_um
    ]


@dataclass(frozen=True)
class FeatureConfig:
    window: tuple[float, float] = (1.5, 1.6)  # fit window, micrometers
    include_d1: bool = False  # append the FSR as a fourth feature

    def names(self) -> tuple[str, ...]:
        base = ("q0_hz", "q1_hz", "q2_hz")
        return base + ("d1_hz",) if self.include_d1 else base


@dataclass(frozen=True)
class SampleRecord:
    radius_um: float
    width_um: float
    height_um: float
    features: tuple[float, ...]

    def geometry(self) -> tuple[float, float, float]:
        return (self.radius_um, self.width_um, self.height_um)


@dataclass(frozen=True)
class Dataset:
    records: tuple[SampleRecord, ...]
    feature_config: FeatureConfig
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n_feat = len(self.feature_config.names())
        geoms = set()
        for rec in self.records:
            if len(rec.features) != n_feat:
                raise ValueError("record feature width does not match config")
            if not all(math.isfinite(v) for v in rec.features):
                raise ValueError(f"non-finite features for geometry {rec.geometry()}")
            if rec.geometry() in geoms:
                raise ValueError(f"duplicate geometry {rec.geometry()}")
            geoms.add(rec.geometry())

    def __len__(self) -> int:
        return len(self.records)

    def features_matrix(self) -> np.ndarray:
        return np.array([rec.features for rec in self.records], dtype=float)

    def targets_matrix(self) -> np.ndarray:
        return np.array([rec.geometry() for rec in self.records], dtype=float)


def config_hash(
    grid: GridSpec, cfg: ResonanceSolverConfig, feat: FeatureConfig
) -> str:
    """Stable digest of everything that determines dataset content."""
    payload = {
        "grid": asdict(grid),
        "resonance": asdict(cfg),
        "features": asdict(feat),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def solve_geometry_features(
    geometry: tuple[float, float, float],
    cfg: ResonanceSolverConfig,
    feat: FeatureConfig,
    lib: MaterialLibrary = DEFAULT_LIBRARY,
) -> tuple[float, ...]:
    """Forward pipeline for one geometry: comb, D_int, quadratic features."""
    r, w, h = geometry
    spec = ResonatorSpec(radius_um=r, width_um=w, height_um=h)
    rs = resonance_band(spec, cfg, lib)
    prof = integrated_dispersion(rs)
    fit = fit_quadratic(prof, feat.window)
    values = fit.coefficients_hz()
    if feat.include_d1:
        values = values + (prof.d1 / (2.0 * math.pi),)
    return values


def _solve_indexed(args):
    idx, geometry, cfg, feat, lib = args
    try:
        return idx, solve_geometry_features(geometry, cfg, feat, lib), None
    except Exception as exc:  # reject with reason, decided by the caller
        return idx, None, f"{type(exc).__name__}: {exc}"


def generate_dataset(
    grid: GridSpec,
    cfg: ResonanceSolverConfig = ResonanceSolverConfig(),
    feat: FeatureConfig = FeatureConfig(),
    lib: MaterialLibrary = DEFAULT_LIBRARY,
    jobs: int = 1,
    max_reject_fraction: float = 0.10,
    band_solver=None,
    progress=None,
) -> Dataset:
    """Solve every grid geometry and collect feature records.

    Failing geometries are itemized in meta["rejects"] with their error
    strings; if more than max_reject_fraction of the grid fails the
    whole run aborts. band_solver, when given, replaces the forward
    pipeline (geometry -> feature tuple) and exists for tests and
    solver substitution. Results are ordered by grid position and do
    not depend on the number of jobs.
    """
    geometries = enumerate_grid(grid)
    work = [(i, g, cfg, feat, lib) for i, g in enumerate(geometries)]
    results: list = [None] * len(geometries)

    def run_one(args):
        if band_solver is None:
            return _solve_indexed(args)
        idx, geometry = args[0], args[1]
        try:
            return idx, tuple(band_solver(geometry)), None
        except Exception as exc:
            return idx, None, f"{type(exc).__name__}: {exc}"

    if jobs > 1 and band_solver is None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for idx, values, err in pool.map(_solve_indexed, work, chunksize=1):
                results[idx] = (values, err)
                if progress is not None:
                    progress(idx, len(geometries))
    else:
        for args in work:
            idx, values, err = run_one(args)
            results[idx] = (values, err)
            if progress is not None:
                progress(idx, len(geometries))

    records = []
    rejects = []
    for geometry, (values, err) in zip(geometries, results):
        if err is not None:
            rejects.append({"geometry": list(geometry), "reason": err})
        else:
            r, w, h = geometry
            records.append(
                SampleRecord(radius_um=r, width_um=w, height_um=h, features=values)
            )

    if len(rejects) > max_reject_fraction * len(geometries):
        summary = "; ".join(
            f"{tuple(rej['geometry'])}: {rej['reason']}" for rej in rejects[:10]
        )
        raise TooManyRejectsError(
            f"{len(rejects)}/{len(geometries)} geometries failed "
            f"(tolerated {max_reject_fraction:.0%}): {summary}"
        )

    meta = {
        "tool_version": __version__,
        "config_hash": config_hash(grid, cfg, feat),
        "grid": asdict(grid),
        "resonance_config": asdict(cfg),
        "feature_config": asdict(feat),
        "rejects": rejects,
        "seed": None,  # generation is deterministic; splits carry seeds
    }
    return Dataset(records=tuple(records), feature_config=feat, meta=meta)


def split_train_test(
    ds: Dataset, ratio: float = 0.75, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Seeded uniform shuffle; train gets floor(ratio * N) records."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n = len(ds)
    if n < 4:
        raise ValueError(f"need at least 4 records to split, have {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratio * n))
    train_idx = perm[:n_train]
    test_idx = perm[n_train:]
    meta = dict(ds.meta)
    meta["seed"] = seed

    def subset(indices) -> Dataset:
        return Dataset(
            records=tuple(ds.records[i] for i in indices),
            feature_config=ds.feature_config,
            meta=meta,
        )

    return subset(train_idx), subset(test_idx)


@dataclass(frozen=True)
class MinMaxNormalizer:
    """Column-wise affine map sending the training min/max to 0/1.

    Constant columns map to 0 under apply and back to their constant
    under invert, so degenerate features cannot produce NaN.
    """

    col_min: tuple[float, ...]
    col_max: tuple[float, ...]

    def __post_init__(self):
        if len(self.col_min) != len(self.col_max):
            raise ValueError("min and max must have equal length")
        if any(hi < lo for lo, hi in zip(self.col_min, self.col_max)):
            raise ValueError("max must be >= min per column")

    @classmethod
    def fit(cls, X: np.ndarray) -> "MinMaxNormalizer":
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("need a non-empty 2D array to fit")
        return cls(
            col_min=tuple(float(v) for v in X.min(axis=0)),
            col_max=tuple(float(v) for v in X.max(axis=0)),
        )

    def _spans(self) -> np.ndarray:
        return np.array(self.col_max) - np.array(self.col_min)

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        lo = np.array(self.col_min)
        span = self._spans()
        safe = np.where(span == 0.0, 1.0, span)
        out = (X - lo) / safe
        if X.ndim == 1:
            return np.where(span == 0.0, 0.0, out)
        return np.where(span[None, :] == 0.0, 0.0, out)

    def invert(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        lo = np.array(self.col_min)
        return X * self._spans() + lo

    def to_dict(self) -> dict:
        return {"col_min": list(self.col_min), "col_max": list(self.col_max)}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxNormalizer":
        return cls(col_min=tuple(d["col_min"]), col_max=tuple(d["col_max"]))


def _format_row(rec: SampleRecord) -> str:
    cells = [rec.radius_um, rec.width_um, rec.height_um, *rec.features]
    return ",".join("%.9e" % v for v in cells)


def save_dataset(ds: Dataset, csv_path) -> None:
    """CSV of records plus a .meta.json sidecar with full provenance."""
    csv_path = str(csv_path)
    header = ",".join(TARGET_NAMES + ds.feature_config.names())
    lines = [header] + [_format_row(rec) for rec in ds.records]
    with open(csv_path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(_meta_path(csv_path), "w", newline="\n") as fh:
        json.dump(ds.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _meta_path(csv_path: str) -> str:
    base = csv_path[:-4] if csv_path.endswith(".csv") else csv_path
    return base + ".meta.json"


def load_dataset(csv_path) -> Dataset:
    csv_path = str(csv_path)
    with open(csv_path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    header = lines[0].split(",")
    if tuple(header[:3]) != TARGET_NAMES:
        raise DatasetError(f"unexpected dataset header: {lines[0]!r}")
    include_d1 = header[3:] == ["q0_hz", "q1_hz", "q2_hz", "d1_hz"]
    if not include_d1 and header[3:] != ["q0_hz", "q1_hz", "q2_hz"]:
        raise DatasetError(f"unexpected feature columns: {header[3:]}")
    try:
        with open(_meta_path(csv_path)) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        meta = {}
    fc_meta = meta.get("feature_config")
    feat = FeatureConfig(
        window=tuple(fc_meta["window"]) if fc_meta else (1.5, 1.6),
        include_d1=include_d1,
    )
    records = []
    for line in lines[1:]:
        vals = [float(v) for v in line.split(",")]
        records.append(
            SampleRecord(
                radius_um=vals[0],
                width_um=vals[1],
                height_um=vals[2],
                features=tuple(vals[3:]),
            )
        )
    return Dataset(records=tuple(records), feature_config=feat, meta=meta)
