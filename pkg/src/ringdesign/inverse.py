"""Geometry estimation from dispersion data, plus validation studies.

The ingestion path accepts two CSV schemas:

* ``wavelength_nm,dint_hz``: integrated dispersion already referenced
  to a pump; rows strictly ordered by wavelength in either direction.
* ``mode_index,resonance_hz``: raw resonance frequencies of
  consecutive modes, from which D1 and D_int are computed.

In both cases the mode offset scale is anchored at the row whose
wavelength is nearest the pump target (ties resolve to the shorter
wavelength), that row's D_int is re-zeroed, and rows are returned in
ascending mode-offset order. Only the anchor offset is adjusted; if a
measured file was referenced to a different pump, the linear term of
its D_int convention is kept as-is.

Percentage comparisons of D_int exclude modes where the baseline
magnitude sits below a 1 MHz (times 2 pi) floor: D_int crosses zero at
the pump by construction, so an unfloored relative error is dominated
by division noise there. Excluded counts are always reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .materials import MaterialLibrary, DEFAULT_LIBRARY
from .ml import GeometryModel
from .resonance import (
    DintProfile,
    QuadraticFit,
    ResonanceSet,
    ResonanceSolverConfig,
    ResonatorSpec,
    fit_quadratic,
    integrated_dispersion,
    resonance_band,
)

_C_UM_S = 299792458.0 * 1e6
DINT_FLOOR_RAD_S = 2.0 * math.pi * 1e6  # |D_int| below this is "zero"


class IngestError(ValueError):
    pass


class FeatureMismatchError(ValueError):
    pass


def _two_pi_c_over(lam_um: np.ndarray) -> np.ndarray:
    return 2.0 * math.pi * _C_UM_S / lam_um


def _pump_row(wavelengths_um: np.ndarray, pump_um: float) -> int:
    dist = np.abs(wavelengths_um - pump_um)
    tied = np.flatnonzero(dist == dist.min())
    if tied.size > 1:
        return int(tied[np.argmin(wavelengths_um[tied])])
    return int(tied[0])


def _read_rows(path) -> tuple[list[str], list[list[float]]]:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise IngestError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise IngestError(f"{path}:{i}: expected {len(header)} columns")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise IngestError(f"{path}:{i}: non-numeric cell ({exc})") from None
    return header, rows


def ingest_measured(path, pump_wavelength_um: float = 1.557) -> DintProfile:
    """Parse a measured (or exported) dispersion file into a profile.

    Requires at least 5 rows and a strict wavelength ordering; the
    anchor row must have both neighbors present so the local free
    spectral range can be formed.
    """
    header, rows = _read_rows(path)
    if len(rows) < 5:
        raise IngestError(f"{path}: need at least 5 rows, found {len(rows)}")
    data = np.array(rows, dtype=float)

    if header == ["wavelength_nm", "dint_hz"]:
        lam_um = data[:, 0] * 1e-3
        dint = data[:, 1] * 2.0 * math.pi
        steps = np.diff(lam_um)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise IngestError(f"{path}: rows are not strictly ordered by wavelength")
        pump = _pump_row(lam_um, pump_wavelength_um)
        # shorter wavelength = higher frequency = higher mode number
        direction = -1 if steps[0] > 0 else 1
        mu = direction * (np.arange(len(lam_um)) - pump)
        dint = dint - dint[pump]
        order = np.argsort(mu)
        mu, dint, lam_um = mu[order], dint[order], lam_um[order]
        pump_idx = int(np.flatnonzero(mu == 0)[0])
        if pump_idx == 0 or pump_idx == len(mu) - 1:
            raise IngestError(
                f"{path}: anchor row sits at the file edge, cannot form the "
                "local free spectral range"
            )
        omega = _two_pi_c_over(lam_um)
        omega0 = float(omega[pump_idx])
        d1 = (omega[pump_idx + 1] - omega[pump_idx - 1]) / 2.0 - (
            dint[pump_idx + 1] - dint[pump_idx - 1]
        ) / 2.0
        return DintProfile(mu=mu, dint=dint, d1=float(d1), omega0=omega0)

    if header == ["mode_index", "resonance_hz"]:
        m = data[:, 0]
        if not np.all(m == np.round(m)):
            raise IngestError(f"{path}: mode_index must be integer")
        if not np.all(np.diff(m) == 1):
            raise IngestError(f"{path}: mode_index rows must be consecutive")
        freq = data[:, 1]
        if not np.all(np.diff(freq) > 0):
            raise IngestError(f"{path}: resonance_hz must increase with mode_index")
        omega = 2.0 * math.pi * freq
        lam_um = _C_UM_S / freq
        pump = _pump_row(lam_um, pump_wavelength_um)
        rs = ResonanceSet(
            m=m.astype(np.int64),
            omega=omega,
            n_eff=np.full(m.size, math.nan),
            m0=int(m[pump]),
            pump_wavelength_um=pump_wavelength_um,
        )
        return integrated_dispersion(rs)

    raise IngestError(
        f"{path}: unrecognized header {header!r}; expected "
        "wavelength_nm,dint_hz or mode_index,resonance_hz"
    )


def export_measured(profile: DintProfile, path) -> None:
    """Write a profile in the measured-file schema, full double precision.

    %.17g preserves every float bit, so ingest_measured reads back the
    identical mode offsets and, up to one rad/s-level rounding in the
    Hz conversion, the identical D_int values.
    """
    lam_nm = profile.wavelengths_um() * 1e3
    lines = ["wavelength_nm,dint_hz"]
    for lam, dint in zip(lam_nm, profile.dint):
        lines.append("%.17g,%.17g" % (lam, dint / (2.0 * math.pi)))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class GeometryEstimate:
    radius_um: float
    width_um: float
    height_um: float
    model_id: str
    features: tuple[float, ...]
    warnings: tuple[str, ...] = ()
    actual: tuple[float, float, float] | None = None
    error_percent: tuple[float, float, float] | None = None

    def __post_init__(self):
        if min(self.radius_um, self.width_um, self.height_um) <= 0:
            raise ValueError("predicted dimensions must be positive")

    def predicted(self) -> tuple[float, float, float]:
        return (self.radius_um, self.width_um, self.height_um)

    def to_dict(self) -> dict:
        return {
            "predicted": {
                "radius_um": self.radius_um,
                "width_um": self.width_um,
                "height_um": self.height_um,
            },
            "model_id": self.model_id,
            "features": list(self.features),
            "warnings": list(self.warnings),
            "actual": None if self.actual is None else list(self.actual),
            "error_percent": None
            if self.error_percent is None
            else list(self.error_percent),
        }


def predict_geometry(
    model: GeometryModel,
    profile_or_fit,
    actual: tuple[float, float, float] | None = None,
) -> GeometryEstimate:
    """Quadratic features -> (normalize) -> forest -> (denormalize).

    Accepts a DintProfile (fitted over the model's training window) or
    a ready QuadraticFit. Window mismatches and near-zero dispersion
    are recorded as warnings on the estimate, never silently ignored.
    """
    warnings: list[str] = []
    window = tuple(model.feature_config["window"])
    include_d1 = bool(model.feature_config.get("include_d1", False))

    if isinstance(profile_or_fit, DintProfile):
        profile = profile_or_fit
        lam = profile.wavelengths_um()
        if lam.min() > window[0] or lam.max() < window[1]:
            warnings.append(
                f"profile wavelengths [{lam.min():.4f}, {lam.max():.4f}] um do "
                f"not cover the model window {window}"
            )
        fit = fit_quadratic(profile, window)
        features = list(fit.coefficients_hz())
        if include_d1:
            features.append(profile.d1 / (2.0 * math.pi))
        in_window = profile.dint[(lam >= window[0]) & (lam <= window[1])]
        reference = in_window if in_window.size else profile.dint
        if np.max(np.abs(reference)) < DINT_FLOOR_RAD_S:
            warnings.append(
                "low confidence: dispersion is below the 1 MHz floor across "
                "the fit window (near the zero-dispersion boundary)"
            )
    elif isinstance(profile_or_fit, QuadraticFit):
        fit = profile_or_fit
        if include_d1:
            raise FeatureMismatchError(
                "model expects a d1_hz feature; supply a DintProfile instead "
                "of a bare quadratic fit"
            )
        if tuple(fit.window) != window:
            warnings.append(
                f"fit window {tuple(fit.window)} differs from the model "
                f"training window {window}"
            )
        features = list(fit.coefficients_hz())
    else:
        raise TypeError("expected a DintProfile or QuadraticFit")

    if len(features) != len(model.feature_names):
        raise FeatureMismatchError(
            f"assembled {len(features)} features for a model expecting "
            f"{list(model.feature_names)}"
        )
    pred = model.predict(np.array(features, dtype=float))
    err = None
    if actual is not None:
        err = tuple(
            float(100.0 * abs(p - a) / abs(a)) for p, a in zip(pred, actual)
        )
    return GeometryEstimate(
        radius_um=float(pred[0]),
        width_um=float(pred[1]),
        height_um=float(pred[2]),
        model_id=str(model.train_meta.get("model_id", "unspecified")),
        features=tuple(float(v) for v in features),
        warnings=tuple(warnings),
        actual=actual,
        error_percent=err,
    )


@dataclass(frozen=True)
class SensitivityEntry:
    parameter: str
    mape_percent: float
    n_compared: int
    n_excluded: int


@dataclass(frozen=True)
class SensitivityReport:
    baseline: tuple[float, float, float]
    delta: float
    band_um: tuple[float, float]
    entries: tuple[SensitivityEntry, ...]  # fixed order: radius, height, width

    def to_dict(self) -> dict:
        return {
            "baseline": {
                "radius_um": self.baseline[0],
                "width_um": self.baseline[1],
                "height_um": self.baseline[2],
            },
            "delta": self.delta,
            "band_um": list(self.band_um),
            "dint_floor_rad_s": DINT_FLOOR_RAD_S,
            "entries": [
                {
                    "parameter": e.parameter,
                    "mape_percent": e.mape_percent,
                    "n_compared": e.n_compared,
                    "n_excluded": e.n_excluded,
                }
                for e in self.entries
            ],
        }


def _band_profile(
    spec: ResonatorSpec, cfg: ResonanceSolverConfig, lib: MaterialLibrary
) -> DintProfile:
    return integrated_dispersion(resonance_band(spec, cfg, lib))


def _floored_mape(base: DintProfile, other: DintProfile) -> tuple[float, int, int]:
    """(MAPE %, compared count, excluded count) on the common mu range."""
    common, bi, oi = np.intersect1d(base.mu, other.mu, return_indices=True)
    if common.size == 0:
        raise ValueError("profiles share no mode offsets")
    b = base.dint[bi]
    o = other.dint[oi]
    keep = np.abs(b) >= DINT_FLOOR_RAD_S
    excluded = int(np.sum(~keep))
    if not keep.any():
        return 0.0, 0, excluded
    value = float(100.0 * np.mean(np.abs(o[keep] - b[keep]) / np.abs(b[keep])))
    return value, int(np.sum(keep)), excluded


def sensitivity_analysis(
    spec: ResonatorSpec,
    delta: float = 0.10,
    band_um: tuple[float, float] = (1.5, 1.6),
    cfg: ResonanceSolverConfig | None = None,
    lib: MaterialLibrary = DEFAULT_LIBRARY,
    profile_fn=None,
) -> SensitivityReport:
    """D_int shift from scaling each dimension by (1 + delta) separately.

    profile_fn (spec -> DintProfile) replaces the forward solve when
    given; otherwise the resonance pipeline runs over band_um.
    """
    if cfg is None:
        cfg = ResonanceSolverConfig(band_um=band_um)
    else:
        cfg = replace(cfg, band_um=band_um)
    solve = profile_fn if profile_fn is not None else (
        lambda s: _band_profile(s, cfg, lib)
    )
    base = solve(spec)
    perturbed = {
        "radius": replace(spec, radius_um=spec.radius_um * (1.0 + delta)),
        "height": replace(spec, height_um=spec.height_um * (1.0 + delta)),
        "width": replace(spec, width_um=spec.width_um * (1.0 + delta)),
    }
    entries = []
    for name in ("radius", "height", "width"):  # fixed reporting order
        value, n_cmp, n_exc = _floored_mape(base, solve(perturbed[name]))
        entries.append(
            SensitivityEntry(
                parameter=name,
                mape_percent=value,
                n_compared=n_cmp,
                n_excluded=n_exc,
            )
        )
    return SensitivityReport(
        baseline=(spec.radius_um, spec.width_um, spec.height_um),
        delta=delta,
        band_um=tuple(band_um),
        entries=tuple(entries),
    )


@dataclass(frozen=True)
class RoundTripReport:
    actual: tuple[float, float, float]
    predicted: tuple[float, float, float]
    error_percent: tuple[float, float, float]
    dint_mape_percent: float
    n_compared: int
    n_excluded: int
    warnings: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "actual": list(self.actual),
            "predicted": list(self.predicted),
            "error_percent": list(self.error_percent),
            "dint_mape_percent": self.dint_mape_percent,
            "n_compared": self.n_compared,
            "n_excluded": self.n_excluded,
            "warnings": list(self.warnings),
        }


def round_trip(
    model: GeometryModel,
    spec: ResonatorSpec,
    cfg: ResonanceSolverConfig | None = None,
    lib: MaterialLibrary = DEFAULT_LIBRARY,
    simulate_fn=None,
) -> RoundTripReport:
    """Simulate, predict the geometry back, re-simulate, compare D_int.

    Quantifies how far the predicted geometry's dispersion lands from
    the original: small geometry errors that barely move D_int are the
    regime where inverse design from dispersion alone is well-posed.
    """
    if cfg is None:
        cfg = ResonanceSolverConfig(band_um=(1.5, 1.6))
    solve = simulate_fn if simulate_fn is not None else (
        lambda s: _band_profile(s, cfg, lib)
    )
    base = solve(spec)
    actual = (spec.radius_um, spec.width_um, spec.height_um)
    est = predict_geometry(model, base, actual=actual)
    if est.predicted() == actual:
        return RoundTripReport(
            actual=actual,
            predicted=est.predicted(),
            error_percent=(0.0, 0.0, 0.0),
            dint_mape_percent=0.0,
            n_compared=len(base.mu),
            n_excluded=0,
            warnings=est.warnings,
        )
    back = solve(
        ResonatorSpec(
            radius_um=est.radius_um,
            width_um=est.width_um,
            height_um=est.height_um,
            core_material=spec.core_material,
            clad_material=spec.clad_material,
        )
    )
    value, n_cmp, n_exc = _floored_mape(base, back)
    return RoundTripReport(
        actual=actual,
        predicted=est.predicted(),
        error_percent=est.error_percent,
        dint_mape_percent=value,
        n_compared=n_cmp,
        n_excluded=n_exc,
        warnings=est.warnings,
    )
