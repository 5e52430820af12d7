"""Resonance combs and integrated dispersion for ring resonators.

Given a ring geometry, finds every azimuthal mode number m whose
resonance wavelength falls in a band, by solving the self-consistency
condition

    f_m = m c / (2 pi R n_eff(lambda(f_m)))

per mode. Two strategies:

* "direct": fixed-point iteration per mode, each step one eigensolve.
  Slow but assumption-free; serves as the runtime oracle.
* "interpolated" (default): n_eff(lambda) is sampled at Chebyshev nodes
  across the band, interpolated by a polynomial, and each resonance is
  found as a bracketed root of 2 pi R n(lambda) - m lambda. A few modes
  are always re-solved with the direct strategy and the two must agree
  within 10x the convergence threshold, otherwise the band solve fails
  loudly rather than return silently inconsistent values.

From the comb, the pump-adjacent free spectral range D1 is the central
difference of omega around the pump mode m0, and the integrated
dispersion is

    D_int(mu) = omega_m - omega_0 - D1 * mu,    mu = m - m0,

summarized by an ordinary least-squares quadratic over a window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.chebyshev import Chebyshev, chebpts1
from scipy.optimize import brentq

from .materials import MaterialLibrary, DEFAULT_LIBRARY
from .modesolver import (
    CrossSection,
    EigenConfig,
    SimGrid,
    build_index_map,
    solve_fundamental_mode,
    UnguidedModeError,
)

SPEED_OF_LIGHT_M_S = 299792458.0
_C_UM_S = SPEED_OF_LIGHT_M_S * 1e6  # micrometers per second


class ResonanceError(RuntimeError):
    pass


class NonConvergenceError(ResonanceError):
    """Fixed-point iteration exhausted; carries the last |delta f| in Hz."""

    def __init__(self, msg: str, last_delta_hz: float):
        super().__init__(msg)
        self.last_delta_hz = last_delta_hz


class EmptyBandError(ResonanceError):
    pass


class ConsistencyError(ResonanceError):
    """Interpolated and direct strategies disagree beyond tolerance."""


@dataclass(frozen=True)
class ResonatorSpec:
    radius_um: float
    width_um: float
    height_um: float
    core_material: str = "Si3N4"
    clad_material: str = "SiO2"

    def __post_init__(self):
        if self.radius_um <= 0 or self.width_um <= 0 or self.height_um <= 0:
            raise ValueError("radius, width and height must all be positive")


@dataclass(frozen=True)
class ResonanceSolverConfig:
    threshold_hz: float = 1e6
    max_iterations: int = 20
    band_um: tuple[float, float] = (1.0, 2.0)
    strategy: str = "interpolated"  # or "direct"
    n_samples: int = 15  # interpolation nodes across the band
    pump_wavelength_um: float = 1.557
    clad_box_um: tuple[float, float] = (4.0, 4.0)
    grid_points: tuple[int, int] = (200, 200)
    eigen: EigenConfig = field(default_factory=EigenConfig)
    use_bend: bool = True  # include ring curvature in the mode solve

    def __post_init__(self):
        if self.threshold_hz <= 0:
            raise ValueError("threshold_hz must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        lo, hi = self.band_um
        if not lo < hi:
            raise ValueError("band_um must satisfy lambda_min < lambda_max")
        if self.strategy not in ("direct", "interpolated"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")


@dataclass(frozen=True)
class ResonanceResult:
    frequency_hz: float
    n_eff: float
    iterations: int
    wavelength_um: float


@dataclass(frozen=True)
class ResonanceSet:
    """Comb of resonances, sorted by mode number."""

    m: np.ndarray  # integer mode numbers, strictly increasing
    omega: np.ndarray  # angular frequencies, rad/s
    n_eff: np.ndarray
    m0: int  # pump mode number
    pump_wavelength_um: float = 1.557

    def __post_init__(self):
        if not (len(self.m) == len(self.omega) == len(self.n_eff)):
            raise ValueError("m, omega and n_eff must have equal length")
        if len(self.m) == 0:
            raise ValueError("resonance set cannot be empty")
        if np.any(np.diff(self.m) <= 0) or np.any(np.diff(self.omega) <= 0):
            raise ValueError("m and omega must both be strictly increasing")
        if int(self.m0) not in set(int(v) for v in self.m):
            raise ValueError("pump mode m0 is not part of the set")

    def wavelengths_um(self) -> np.ndarray:
        return 2.0 * math.pi * _C_UM_S / self.omega

    def omega_at(self, m: int) -> float:
        idx = np.searchsorted(self.m, m)
        if idx >= len(self.m) or self.m[idx] != m:
            raise KeyError(f"mode {m} not in resonance set")
        return float(self.omega[idx])


@dataclass(frozen=True)
class DintProfile:
    """Integrated dispersion relative to the pump mode."""

    mu: np.ndarray  # m - m0
    dint: np.ndarray  # rad/s
    d1: float  # rad/s
    omega0: float  # rad/s

    def __post_init__(self):
        if len(self.mu) != len(self.dint):
            raise ValueError("mu and dint must have equal length")

    def omega(self) -> np.ndarray:
        return self.omega0 + self.d1 * self.mu + self.dint

    def wavelengths_um(self) -> np.ndarray:
        return 2.0 * math.pi * _C_UM_S / self.omega()

    def write_csv(self, path) -> None:
        """D_int as frequency (value / 2 pi), one row per mode."""
        lines = ["mu,dint_hz"]
        for mu_i, dint_i in zip(self.mu, self.dint):
            lines.append("%d,%.9e" % (int(mu_i), dint_i / (2.0 * math.pi)))
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class QuadraticFit:
    """D_int(mu)/2pi ~= q0 + q1 mu + q2 mu^2, coefficients in Hz."""

    q0_hz: float
    q1_hz: float
    q2_hz: float
    window: tuple
    residual_rms_hz: float
    n_modes: int

    def coefficients_hz(self) -> tuple[float, float, float]:
        return (self.q0_hz, self.q1_hz, self.q2_hz)


def guess_frequency(m: int, radius_um: float, n: float) -> float:
    """First-pass resonance frequency m c / (2 pi R n), in Hz."""
    if m < 1:
        raise ValueError("mode number m must be at least 1")
    if radius_um <= 0 or n <= 0:
        raise ValueError("radius and index must be positive")
    return m * _C_UM_S / (2.0 * math.pi * radius_um * n)


class NeffEvaluator:
    """Effective-index evaluator bound to one geometry.

    Repeats nothing: results are memoized per wavelength, and each new
    eigensolve is warm-started from the previous field, which changes
    slowly along a wavelength sweep.
    """

    def __init__(
        self,
        spec: ResonatorSpec,
        cfg: ResonanceSolverConfig,
        lib: MaterialLibrary = DEFAULT_LIBRARY,
    ):
        self.xs = CrossSection(
            core_width_um=spec.width_um,
            core_height_um=spec.height_um,
            clad_box_um=cfg.clad_box_um,
            bend_radius_um=spec.radius_um if cfg.use_bend else None,
            core_material=spec.core_material,
            clad_material=spec.clad_material,
        )
        self.grid = SimGrid.for_box(cfg.clad_box_um, *cfg.grid_points)
        self.eigen = cfg.eigen
        self.lib = lib
        self._cache: dict[float, float] = {}
        self._start: np.ndarray | None = None
        self.solve_count = 0

    def __call__(self, wavelength_um: float) -> float:
        hit = self._cache.get(wavelength_um)
        if hit is not None:
            return hit
        imap = build_index_map(self.xs, wavelength_um, lib=self.lib, grid=self.grid)
        sol = solve_fundamental_mode(imap, cfg=self.eigen, start_vector=self._start)
        if not sol.guided:
            raise UnguidedModeError(
                f"cross-section does not guide at {wavelength_um:.6f} um"
            )
        self._start = sol.field.ravel()
        self.solve_count += 1
        self._cache[wavelength_um] = sol.n_eff
        return sol.n_eff


def _material_window_um(
    spec: ResonatorSpec, lib: MaterialLibrary
) -> tuple[float, float]:
    core = lib.get(spec.core_material).valid_range_um
    clad = lib.get(spec.clad_material).valid_range_um
    return (max(core[0], clad[0]), min(core[1], clad[1]))


def solve_resonance(
    spec: ResonatorSpec,
    m: int,
    cfg: ResonanceSolverConfig = ResonanceSolverConfig(),
    lib: MaterialLibrary = DEFAULT_LIBRARY,
    n_eff_fn=None,
    f_init_hz: float | None = None,
) -> ResonanceResult:
    """Fixed point of f -> m c / (2 pi R n_eff(c / f)).

    Starts from the closed-form guess using the core index at the band
    center (or from f_init_hz when given) and stops once successive
    frequencies differ by less than cfg.threshold_hz. Iterate
    wavelengths are clamped to the materials' joint validity window, so
    a crude initial guess cannot step outside the dispersion models.
    """
    if n_eff_fn is None:
        n_eff_fn = NeffEvaluator(spec, cfg, lib)
    lo, hi = _material_window_um(spec, lib)
    eps = 1e-9
    if f_init_hz is not None:
        f = float(f_init_hz)
    else:
        lam_center = 0.5 * (cfg.band_um[0] + cfg.band_um[1])
        f = guess_frequency(m, spec.radius_um, lib.index(spec.core_material, lam_center))
    delta = math.inf
    for it in range(1, cfg.max_iterations + 1):
        lam = min(max(_C_UM_S / f, lo + eps), hi - eps)
        n_eff = n_eff_fn(lam)
        f_new = guess_frequency(m, spec.radius_um, n_eff)
        delta = abs(f_new - f)
        f = f_new
        if delta < cfg.threshold_hz:
            return ResonanceResult(
                frequency_hz=f,
                n_eff=n_eff,
                iterations=it,
                wavelength_um=_C_UM_S / f,
            )
    raise NonConvergenceError(
        f"mode m={m} did not converge in {cfg.max_iterations} iterations "
        f"(last |delta f| = {delta:.3e} Hz)",
        last_delta_hz=delta,
    )


def _fit_band_polynomial(n_eff_fn, band_um: tuple[float, float], n_samples: int):
    """Polynomial through n_eff at Chebyshev nodes spanning the band."""
    lo, hi = band_um
    nodes = 0.5 * (lo + hi) + 0.5 * (hi - lo) * chebpts1(n_samples)
    nodes = np.sort(nodes)  # ascending, so warm starts track the sweep
    vals = np.array([n_eff_fn(float(lam)) for lam in nodes])
    return Chebyshev.fit(nodes, vals, deg=n_samples - 1, domain=[lo, hi])


def _mode_number_range(
    radius_um: float, band_um: tuple[float, float], n_at_lo: float, n_at_hi: float
) -> tuple[int, int]:
    lo, hi = band_um
    two_pi_r = 2.0 * math.pi * radius_um
    m_hi = math.floor(two_pi_r * n_at_lo / lo)
    m_lo = math.ceil(two_pi_r * n_at_hi / hi)
    return m_lo, m_hi


def _pump_index(wavelengths_um: np.ndarray, target_um: float) -> int:
    """Index of the wavelength nearest the target; ties pick the shorter."""
    dist = np.abs(wavelengths_um - target_um)
    tied = np.flatnonzero(dist == dist.min())
    return int(tied[np.argmin(wavelengths_um[tied])])


def resonance_band(
    spec: ResonatorSpec,
    cfg: ResonanceSolverConfig = ResonanceSolverConfig(),
    lib: MaterialLibrary = DEFAULT_LIBRARY,
    n_eff_fn=None,
) -> ResonanceSet:
    """All resonances with wavelength inside cfg.band_um.

    With the interpolated strategy the pump mode and two offset modes
    are re-solved directly; any disagreement beyond 10x threshold_hz
    raises ConsistencyError.
    """
    evaluator = n_eff_fn if n_eff_fn is not None else NeffEvaluator(spec, cfg, lib)
    lo, hi = cfg.band_um
    mat_lo, mat_hi = _material_window_um(spec, lib)
    if lo < mat_lo or hi > mat_hi:
        raise ValueError(
            f"band {cfg.band_um} um exceeds material validity ({mat_lo}, {mat_hi}) um"
        )
    two_pi_r = 2.0 * math.pi * spec.radius_um

    if cfg.strategy == "interpolated":
        poly = _fit_band_polynomial(evaluator, cfg.band_um, cfg.n_samples)
        m_lo, m_hi = _mode_number_range(
            spec.radius_um, cfg.band_um, float(poly(lo)), float(poly(hi))
        )
        ms, omegas, neffs = [], [], []
        for m in range(m_lo, m_hi + 1):
            g_lo = two_pi_r * float(poly(lo)) - m * lo
            g_hi = two_pi_r * float(poly(hi)) - m * hi
            if g_lo < 0.0 or g_hi > 0.0:
                continue  # resonance sits outside the band
            lam = brentq(
                lambda l: two_pi_r * float(poly(l)) - m * l,
                lo,
                hi,
                xtol=1e-13,
                rtol=1e-15,
            )
            ms.append(m)
            omegas.append(2.0 * math.pi * _C_UM_S / lam)
            neffs.append(float(poly(lam)))
    else:
        m_lo, m_hi = _mode_number_range(
            spec.radius_um, cfg.band_um, evaluator(lo), evaluator(hi)
        )
        ms, omegas, neffs = [], [], []
        f_prev = None
        for m in range(m_lo, m_hi + 1):
            res = solve_resonance(
                spec, m, cfg, lib, n_eff_fn=evaluator, f_init_hz=f_prev
            )
            # warm-start the next mode one free spectral range up
            f_prev = res.frequency_hz * (m + 1) / m
            if lo <= res.wavelength_um <= hi:
                ms.append(m)
                omegas.append(2.0 * math.pi * res.frequency_hz)
                neffs.append(res.n_eff)

    if not ms:
        raise EmptyBandError(f"no resonances inside {cfg.band_um} um")

    m_arr = np.asarray(ms, dtype=np.int64)
    omega_arr = np.asarray(omegas)
    neff_arr = np.asarray(neffs)
    lam_arr = 2.0 * math.pi * _C_UM_S / omega_arr
    m0 = int(m_arr[_pump_index(lam_arr, cfg.pump_wavelength_um)])

    if cfg.strategy == "interpolated":
        _spot_check(spec, cfg, lib, evaluator, m_arr, omega_arr, m0)

    return ResonanceSet(
        m=m_arr,
        omega=omega_arr,
        n_eff=neff_arr,
        m0=m0,
        pump_wavelength_um=cfg.pump_wavelength_um,
    )


def _spot_check(spec, cfg, lib, evaluator, m_arr, omega_arr, m0):
    """Re-solve a few modes directly and compare against interpolation."""
    available = set(int(v) for v in m_arr)
    picks = [m for m in (m0, m0 - 10, m0 + 10) if m in available]
    for m in sorted(available):
        if len(picks) >= 3:
            break
        if m not in picks:
            picks.append(m)
    tol = 10.0 * cfg.threshold_hz
    for m in picks:
        idx = int(np.searchsorted(m_arr, m))
        f_interp = omega_arr[idx] / (2.0 * math.pi)
        direct = solve_resonance(
            spec, m, cfg, lib, n_eff_fn=evaluator, f_init_hz=f_interp
        )
        diff = abs(direct.frequency_hz - f_interp)
        if diff > tol:
            raise ConsistencyError(
                f"strategies disagree at m={m}: direct {direct.frequency_hz:.3f} Hz "
                f"vs interpolated {f_interp:.3f} Hz (|diff| {diff:.3e} Hz > {tol:.3e})"
            )


def integrated_dispersion(rs: ResonanceSet) -> DintProfile:
    """D_int(mu) = omega_m - omega_0 - D1 mu with D1 the central FSR.

    The central difference around m0 cancels the quadratic dispersion
    term, so D1 is exact for combs up to second order in mu.
    """
    try:
        w_plus = rs.omega_at(rs.m0 + 1)
        w_minus = rs.omega_at(rs.m0 - 1)
    except KeyError:
        raise ValueError(
            f"resonance set must contain modes {rs.m0 - 1} and {rs.m0 + 1} "
            "to form the central difference around the pump"
        ) from None
    omega0 = rs.omega_at(rs.m0)
    d1 = (w_plus - w_minus) / 2.0
    mu = rs.m - rs.m0
    dint = rs.omega - omega0 - d1 * mu
    return DintProfile(mu=mu, dint=dint, d1=d1, omega0=omega0)


def _is_integer_pair(window) -> bool:
    return all(
        isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in window
    )


def fit_quadratic(profile: DintProfile, window=(1.5, 1.6)) -> QuadraticFit:
    """Least-squares quadratic of D_int over a window, in Hz.

    The window is a pair of mode offsets (integers, inclusive) or a pair
    of wavelengths in micrometers (floats, inclusive). The default is the
    1.5 to 1.6 um stretch around the usual pump.
    """
    lo, hi = window
    if not lo < hi:
        raise ValueError("window bounds must satisfy lo < hi")
    if _is_integer_pair(window):
        mask = (profile.mu >= lo) & (profile.mu <= hi)
    else:
        lam = profile.wavelengths_um()
        mask = (lam >= lo) & (lam <= hi)
    mu = profile.mu[mask].astype(float)
    y = profile.dint[mask]
    if len(mu) < 5:
        raise ValueError(f"window {window} contains {len(mu)} modes, need at least 5")
    if np.unique(mu).size < 3:
        raise ValueError("window is degenerate: fewer than 3 distinct mode offsets")
    design = np.column_stack([np.ones_like(mu), mu, mu * mu])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    rms = math.sqrt(float(np.mean(resid**2)))
    two_pi = 2.0 * math.pi
    return QuadraticFit(
        q0_hz=float(coef[0]) / two_pi,
        q1_hz=float(coef[1]) / two_pi,
        q2_hz=float(coef[2]) / two_pi,
        window=tuple(window),
        residual_rms_hz=rms / two_pi,
        n_modes=int(len(mu)),
    )
