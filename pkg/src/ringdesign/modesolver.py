"""Scalar finite-difference mode solver for a rectangular-core waveguide.

Discretizes the scalar Helmholtz eigenproblem

    (d2/dx2 + d2/dy2 + k0^2 n^2(x, y)) phi = beta^2 phi

on a uniform cell-centered grid with zero-field (Dirichlet) boundaries,
using the standard 5-point stencil, and returns the fundamental mode:
the eigenpair with the largest beta^2. The effective index is
n_eff = beta / k0.

A finite bend radius R is handled by the conformal transformation that
maps the curved guide to a straight one with index n(x, y) * (1 + x/R),
x being the signed in-plane offset from the core center.

This is deliberately a scalar model: it has no polarization and no
vector boundary corrections, so absolute effective indices differ from
full-vectorial solvers at the 1e-2 level. Trends across geometry and
wavelength, which is what the rest of the package consumes, are
captured well.

The eigensolver is shift-and-invert power iteration with the shift
placed at k0^2 * max(n)^2, which bounds the spectrum from above, so the
nearest eigenvalue is the largest beta^2. The shifted operator is
factorized once per solve (sparse LU) and iterates are Rayleigh-quotient
estimates; everything is deterministic for fixed inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .materials import MaterialLibrary, DEFAULT_LIBRARY


class ModeSolverError(RuntimeError):
    pass


class ConvergenceError(ModeSolverError):
    """Eigensolver did not reach tolerance; carries the last residual."""

    def __init__(self, msg: str, last_delta: float):
        super().__init__(msg)
        self.last_delta = last_delta


class UnguidedModeError(ModeSolverError):
    """The dominant eigenpair is not a guided mode (beta^2 <= k0^2 n_clad^2)."""


@dataclass(frozen=True)
class CrossSection:
    """Rectangular core centered in a cladding box, dimensions in micrometers."""

    core_width_um: float
    core_height_um: float
    clad_box_um: tuple[float, float] = (4.0, 4.0)
    bend_radius_um: float | None = None  # None means straight
    core_material: str = "Si3N4"
    clad_material: str = "SiO2"

    def __post_init__(self):
        w, h = self.core_width_um, self.core_height_um
        bw, bh = self.clad_box_um
        if min(w, h, bw, bh) <= 0:
            raise ValueError("all cross-section dimensions must be positive")
        if w >= bw or h >= bh:
            raise ValueError(
                f"core {w} x {h} um does not fit strictly inside the "
                f"{bw} x {bh} um cladding box"
            )
        if self.bend_radius_um is not None and self.bend_radius_um <= bw / 2:
            raise ValueError("bend radius must exceed half the domain width")


@dataclass(frozen=True)
class SimGrid:
    """Uniform cell-centered grid spanning exactly the cladding box."""

    nx: int
    ny: int
    dx: float
    dy: float

    def __post_init__(self):
        if self.nx * self.ny < 4 or self.dx <= 0 or self.dy <= 0:
            raise ValueError("grid must have nx*ny >= 4 and positive spacings")

    @classmethod
    def for_box(cls, clad_box_um: tuple[float, float], nx: int, ny: int) -> "SimGrid":
        bw, bh = clad_box_um
        return cls(nx=nx, ny=ny, dx=bw / nx, dy=bh / ny)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinates, origin at the domain (and core) center."""
        x = (np.arange(self.nx) + 0.5) * self.dx - self.nx * self.dx / 2.0
        y = (np.arange(self.ny) + 0.5) * self.dy - self.ny * self.dy / 2.0
        return x, y


@dataclass(frozen=True)
class IndexMap:
    """Per-cell refractive index at a fixed wavelength (shape ny x nx)."""

    n: np.ndarray
    grid: SimGrid
    wavelength_um: float
    n_core: float  # unscaled core index at this wavelength
    n_clad: float  # unscaled cladding index at this wavelength

    def __post_init__(self):
        if self.n.shape != (self.grid.ny, self.grid.nx):
            raise ValueError("index array shape does not match grid")
        if not np.all(self.n > 0):
            raise ValueError("index map contains non-positive cells")


@dataclass(frozen=True)
class EigenConfig:
    rtol: float = 1e-10  # relative tolerance on the eigenvalue
    max_iterations: int = 10000
    shift: float | None = None  # None: k0^2 * max(n)^2

    def __post_init__(self):
        if self.rtol <= 0 or self.max_iterations < 1:
            raise ValueError("rtol must be positive and max_iterations >= 1")


@dataclass(frozen=True)
class ModeSolution:
    n_eff: float
    beta: float  # rad/um
    field: np.ndarray  # L2-normalized, shape ny x nx
    wavelength_um: float
    iterations_used: int
    converged: bool
    guided: bool
    residual: float


def build_index_map(
    xs: CrossSection,
    wavelength_um: float,
    lib: MaterialLibrary = DEFAULT_LIBRARY,
    grid: SimGrid | None = None,
) -> IndexMap:
    """Rasterize the cross-section onto the grid at one wavelength.

    Cells take the material of their center point (boundary-inclusive:
    a center exactly on the core edge counts as core). With a finite
    bend radius every cell index is scaled by (1 + x/R).
    """
    if grid is None:
        grid = SimGrid.for_box(xs.clad_box_um, 200, 200)
    n_core = lib.index(xs.core_material, wavelength_um)
    n_clad = lib.index(xs.clad_material, wavelength_um)
    x, y = grid.cell_centers()
    X, Y = np.meshgrid(x, y)
    inside = (np.abs(X) <= xs.core_width_um / 2.0) & (
        np.abs(Y) <= xs.core_height_um / 2.0
    )
    n = np.where(inside, n_core, n_clad)
    if xs.bend_radius_um is not None:
        n = n * (1.0 + X / xs.bend_radius_um)
    return IndexMap(
        n=n, grid=grid, wavelength_um=wavelength_um, n_core=n_core, n_clad=n_clad
    )


def _helmholtz_matrix(imap: IndexMap, k0: float) -> sp.csc_matrix:
    """5-point scalar Helmholtz operator, Dirichlet via zero ghost cells."""
    g = imap.grid
    nx, ny = g.nx, g.ny
    N = nx * ny
    inv_dx2 = 1.0 / (g.dx * g.dx)
    inv_dy2 = 1.0 / (g.dy * g.dy)
    main = -2.0 * (inv_dx2 + inv_dy2) + k0 * k0 * (imap.n.ravel() ** 2)
    # x-neighbours: row-major layout (iy, ix), ix fastest; cut row wraps
    ex = np.full(N - 1, inv_dx2)
    ex[np.arange(1, N) % nx == 0] = 0.0
    ey = np.full(N - nx, inv_dy2)
    A = (
        sp.diags(main)
        + sp.diags(ex, 1)
        + sp.diags(ex, -1)
        + sp.diags(ey, nx)
        + sp.diags(ey, -nx)
    )
    return A.tocsc()


def _default_start_vector(grid: SimGrid) -> np.ndarray:
    # Gaussian bump at the core center: deterministic and never orthogonal
    # to the fundamental mode.
    x, y = grid.cell_centers()
    X, Y = np.meshgrid(x, y)
    w = min(grid.nx * grid.dx, grid.ny * grid.dy) / 4.0
    return np.exp(-(X**2 + Y**2) / (w * w)).ravel()


def solve_fundamental_mode(
    imap: IndexMap,
    wavelength_um: float | None = None,
    cfg: EigenConfig = EigenConfig(),
    start_vector: np.ndarray | None = None,
) -> ModeSolution:
    """Largest-beta^2 eigenpair of the scalar Helmholtz operator.

    Raises ConvergenceError if the eigenvalue tolerance is not met within
    cfg.max_iterations. An all-evanescent result is returned with
    guided=False rather than raised, so callers can decide.
    """
    lam = imap.wavelength_um if wavelength_um is None else wavelength_um
    if lam <= 0:
        raise ValueError("wavelength must be positive")
    k0 = 2.0 * math.pi / lam
    A = _helmholtz_matrix(imap, k0)
    sigma = cfg.shift if cfg.shift is not None else k0 * k0 * float(imap.n.max()) ** 2
    N = A.shape[0]
    lu = spla.splu(A - sigma * sp.identity(N, format="csc"))

    v = _default_start_vector(imap.grid) if start_vector is None else np.asarray(
        start_vector, dtype=float
    ).ravel().copy()
    v /= np.linalg.norm(v)

    lam_prev = None
    delta = math.inf
    converged = False
    its = 0
    for its in range(1, cfg.max_iterations + 1):
        w = lu.solve(v)
        v = w / np.linalg.norm(w)
        ev = float(v @ (A @ v))
        if lam_prev is not None:
            delta = abs(ev - lam_prev)
            if delta <= cfg.rtol * abs(ev):
                converged = True
                break
        lam_prev = ev
    if not converged:
        raise ConvergenceError(
            f"eigensolver did not converge in {cfg.max_iterations} iterations "
            f"(last eigenvalue change {delta:.3e})",
            last_delta=delta,
        )

    residual = float(np.linalg.norm(A @ v - ev * v))
    guided = ev > (k0 * imap.n_clad) ** 2
    if ev > 0:
        beta = math.sqrt(ev)
        n_eff = beta / k0
    else:
        beta = math.nan
        n_eff = math.nan
        guided = False

    g = imap.grid
    field = v.reshape(g.ny, g.nx)
    norm = math.sqrt(float(np.sum(field**2)) * g.dx * g.dy)
    field = field / norm
    return ModeSolution(
        n_eff=n_eff,
        beta=beta,
        field=field,
        wavelength_um=lam,
        iterations_used=its,
        converged=converged,
        guided=guided,
        residual=residual,
    )


def effective_index(
    xs: CrossSection,
    wavelength_um: float,
    lib: MaterialLibrary = DEFAULT_LIBRARY,
    cfg: EigenConfig = EigenConfig(),
    grid: SimGrid | None = None,
) -> float:
    """Effective index of the fundamental guided mode.

    Composition of build_index_map and solve_fundamental_mode; raises
    UnguidedModeError when the cross-section does not guide at this
    wavelength.
    """
    imap = build_index_map(xs, wavelength_um, lib=lib, grid=grid)
    sol = solve_fundamental_mode(imap, cfg=cfg)
    if not sol.guided:
        raise UnguidedModeError(
            f"no guided mode at {wavelength_um} um "
            f"(n_eff {sol.n_eff:.6f} <= n_clad {imap.n_clad:.6f})"
        )
    return sol.n_eff
