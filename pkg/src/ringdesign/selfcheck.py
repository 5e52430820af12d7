"""Built-in oracle battery: fast, self-contained correctness checks.

Every check compares an implementation output against a value that can
be derived independently (closed forms, hand-computed fixtures, exact
float identities) and raises AssertionError with the mismatch detail.
The runner prints one PASS/FAIL line per check and returns the failure
count, so `ringdesign selfcheck` can gate installs and CI runs in a
couple of seconds without touching the slow full-grid paths.
"""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np

from .dataset import (
    Dataset,
    FeatureConfig,
    MinMaxNormalizer,
    SampleRecord,
    enumerate_grid,
    split_train_test,
    standard_grid,
)
from .inverse import export_measured, ingest_measured, sensitivity_analysis
from .materials import (
    DEFAULT_LIBRARY,
    MaterialDomainError,
    SellmeierModel,
    refractive_index,
)
from .ml import (
    Hyperparams,
    fit_forest,
    fit_tree,
    kfold_indices,
    load_model,
    mape,
    nmae,
    save_model,
    train_geometry_model,
)
from .modesolver import (
    IndexMap,
    SimGrid,
    build_index_map,
    CrossSection,
    solve_fundamental_mode,
)
from .resonance import (
    DintProfile,
    ResonanceSet,
    ResonanceSolverConfig,
    ResonatorSpec,
    fit_quadratic,
    guess_frequency,
    integrated_dispersion,
    solve_resonance,
)

TWO_PI = 2.0 * math.pi


def _close(actual, expected, rel, label=""):
    if not abs(actual - expected) <= rel * abs(expected):
        raise AssertionError(f"{label}{actual!r} != {expected!r} (rel {rel:g})")


def _uniform_map(n0: float, box: float = 4.0, cells: int = 60) -> IndexMap:
    grid = SimGrid.for_box((box, box), cells, cells)
    return IndexMap(
        n=np.full((cells, cells), n0),
        grid=grid,
        wavelength_um=1.55,
        n_core=n0,
        n_clad=n0,
    )


def _dirichlet_shift(grid: SimGrid) -> float:
    sx = math.sin(math.pi / (2.0 * (grid.nx + 1)))
    sy = math.sin(math.pi / (2.0 * (grid.ny + 1)))
    return 4.0 / grid.dx**2 * sx * sx + 4.0 / grid.dy**2 * sy * sy


def _quadratic_comb():
    mu = np.arange(-15, 16)
    omega = 2.0**50 + 2.0**39 * mu.astype(float) + 2.0**20 * mu.astype(float) ** 2
    m = mu + 300
    return ResonanceSet(
        m=m.astype(np.int64),
        omega=omega,
        n_eff=np.full(mu.size, 1.8),
        m0=300,
    )


def check_si3n4_index_at_1550():
    _close(
        refractive_index(DEFAULT_LIBRARY.get("Si3N4"), 1.55),
        1.9962797317138814,
        1e-12,
    )


def check_sio2_index_at_1550():
    _close(
        refractive_index(DEFAULT_LIBRARY.get("SiO2"), 1.55),
        1.4440236217032609,
        1e-12,
    )


def check_material_domain_guard():
    for lam in (0.4, 3.0):
        try:
            DEFAULT_LIBRARY.get("Si3N4").index(lam)
        except MaterialDomainError:
            continue
        raise AssertionError(f"no domain error at {lam} um")


def check_termless_sellmeier_is_unity():
    vacuum = SellmeierModel(name="unity", terms=())
    if vacuum.index(1.55) != 1.0:
        raise AssertionError("empty Sellmeier sum must give n = 1 exactly")


def check_homogeneous_box_eigenvalue():
    n0 = 1.6
    imap = _uniform_map(n0)
    sol = solve_fundamental_mode(imap)
    k0 = TWO_PI / 1.55
    expected = (k0 * n0) ** 2 - _dirichlet_shift(imap.grid)
    _close(sol.beta**2, expected, 1e-9, "beta^2 ")


def check_eigensolver_determinism():
    xs = CrossSection(core_width_um=1.5, core_height_um=0.65)
    grid = SimGrid.for_box(xs.clad_box_um, 60, 60)
    a = solve_fundamental_mode(build_index_map(xs, 1.55, grid=grid))
    b = solve_fundamental_mode(build_index_map(xs, 1.55, grid=grid))
    if a.n_eff != b.n_eff:
        raise AssertionError(f"repeat solve moved n_eff: {a.n_eff!r} vs {b.n_eff!r}")


def check_guided_mode_bounds():
    xs = CrossSection(core_width_um=1.5, core_height_um=0.65)
    grid = SimGrid.for_box(xs.clad_box_um, 60, 60)
    imap = build_index_map(xs, 1.55, grid=grid)
    sol = solve_fundamental_mode(imap)
    if not sol.guided:
        raise AssertionError("standard core reported unguided")
    if not imap.n_clad < sol.n_eff < imap.n_core:
        raise AssertionError(
            f"n_eff {sol.n_eff} outside ({imap.n_clad}, {imap.n_core})"
        )


def check_field_normalization():
    xs = CrossSection(core_width_um=1.5, core_height_um=0.65)
    grid = SimGrid.for_box(xs.clad_box_um, 60, 60)
    sol = solve_fundamental_mode(build_index_map(xs, 1.55, grid=grid))
    norm = math.sqrt(float(np.sum(sol.field**2)) * grid.dx * grid.dy)
    _close(norm, 1.0, 1e-9, "field L2 norm ")


def check_guess_frequency_value():
    _close(
        guess_frequency(500, 50.0, 2.0),
        238567257961847.11,
        1e-12,
    )


def check_constant_index_fixed_point():
    spec = ResonatorSpec(radius_um=50.0, width_um=1.5, height_um=0.65)
    res = solve_resonance(spec, 400, n_eff_fn=lambda lam: 2.1)
    expected = guess_frequency(400, 50.0, 2.1)
    if res.frequency_hz != expected:
        raise AssertionError(f"{res.frequency_hz!r} != {expected!r}")
    if res.iterations > 2:
        raise AssertionError(f"constant index took {res.iterations} iterations")


def check_dint_anchor_is_zero():
    prof = integrated_dispersion(_quadratic_comb())
    anchor = prof.dint[prof.mu == 0][0]
    if anchor != 0.0:
        raise AssertionError(f"D_int(0) = {anchor!r}, expected exact 0.0")


def check_dint_d1_exact_cancellation():
    prof = integrated_dispersion(_quadratic_comb())
    if prof.d1 != 2.0**39:
        raise AssertionError(f"D1 = {prof.d1!r}, expected 2^39 exactly")


def check_dint_quadratic_exact():
    prof = integrated_dispersion(_quadratic_comb())
    expected = 2.0**20 * prof.mu.astype(float) ** 2
    if not np.array_equal(prof.dint, expected):
        raise AssertionError("quadratic comb D_int is not exactly 2^20 mu^2")


def check_quadratic_fit_recovery():
    prof = integrated_dispersion(_quadratic_comb())
    fit = fit_quadratic(prof, window=(-15, 15))
    _close(fit.q2_hz, 2.0**20 / TWO_PI, 1e-9, "q2 ")


def check_grid_enumeration():
    grid = standard_grid()
    cells = enumerate_grid(grid)
    if len(cells) != 462:
        raise AssertionError(f"standard grid has {len(cells)} cells, expected 462")
    if cells[0] != (30.0, 1.0, 0.5) or cells[-1] != (130.0, 2.0, 0.8):
        raise AssertionError(f"grid corners wrong: {cells[0]}, {cells[-1]}")


def _toy_dataset(n=20):
    records = tuple(
        SampleRecord(
            radius_um=30.0 + i,
            width_um=1.0 + 0.01 * i,
            height_um=0.5 + 0.005 * i,
            features=(float(i), float(i * i), float(3 * i + 1)),
        )
        for i in range(n)
    )
    return Dataset(records=records, feature_config=FeatureConfig(), meta={})


def check_split_partitions_dataset():
    ds = _toy_dataset()
    train, test = split_train_test(ds, ratio=0.75, seed=0)
    if len(train) != 15 or len(test) != 5:
        raise AssertionError(f"split sizes {len(train)}/{len(test)} != 15/5")
    seen = {rec.geometry() for rec in train.records} | {
        rec.geometry() for rec in test.records
    }
    if len(seen) != 20:
        raise AssertionError("split lost or duplicated records")


def check_normalizer_round_trip():
    X = np.random.default_rng(3).uniform(-5, 9, size=(7, 3))
    norm = MinMaxNormalizer.fit(X)
    back = norm.invert(norm.apply(X))
    if not np.allclose(back, X, rtol=1e-12, atol=1e-12):
        raise AssertionError("min-max normalizer round trip drifted")


def check_stump_splits_at_five():
    X = np.array([[1.0], [3.0], [7.0], [9.0]])
    y = np.array([0.0, 0.0, 10.0, 10.0])
    tree = fit_tree(X, y, Hyperparams(max_depth=1))
    root = tree.root
    if root.threshold != 5.0:
        raise AssertionError(f"stump threshold {root.threshold!r} != 5.0")
    left, right = root.left.leaf_value[0], root.right.leaf_value[0]
    if (left, right) != (0.0, 10.0):
        raise AssertionError(f"stump leaves ({left}, {right}) != (0, 10)")


def check_deep_tree_memorizes():
    rng = np.random.default_rng(11)
    X = rng.uniform(0, 1, size=(25, 3))
    y = rng.uniform(-4, 4, size=25)
    tree = fit_tree(X, y, Hyperparams())
    if not np.array_equal(tree.predict(X)[:, 0], y):
        raise AssertionError("unlimited tree failed to reach zero training error")


def check_forest_equals_tree_mean():
    rng = np.random.default_rng(12)
    X = rng.uniform(0, 1, size=(30, 2))
    y = rng.uniform(0, 5, size=30)
    forest = fit_forest(X, y, Hyperparams(n_estimators=8, max_depth=3))
    manual = np.mean([t.predict(X) for t in forest.trees], axis=0)
    if not np.array_equal(forest.predict(X), manual):
        raise AssertionError("forest prediction is not the exact tree mean")


def check_mape_fixture():
    value = mape(np.array([100.0, 200.0]), np.array([110.0, 180.0]))
    _close(value, 10.0, 1e-12, "MAPE ")
    try:
        mape(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    except ValueError:
        return
    raise AssertionError("MAPE accepted a zero actual value")


def check_nmae_fixture():
    value = nmae(np.array([1.0, 2.0, 3.0]), np.array([2.0, 3.0, 2.0]))
    if value != -1.0:
        raise AssertionError(f"NMAE {value!r} != -1.0")


def check_kfold_fold_sizes():
    folds = kfold_indices(346, 4, seed=0)
    sizes = [len(f) for f in folds]
    if sizes != [87, 87, 86, 86]:
        raise AssertionError(f"fold sizes {sizes} != [87, 87, 86, 86]")
    merged = np.sort(np.concatenate(folds))
    if not np.array_equal(merged, np.arange(346)):
        raise AssertionError("folds do not partition the index range")


def check_model_round_trip_bitwise():
    ds = _toy_dataset()
    model = train_geometry_model(
        ds, hp=Hyperparams(n_estimators=3, max_depth=4, seed=5)
    )
    X = ds.features_matrix()
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        save_model(model, path)
        loaded = load_model(path)
    if not np.array_equal(model.predict(X), loaded.predict(X)):
        raise AssertionError("model JSON round trip changed predictions")


def check_export_ingest_identity():
    mu = np.arange(-12, 13)
    prof = DintProfile(
        mu=mu,
        dint=2.0**21 * mu.astype(float) ** 2,
        d1=2.0**39,
        omega0=2.0**50,
    )
    pump_um = float(prof.wavelengths_um()[mu == 0][0])
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "profile.csv")
        export_measured(prof, path)
        back = ingest_measured(path, pump_wavelength_um=pump_um)
    if not np.array_equal(back.mu, prof.mu):
        raise AssertionError("mode offsets changed in the file round trip")
    if not np.allclose(back.dint, prof.dint, rtol=1e-12, atol=1e-9):
        raise AssertionError("D_int changed in the file round trip")
    _close(back.d1, prof.d1, 1e-11, "d1 ")


def check_sensitivity_zero_delta():
    def profile_fn(spec):
        mu = np.arange(-10, 11)
        amp = TWO_PI * 1e9 * spec.radius_um / 50.0
        return DintProfile(
            mu=mu,
            dint=amp * mu.astype(float) ** 2,
            d1=TWO_PI * 4.5e11,
            omega0=TWO_PI * 1.93e14,
        )

    spec = ResonatorSpec(radius_um=50.0, width_um=1.5, height_um=0.65)
    report = sensitivity_analysis(spec, delta=0.0, profile_fn=profile_fn)
    order = [e.parameter for e in report.entries]
    if order != ["radius", "height", "width"]:
        raise AssertionError(f"entry order {order} wrong")
    for entry in report.entries:
        if entry.mape_percent != 0.0:
            raise AssertionError(
                f"delta=0 gave {entry.parameter} MAPE {entry.mape_percent!r}"
            )


CHECKS = [
    ("si3n4_index_at_1550", check_si3n4_index_at_1550),
    ("sio2_index_at_1550", check_sio2_index_at_1550),
    ("material_domain_guard", check_material_domain_guard),
    ("termless_sellmeier_is_unity", check_termless_sellmeier_is_unity),
    ("homogeneous_box_eigenvalue", check_homogeneous_box_eigenvalue),
    ("eigensolver_determinism", check_eigensolver_determinism),
    ("guided_mode_bounds", check_guided_mode_bounds),
    ("field_normalization", check_field_normalization),
    ("guess_frequency_value", check_guess_frequency_value),
    ("constant_index_fixed_point", check_constant_index_fixed_point),
    ("dint_anchor_is_zero", check_dint_anchor_is_zero),
    ("dint_d1_exact_cancellation", check_dint_d1_exact_cancellation),
    ("dint_quadratic_exact", check_dint_quadratic_exact),
    ("quadratic_fit_recovery", check_quadratic_fit_recovery),
    ("grid_enumeration", check_grid_enumeration),
    ("split_partitions_dataset", check_split_partitions_dataset),
    ("normalizer_round_trip", check_normalizer_round_trip),
    ("stump_splits_at_five", check_stump_splits_at_five),
    ("deep_tree_memorizes", check_deep_tree_memorizes),
    ("forest_equals_tree_mean", check_forest_equals_tree_mean),
    ("mape_fixture", check_mape_fixture),
    ("nmae_fixture", check_nmae_fixture),
    ("kfold_fold_sizes", check_kfold_fold_sizes),
    ("model_round_trip_bitwise", check_model_round_trip_bitwise),
    ("export_ingest_identity", check_export_ingest_identity),
    ("sensitivity_zero_delta", check_sensitivity_zero_delta),
]


def run_selfcheck(print_fn=print) -> int:
    """Run every check; print PASS/FAIL lines; return the failure count."""
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
        except Exception as exc:
            failures += 1
            print_fn(f"FAIL {name}: {exc}")
        else:
            print_fn(f"PASS {name}")
    total = len(CHECKS)
    print_fn(f"{total - failures}/{total} checks passed")
    return failures
