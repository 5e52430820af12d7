"""Grid enumeration, dataset generation, splits, and normalization tests."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ringdesign.dataset import (
    Dataset,
    FeatureConfig,
    GridSpec,
    MinMaxNormalizer,
    SampleRecord,
    TooManyRejectsError,
    enumerate_grid,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_train_test,
    standard_grid,
)
from ringdesign.resonance import ResonanceSolverConfig


def test_standard_grid_axes_and_count():
    grid = standard_grid()
    assert grid.radii_um == (30.0, 50.0, 70.0, 90.0, 110.0, 130.0)
    assert grid.widths_um == (1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0)
    assert grid.heights_um == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8)
    geoms = enumerate_grid(grid)
    assert len(geoms) == 462
    assert grid.size() == 462
    assert len(set(geoms)) == 462


def test_enumeration_order_radius_outer_height_inner():
    grid = GridSpec(radii_um=(30.0, 50.0), widths_um=(1.0, 1.5),
                    heights_um=(0.5, 0.8))
    assert enumerate_grid(grid) == [
        (30.0, 1.0, 0.5),
        (30.0, 1.0, 0.8),
        (30.0, 1.5, 0.5),
        (30.0, 1.5, 0.8),
        (50.0, 1.0, 0.5),
        (50.0, 1.0, 0.8),
        (50.0, 1.5, 0.5),
        (50.0, 1.5, 0.8),
    ]


def test_single_point_grid():
    grid = GridSpec(radii_um=(50.0,), widths_um=(1.5,), heights_um=(0.65,))
    assert enumerate_grid(grid) == [(50.0, 1.5, 0.65)]


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(radii_um=(), widths_um=(1.0,), heights_um=(0.5,))
    with pytest.raises(ValueError):
        GridSpec(radii_um=(50.0, 30.0), widths_um=(1.0,), heights_um=(0.5,))
    with pytest.raises(ValueError):
        GridSpec(radii_um=(-30.0,), widths_um=(1.0,), heights_um=(0.5,))


def fake_solver(geometry):
    """Deterministic stand-in features derived from the geometry itself."""
    r, w, h = geometry
    return (r * 1e5, w * 1e6, h * 1e7)


def toy_grid() -> GridSpec:
    return GridSpec(radii_um=(30.0, 50.0), widths_um=(1.0, 1.5),
                    heights_um=(0.5, 0.8))


def test_generate_dataset_with_injected_solver():
    ds = generate_dataset(toy_grid(), band_solver=fake_solver)
    assert len(ds) == 8
    assert ds.meta["rejects"] == []
    assert ds.records[0].features == (30.0 * 1e5, 1.0 * 1e6, 0.5 * 1e7)
    assert ds.features_matrix().shape == (8, 3)
    assert ds.targets_matrix().shape == (8, 3)


def test_generate_dataset_itemizes_rejects():
    def flaky(geometry):
        if geometry[0] == 30.0 and geometry[1] == 1.0:
            raise RuntimeError("does not guide")
        return fake_solver(geometry)

    grid = GridSpec(
        radii_um=(30.0, 50.0),
        widths_um=(1.0, 1.2, 1.4, 1.6, 1.8),
        heights_um=(0.5, 0.6, 0.7, 0.8),
    )  # 40 geometries, 4 failures = exactly 10%
    ds = generate_dataset(grid, band_solver=flaky)
    assert len(ds) == 36
    assert len(ds.meta["rejects"]) == 4
    assert all("does not guide" in rej["reason"] for rej in ds.meta["rejects"])


def test_generate_dataset_aborts_on_excess_rejects():
    def broken(geometry):
        if geometry[0] == 30.0:
            raise RuntimeError("no mode")
        return fake_solver(geometry)

    with pytest.raises(TooManyRejectsError):
        generate_dataset(toy_grid(), band_solver=broken)  # half the grid fails


def test_generate_dataset_real_solver_small_grid():
    # End-to-end through the forward pipeline at a coarse resolution.
    grid = GridSpec(radii_um=(50.0,), widths_um=(1.5,), heights_um=(0.65,))
    cfg = ResonanceSolverConfig(
        grid_points=(100, 100), band_um=(1.45, 1.67), n_samples=9
    )
    ds = generate_dataset(grid, cfg=cfg)
    assert len(ds) == 1
    assert all(math.isfinite(v) for v in ds.records[0].features)
    assert ds.meta["config_hash"]


def synthetic_dataset(n: int = 24, include_d1: bool = False) -> Dataset:
    feat = FeatureConfig(include_d1=include_d1)
    width = len(feat.names())
    records = []
    for i in range(n):
        records.append(
            SampleRecord(
                radius_um=30.0 + i,
                width_um=1.0 + 0.01 * i,
                height_um=0.5 + 0.001 * i,
                features=tuple(
                    1e6 * (i + 1) * (j + 1) * (-1.0) ** j for j in range(width)
                ),
            )
        )
    return Dataset(records=tuple(records), feature_config=feat,
                   meta={"note": "synthetic"})


def test_split_sizes_and_partition():
    ds = synthetic_dataset(462)
    train, test = split_train_test(ds, ratio=0.75, seed=7)
    assert len(train) == 346 and len(test) == 116
    all_geoms = {rec.geometry() for rec in ds.records}
    got = {rec.geometry() for rec in train.records} | {
        rec.geometry() for rec in test.records
    }
    assert got == all_geoms
    assert not (
        {rec.geometry() for rec in train.records}
        & {rec.geometry() for rec in test.records}
    )


def test_split_reproducible_and_seed_sensitive():
    ds = synthetic_dataset(40)
    a1, b1 = split_train_test(ds, seed=3)
    a2, b2 = split_train_test(ds, seed=3)
    assert [r.geometry() for r in a1.records] == [r.geometry() for r in a2.records]
    a3, _ = split_train_test(ds, seed=4)
    assert [r.geometry() for r in a1.records] != [r.geometry() for r in a3.records]


def test_split_small_dataset_and_errors():
    ds = synthetic_dataset(4)
    train, test = split_train_test(ds, ratio=0.75, seed=0)
    assert len(train) == 3 and len(test) == 1
    with pytest.raises(ValueError):
        split_train_test(synthetic_dataset(3), ratio=0.75)
    with pytest.raises(ValueError):
        split_train_test(ds, ratio=1.5)


def test_normalizer_endpoints_and_inverse():
    X = np.array([[1.0, 10.0], [3.0, 30.0], [2.0, 50.0]])
    nz = MinMaxNormalizer.fit(X)
    Z = nz.apply(X)
    assert Z[:, 0].min() == 0.0 and Z[:, 0].max() == 1.0
    assert Z[:, 1].min() == 0.0 and Z[:, 1].max() == 1.0
    back = nz.invert(Z)
    np.testing.assert_allclose(back, X, atol=1e-12)


def test_normalizer_constant_column_guard():
    X = np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]])
    nz = MinMaxNormalizer.fit(X)
    Z = nz.apply(X)
    assert np.all(Z[:, 0] == 0.0)
    back = nz.invert(Z)
    np.testing.assert_allclose(back[:, 0], 5.0)


@given(
    st.integers(min_value=2, max_value=12),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=0, max_value=2**32 - 1),
)
@settings(max_examples=60, deadline=None)
def test_normalizer_round_trip_property(n_rows, n_cols, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(scale=10.0, size=(n_rows, n_cols))
    nz = MinMaxNormalizer.fit(X)
    Z = nz.apply(X)
    assert Z.min() >= -1e-12 and Z.max() <= 1.0 + 1e-12
    np.testing.assert_allclose(nz.invert(Z), X, atol=1e-9)


def test_dataset_rejects_duplicates_and_bad_features():
    rec = SampleRecord(radius_um=30.0, width_um=1.0, height_um=0.5,
                       features=(1.0, 2.0, 3.0))
    with pytest.raises(ValueError):
        Dataset(records=(rec, rec), feature_config=FeatureConfig())
    with pytest.raises(ValueError):
        Dataset(
            records=(
                SampleRecord(30.0, 1.0, 0.5, (1.0, float("nan"), 3.0)),
            ),
            feature_config=FeatureConfig(),
        )
    with pytest.raises(ValueError):
        Dataset(
            records=(SampleRecord(30.0, 1.0, 0.5, (1.0, 2.0)),),
            feature_config=FeatureConfig(),
        )


def test_csv_round_trip_is_canonical(tmp_path):
    ds = generate_dataset(toy_grid(), band_solver=fake_solver)
    p1 = tmp_path / "ds.csv"
    save_dataset(ds, p1)
    loaded = load_dataset(p1)
    assert len(loaded) == len(ds)
    assert loaded.feature_config == ds.feature_config
    p2 = tmp_path / "ds2.csv"
    save_dataset(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "ds.meta.json").read_bytes() == (
        tmp_path / "ds2.meta.json"
    ).read_bytes()


def test_csv_header_with_optional_fsr_column(tmp_path):
    def solver4(geometry):
        return fake_solver(geometry) + (4.5e11,)

    ds = generate_dataset(
        toy_grid(), feat=FeatureConfig(include_d1=True), band_solver=solver4
    )
    path = tmp_path / "ds.csv"
    save_dataset(ds, path)
    header = path.read_text().splitlines()[0]
    assert header == "radius_um,width_um,height_um,q0_hz,q1_hz,q2_hz,d1_hz"
    loaded = load_dataset(path)
    assert loaded.feature_config.include_d1
    assert loaded.records[0].features[-1] == pytest.approx(4.5e11)


def test_generation_deterministic_bytes(tmp_path):
    for name in ("a.csv", "b.csv"):
        ds = generate_dataset(toy_grid(), band_solver=fake_solver)
        save_dataset(ds, tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
