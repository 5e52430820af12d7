"""Dispersion model tests against independently computed index values.

Reference values were evaluated with 50-digit arithmetic from the
published Sellmeier coefficients and rounded to double precision.
"""

from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from ringdesign.materials import (
    DEFAULT_LIBRARY,
    MaterialDomainError,
    MaterialLibrary,
    SellmeierModel,
    SI3N4,
    SIO2,
    refractive_index,
)

# 50-digit evaluations of the two built-in models, rounded to double.
N_SIN_155 = 1.9962797317138814
N_SIN_100 = 2.0137317805757636
N_SIO2_155 = 1.4440236217032609
N_SIO2_100 = 1.4504174094068749


def test_si3n4_frozen_values():
    assert SI3N4.index(1.55) == pytest.approx(N_SIN_155, rel=1e-14)
    assert SI3N4.index(1.00) == pytest.approx(N_SIN_100, rel=1e-14)


def test_sio2_frozen_values():
    assert SIO2.index(1.55) == pytest.approx(N_SIO2_155, rel=1e-14)
    assert SIO2.index(1.00) == pytest.approx(N_SIO2_100, rel=1e-14)


def test_core_exceeds_cladding_index_across_band():
    for lam in (0.6, 1.0, 1.55, 2.0, 2.4):
        assert SI3N4.index(lam) > SIO2.index(lam)


def test_vacuum_identity():
    # No resonance terms: n(lambda) = sqrt(1) exactly, any wavelength in range.
    vac = SellmeierModel(name="vacuum", terms=())
    for lam in (0.5, 1.0, 1.55, 2.5):
        assert vac.index(lam) == 1.0


def test_normal_dispersion_monotone_decreasing():
    # Both built-ins have dn/dlambda < 0 over the 1-2 um transparency band.
    lams = [1.0 + i * (1.0 / 99.0) for i in range(100)]
    for model in (SI3N4, SIO2):
        vals = [model.index(l) for l in lams]
        assert all(a > b for a, b in zip(vals, vals[1:]))


def test_continuity_small_wavelength_step():
    delta = 1e-6
    for model in (SI3N4, SIO2):
        for lam in (0.9, 1.3, 1.55, 1.9):
            jump = abs(model.index(lam + delta) - model.index(lam))
            assert jump < 1e-5


@given(lam=st.floats(min_value=0.5, max_value=2.5, allow_nan=False))
@settings(max_examples=200, deadline=None)
def test_index_physical_in_valid_range(lam):
    for model in (SI3N4, SIO2):
        n = model.index(lam)
        assert 1.0 < n < 3.0
        assert math.isfinite(n)


def test_out_of_range_raises():
    for lam in (0.4999, 2.5001, 10.0):
        with pytest.raises(MaterialDomainError):
            SI3N4.index(lam)
    with pytest.raises(MaterialDomainError):
        SIO2.index(0.1)


def test_nonpositive_wavelength_raises():
    for lam in (0.0, -1.55):
        with pytest.raises(MaterialDomainError):
            SI3N4.index(lam)


def test_pole_inside_band_rejected_at_construction():
    # A resonance wavelength inside the validity window would make the
    # model singular there, so construction must fail fast.
    with pytest.raises(ValueError):
        SellmeierModel(name="bad", terms=((1.0, 1.55),), valid_range_um=(0.5, 2.5))


def test_invalid_range_rejected():
    with pytest.raises(ValueError):
        SellmeierModel(name="bad", terms=(), valid_range_um=(2.0, 1.0))


def test_dict_round_trip():
    d = SI3N4.to_dict()
    clone = SellmeierModel.from_dict(d)
    assert clone == SI3N4
    assert clone.index(1.55) == SI3N4.index(1.55)


def test_from_dict_rejects_unknown_keys():
    d = SI3N4.to_dict()
    d["extra"] = 1
    with pytest.raises(ValueError):
        SellmeierModel.from_dict(d)


def test_library_lookup_and_free_function():
    lib = DEFAULT_LIBRARY
    assert lib.index("Si3N4", 1.55) == SI3N4.index(1.55)
    assert lib.index("SiO2", 1.55) == SIO2.index(1.55)
    assert refractive_index(SI3N4, 1.55) == SI3N4.index(1.55)
    with pytest.raises(KeyError):
        lib.get("unobtainium")


def test_library_from_json_adds_and_overrides(tmp_path):
    custom = {
        "name": "glassX",
        "terms": [[1.0, 0.1]],
        "constant_offset": 1.0,
        "valid_range_um": [0.5, 2.5],
    }
    path = tmp_path / "mats.json"
    path.write_text(json.dumps([custom]))
    lib = MaterialLibrary.from_json(path)
    # custom material present, built-ins still available
    n = lib.index("glassX", 1.55)
    assert n == pytest.approx(math.sqrt(1.0 + 1.0 * 1.55**2 / (1.55**2 - 0.1**2)))
    assert lib.index("Si3N4", 1.55) == SI3N4.index(1.55)
