"""Shared fixtures for the test suite.

The acceptance tests train on a solver-generated dataset that takes
roughly half an hour to build at the default grid resolution. It is
generated once and cached under .cache/ keyed by the exact generation
config, so later runs start instantly. Set RINGDESIGN_FAST_ACCEPT=1 to
swap in a documented 176-sample sub-grid (about 12 minutes cold).
"""

import os
import sys
from pathlib import Path

import pytest

from ringdesign.dataset import (
    FeatureConfig,
    GridSpec,
    config_hash,
    generate_dataset,
    load_dataset,
    save_dataset,
    standard_grid,
)
from ringdesign.resonance import ResonanceSolverConfig

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache"


def acceptance_grid() -> GridSpec:
    """Full design grid, or a thinned one when fast mode is requested.

    The sub-grid keeps every width value (width is the densest axis and
    the one the models resolve best) and thins radius and height to four
    values each: 4 x 11 x 4 = 176 samples, still enough for stable
    train/test splits.
    """
    if os.environ.get("RINGDESIGN_FAST_ACCEPT") == "1":
        full = standard_grid()
        return GridSpec(
            radii_um=(30.0, 50.0, 90.0, 130.0),
            widths_um=full.widths_um,
            heights_um=(0.5, 0.6, 0.7, 0.8),
        )
    return standard_grid()


@pytest.fixture(scope="session")
def acceptance_dataset():
    """Forward-simulated dataset over the acceptance grid, disk-cached."""
    grid = acceptance_grid()
    cfg = ResonanceSolverConfig()
    feat = FeatureConfig()
    cache = CACHE_DIR / f"dataset_{config_hash(grid, cfg, feat)}.csv"
    if cache.exists():
        return load_dataset(cache)

    def progress(idx, total):
        done = idx + 1
        if done % 10 == 0 or done == total:
            print(f"[dataset] {done}/{total} geometries solved",
                  file=sys.stderr, flush=True)

    ds = generate_dataset(grid, cfg, feat, progress=progress)
    CACHE_DIR.mkdir(exist_ok=True)
    save_dataset(ds, cache)
    return ds
