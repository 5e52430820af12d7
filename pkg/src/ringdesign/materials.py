"""Wavelength-dependent refractive index models for core and cladding.

Each material is described by a Sellmeier expansion

    n^2(lambda) = A + sum_i B_i * lambda^2 / (lambda^2 - C_i^2),

with lambda in micrometers, B_i dimensionless and C_i a resonance
wavelength in micrometers. The built-in library ships stoichiometric
silicon nitride (two-term fit, valid through the telecom band) and
fused silica (Malitson 1965 three-term fit) for the cladding.

Models refuse to extrapolate: evaluation outside the declared validity
range raises instead of silently crossing a Sellmeier pole.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field


class MaterialDomainError(ValueError):
    """Wavelength outside a model's validity range, or n^2 <= 0."""


@dataclass(frozen=True)
class SellmeierModel:
    """Sellmeier refractive-index model; immutable, safe for concurrent reads."""

    name: str
    terms: tuple[tuple[float, float], ...]  # (B_i, C_i [um]) pairs
    constant_offset: float = 1.0
    valid_range_um: tuple[float, float] = (0.5, 2.5)

    def __post_init__(self):
        lo, hi = self.valid_range_um
        if not lo < hi:
            raise ValueError(f"invalid wavelength range {self.valid_range_um}")
        for b, c in self.terms:
            if c < 0:
                raise ValueError(f"{self.name}: negative resonance wavelength {c}")
            if lo <= c <= hi:
                raise ValueError(
                    f"{self.name}: Sellmeier pole at {c} um lies inside the "
                    f"validity range {self.valid_range_um}"
                )

    def index(self, wavelength_um: float) -> float:
        """Refractive index at the given wavelength (micrometers)."""
        lam = float(wavelength_um)
        lo, hi = self.valid_range_um
        if not lo <= lam <= hi:
            raise MaterialDomainError(
                f"{self.name}: wavelength {lam} um outside validity range "
                f"[{lo}, {hi}] um"
            )
        lam2 = lam * lam
        n2 = self.constant_offset
        for b, c in self.terms:
            n2 += b * lam2 / (lam2 - c * c)
        if not n2 > 0.0 or not math.isfinite(n2):
            raise MaterialDomainError(
                f"{self.name}: n^2 = {n2} is not positive at {lam} um"
            )
        return math.sqrt(n2)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "constant_offset": self.constant_offset,
            "terms": [[b, c] for b, c in self.terms],
            "valid_range_um": list(self.valid_range_um),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SellmeierModel":
        unknown = set(d) - {"name", "constant_offset", "terms", "valid_range_um"}
        if unknown:
            raise ValueError(f"unknown material keys: {sorted(unknown)}")
        return cls(
            name=str(d["name"]),
            terms=tuple((float(b), float(c)) for b, c in d["terms"]),
            constant_offset=float(d.get("constant_offset", 1.0)),
            valid_range_um=tuple(d.get("valid_range_um", (0.5, 2.5))),
        )


def refractive_index(model: SellmeierModel, wavelength_um: float) -> float:
    """Evaluate a Sellmeier model; see SellmeierModel.index."""
    return model.index(wavelength_um)


# Stoichiometric Si3N4, two-term fit (lambda in um):
#   n^2 = 1 + 3.0249 l^2/(l^2 - 0.1353406^2) + 40314 l^2/(l^2 - 1239.842^2)
SI3N4 = SellmeierModel(
    name="Si3N4",
    terms=((3.0249, 0.1353406), (40314.0, 1239.842)),
)

# Fused silica, Malitson 1965 three-term fit (coefficients verbatim).
SIO2 = SellmeierModel(
    name="SiO2",
    terms=(
        (0.6961663, 0.0684043),
        (0.4079426, 0.1162414),
        (0.8974794, 9.896161),
    ),
)


@dataclass(frozen=True)
class MaterialLibrary:
    """Named Sellmeier models; always resolves Si3N4 and SiO2."""

    models: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {"Si3N4": SI3N4, "SiO2": SIO2}
        merged.update(self.models)
        object.__setattr__(self, "models", merged)

    def get(self, name: str) -> SellmeierModel:
        try:
            return self.models[name]
        except KeyError:
            raise KeyError(
                f"unknown material {name!r}; available: {sorted(self.models)}"
            ) from None

    def index(self, name: str, wavelength_um: float) -> float:
        return self.get(name).index(wavelength_um)

    @classmethod
    def from_json(cls, path) -> "MaterialLibrary":
        """Load extra models from a JSON file (one object or a list of objects)."""
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        entries = raw if isinstance(raw, list) else [raw]
        models = {}
        for entry in entries:
            m = SellmeierModel.from_dict(entry)
            models[m.name] = m
        return cls(models=models)


DEFAULT_LIBRARY = MaterialLibrary()
