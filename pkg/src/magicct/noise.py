"""Low-dose measurement simulation: Poisson photon counts plus electronic noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

__all__ = ["DoseModel", "DOSE_PRESETS", "NORMAL_DOSE_PHOTONS", "ELECTRONIC_VARIANCE", "simulate_lowdose"]

NORMAL_DOSE_PHOTONS = 1e6
ELECTRONIC_VARIANCE = 10.0
MIN_COUNT = 1.0

DOSE_PRESETS = {
    "100%": NORMAL_DOSE_PHOTONS,
    "10%": 1e5,
    "5%": 5e4,
    "2.5%": 2.5e4,
}


@dataclass(frozen=True)
class DoseModel:
    incident_photons: float
    electronic_variance: float = ELECTRONIC_VARIANCE
    seed: int = 0

    def __post_init__(self):
        if not self.incident_photons > 0:
            raise ConfigError(f"incident_photons must be > 0 (got {self.incident_photons})")
        if not self.electronic_variance >= 0:
            raise ConfigError(f"electronic_variance must be >= 0 (got {self.electronic_variance})")

    @classmethod
    def preset(cls, name: str, seed: int = 0, electronic_variance: float = ELECTRONIC_VARIANCE):
        """Dose tier by name: ``"10%"``, ``"5%"``, ``"2.5%"`` or ``"100%"``."""
        try:
            photons = DOSE_PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown dose preset {name!r}; known: {sorted(DOSE_PRESETS)}") from None
        return cls(photons, electronic_variance, seed)


def simulate_lowdose(clean, model: DoseModel, rng: np.random.Generator | None = None) -> np.ndarray:
    """Turn noise-free line integrals into a noisy low-dose sinogram.

    ``y = ln(I0 / max(1, Poisson(I0 exp(-clean)) + Normal(0, var_e)))``.
    Counts that the electronic noise pushes to or below zero are clamped to
    one photon so the log stays finite.

    ``rng`` overrides the generator seeded from ``model.seed``; pass one
    when drawing several sinograms from a single stream.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if not np.all(np.isfinite(clean)):
        raise InputError("clean sinogram contains non-finite values")
    if np.any(clean < 0):
        raise InputError("clean sinogram has negative line integrals")
    if rng is None:
        rng = np.random.default_rng(model.seed)
    i0 = model.incident_photons
    counts = rng.poisson(i0 * np.exp(-clean)).astype(np.float64)
    if model.electronic_variance > 0:
        counts += rng.normal(0.0, np.sqrt(model.electronic_variance), size=clean.shape)
    counts = np.maximum(counts, MIN_COUNT)
    return np.log(i0 / counts)
