"""Harmonic-phase extraction by Fourier-domain bandpass filtering.

Each tag direction contributes a spectral peak at its wave vector. Keeping a
ball (or raised-cosine shell) around the +k peak and inverting the transform
yields a complex volume whose angle is the wrapped harmonic phase, a
material property that tracks tissue points, and whose modulus is the
harmonic magnitude used downstream as a confidence weight.

Frequencies are mapped in physical units (rad/mm), so anisotropic voxel
spacing is handled correctly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Grid3, ScalarVolume, wrap

__all__ = ["HarpFilterSpec", "PhaseSet", "wrap", "extract_phase", "extract_phase_set",
           "default_filter_specs"]

PROFILES = ("raised_cosine", "hard_sphere")


@dataclass(frozen=True)
class HarpFilterSpec:
    """Bandpass around one tag peak: center and radius in rad/mm.

    ``rolloff`` is the fraction of the radius over which a raised-cosine
    profile decays from 1 to 0; a hard sphere ignores it.
    """

    center: tuple[float, float, float]
    radius: float
    profile: str = "raised_cosine"
    rolloff: float = 0.25

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        if len(center) != 3:
            raise ValueError("filter center must be a 3-vector in rad/mm")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown filter profile {self.profile!r}")
        if not 0.0 <= self.rolloff <= 1.0:
            raise ValueError("rolloff must lie in [0, 1]")
        if not self.radius > 0.0:
            raise ValueError("filter radius must be positive")
        if self.radius >= np.linalg.norm(center):
            raise ValueError("filter overlaps DC")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))


@dataclass(frozen=True)
class PhaseSet:
    """Three wrapped phase volumes plus magnitudes, one per tag direction."""

    phases: tuple[ScalarVolume, ScalarVolume, ScalarVolume]
    magnitudes: tuple[ScalarVolume, ScalarVolume, ScalarVolume]
    filter_specs: tuple[HarpFilterSpec, HarpFilterSpec, HarpFilterSpec]

    def __post_init__(self):
        phases = tuple(self.phases)
        magnitudes = tuple(self.magnitudes)
        specs = tuple(self.filter_specs)
        if len(phases) != 3 or len(magnitudes) != 3 or len(specs) != 3:
            raise ValueError("a PhaseSet holds exactly three tag directions")
        grid = phases[0].grid
        for v in phases + magnitudes:
            if v.grid != grid:
                raise ValueError("all PhaseSet volumes must share one grid")
        for p in phases:
            if p.values.min() < -np.pi or p.values.max() >= np.pi:
                raise ValueError("phase values must be wrapped to [-pi, pi)")
        for m in magnitudes:
            if m.values.min() < 0.0:
                raise ValueError("magnitudes must be nonnegative")
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "magnitudes", magnitudes)
        object.__setattr__(self, "filter_specs", specs)

    @property
    def grid(self) -> Grid3:
        return self.phases[0].grid


def _frequency_offsets(grid: Grid3, center) -> np.ndarray:
    """Squared distance (rad/mm)^2 of every DFT bin from the filter center."""
    d2 = np.zeros(grid.dims)
    for axis in range(3):
        w = 2.0 * np.pi * np.fft.fftfreq(grid.dims[axis], d=grid.spacing[axis])
        shape = [1, 1, 1]
        shape[axis] = grid.dims[axis]
        d2 = d2 + ((w - center[axis]) ** 2).reshape(shape)
    return d2


def _filter_weights(grid: Grid3, spec: HarpFilterSpec) -> np.ndarray:
    r = np.sqrt(_frequency_offsets(grid, spec.center))
    if spec.profile == "hard_sphere":
        return (r <= spec.radius).astype(np.float64)
    flat = spec.radius * (1.0 - spec.rolloff)
    weights = np.zeros(grid.dims)
    weights[r <= flat] = 1.0
    if spec.rolloff > 0.0:
        band = (r > flat) & (r <= spec.radius)
        weights[band] = 0.5 * (1.0 + np.cos(np.pi * (r[band] - flat) / (spec.radius * spec.rolloff)))
    return weights


def extract_phase(image: ScalarVolume, spec: HarpFilterSpec):
    """Bandpass the image around +center; returns (phase, magnitude).

    The phase is wrap(angle) of the filtered complex volume, in [-pi, pi);
    the magnitude is its modulus.
    """
    if spec.radius >= np.linalg.norm(spec.center):
        raise ValueError("filter overlaps DC")
    spectrum = np.fft.fftn(image.values)
    spectrum *= _filter_weights(image.grid, spec)
    analytic = np.fft.ifftn(spectrum)
    phase = wrap(np.arctan2(analytic.imag, analytic.real))
    magnitude = np.abs(analytic)
    return ScalarVolume(image.grid, phase), ScalarVolume(image.grid, magnitude)


def extract_phase_set(image: ScalarVolume, specs) -> PhaseSet:
    """Extract all three tag directions and package them."""
    specs = tuple(specs)
    if len(specs) != 3:
        raise ValueError("need exactly three filter specs")
    phases = []
    magnitudes = []
    for spec in specs:
        p, m = extract_phase(image, spec)
        phases.append(p)
        magnitudes.append(m)
    return PhaseSet(tuple(phases), tuple(magnitudes), specs)


def default_filter_specs(
    pattern,
    radius_fraction: float = 0.4,
    profile: str = "raised_cosine",
    rolloff: float = 0.25,
) -> tuple[HarpFilterSpec, HarpFilterSpec, HarpFilterSpec]:
    """One spec per tag direction, radius as a fraction of |k|."""
    specs = []
    for k in pattern.wave_vectors:
        specs.append(
            HarpFilterSpec(tuple(k), radius_fraction * float(np.linalg.norm(k)), profile, rolloff)
        )
    return tuple(specs)
