"""Synthetic tagged-image sequences with closed-form ground-truth motion.

The motion model is a composition of sinusoidal shear steps. Each step moves
one axis by an amount that depends only on a *different* axis, so its
Jacobian determinant is exactly 1 and its inverse is exact subtraction. The
composition inherits both properties, which gives machine-precision motion
oracles without numerical ODE integration.

Default shear wavelengths equal the grid extent along the driving axis, so
the rendered frames are periodic on the lattice and their spectra are free
of leakage.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import Grid3, ScalarVolume, VectorVolume, wrap

__all__ = [
    "ShearStep",
    "MotionModel",
    "TagPattern",
    "analytic_forward",
    "analytic_inverse",
    "render_tagged_frame",
    "ground_truth_displacement",
    "forward_displacement",
    "make_default_sequence",
    "default_grid",
    "default_tag_pattern",
    "default_motion_model",
    "default_schedule",
    "jump_onset_frame",
    "write_model_cfg",
    "read_model_cfg",
]

_AXES = {"x": 0, "y": 1, "z": 2}

DEFAULT_DIMS = (64, 64, 24)
DEFAULT_SPACING_MM = (1.875, 1.875, 6.0)
DEFAULT_FRAMES = 26
DEFAULT_TAG_PERIOD_MM = 12.0
# Through-plane tags cannot reuse the in-plane period: at 6 mm slices a
# 12 mm period sits exactly at the z Nyquist frequency (the +k and -k
# spectral peaks coincide), and even a 24 mm period leaves the wrapped
# central difference spanning exactly half a period (sign-ambiguous).
# Three times the in-plane period gives both operations safe margin.
DEFAULT_TAG_PERIOD_Z_MM = 36.0


@dataclass(frozen=True)
class ShearStep:
    """One sinusoidal shear: axis_moved += amplitude*sin(2*pi*q/wavelength + phase_offset).

    ``q`` is the coordinate along ``axis_driving``, which the step leaves
    untouched, so the step is exactly volume-preserving and inverted by
    subtracting the same term.
    """

    axis_moved: str
    axis_driving: str
    amplitude_mm: float
    wavelength_mm: float
    phase_offset_rad: float = 0.0

    def __post_init__(self):
        if self.axis_moved not in _AXES or self.axis_driving not in _AXES:
            raise ValueError("axes must be one of 'x', 'y', 'z'")
        if self.axis_moved == self.axis_driving:
            raise ValueError("axis_moved must differ from axis_driving")
        if self.wavelength_mm <= 0:
            raise ValueError("wavelength_mm must be positive")
        for name in ("amplitude_mm", "wavelength_mm", "phase_offset_rad"):
            object.__setattr__(self, name, float(getattr(self, name)))


@dataclass(frozen=True)
class MotionModel:
    """Ordered shear steps plus a per-frame amplitude schedule in [0, 1]."""

    steps: tuple[ShearStep, ...]
    schedule: tuple[float, ...]

    def __post_init__(self):
        steps = tuple(self.steps)
        schedule = tuple(float(a) for a in self.schedule)
        if not steps:
            raise ValueError("motion model needs at least one shear step")
        if len(schedule) < 2:
            raise ValueError("schedule needs at least two frames")
        if schedule[0] != 0.0:
            raise ValueError("schedule must start at 0 (frame 1 is the reference)")
        if any(a < 0.0 or a > 1.0 for a in schedule):
            raise ValueError("schedule values must lie in [0, 1]")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "schedule", schedule)

    @property
    def n_frames(self) -> int:
        return len(self.schedule)

    def amplitude_along(self, axis: int) -> float:
        """Largest single-step amplitude that moves the given axis."""
        amps = [abs(s.amplitude_mm) for s in self.steps if _AXES[s.axis_moved] == axis]
        return max(amps, default=0.0)


@dataclass(frozen=True)
class TagPattern:
    """Three tag wave vectors in rad/mm, mutually linearly independent."""

    wave_vectors: np.ndarray  # shape (3, 3)

    def __post_init__(self):
        wv = np.asarray(self.wave_vectors, dtype=np.float64)
        if wv.shape != (3, 3):
            raise ValueError("wave_vectors must have shape (3, 3)")
        if abs(np.linalg.det(wv)) < 1e-12:
            raise ValueError("tag wave vectors must be linearly independent")
        wv = np.ascontiguousarray(wv)
        wv.setflags(write=False)
        object.__setattr__(self, "wave_vectors", wv)

    def half_period_mm(self, direction: int) -> float:
        """Displacement along k_d that moves the phase by pi."""
        return np.pi / float(np.linalg.norm(self.wave_vectors[direction]))


def _check_frame(model: MotionModel, n: int) -> float:
    if not 1 <= n <= model.n_frames:
        raise ValueError(f"frame out of range: {n} not in [1, {model.n_frames}]")
    return model.schedule[n - 1]


def analytic_forward(model: MotionModel, n: int, points) -> np.ndarray:
    """Map reference positions to their frame-n positions, exactly."""
    a = _check_frame(model, n)
    out = np.array(points, dtype=np.float64, copy=True)
    for step in model.steps:
        q = out[..., _AXES[step.axis_driving]]
        shift = (a * step.amplitude_mm) * np.sin(
            (2.0 * np.pi / step.wavelength_mm) * q + step.phase_offset_rad
        )
        out[..., _AXES[step.axis_moved]] += shift
    return out


def analytic_inverse(model: MotionModel, n: int, points) -> np.ndarray:
    """Exact inverse of analytic_forward: reversed steps, negated."""
    a = _check_frame(model, n)
    out = np.array(points, dtype=np.float64, copy=True)
    for step in reversed(model.steps):
        q = out[..., _AXES[step.axis_driving]]
        shift = (a * step.amplitude_mm) * np.sin(
            (2.0 * np.pi / step.wavelength_mm) * q + step.phase_offset_rad
        )
        out[..., _AXES[step.axis_moved]] -= shift
    return out


def render_tagged_frame(
    model: MotionModel,
    pattern: TagPattern,
    grid: Grid3,
    n: int,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> ScalarVolume:
    """Frame-n tag image: mean over directions of cos(k_d . X(x)).

    ``X(x)`` is the material (reference) position of the point observed at
    ``x``, i.e. the analytic inverse map. Optional additive Gaussian noise
    is drawn from ``rng``.
    """
    material = analytic_inverse(model, n, grid.world_points())
    values = np.zeros(grid.dims)
    for k in pattern.wave_vectors:
        values += np.cos(material @ k)
    values /= len(pattern.wave_vectors)
    if noise_sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        values = values + rng.normal(0.0, noise_sigma, size=values.shape)
    return ScalarVolume(grid, values)


def render_tag_phase(pattern: TagPattern, grid: Grid3, direction: int) -> ScalarVolume:
    """Wrapped reference phase wrap(k_d . x) of one tag direction."""
    pts = grid.world_points()
    return ScalarVolume(grid, wrap(pts @ pattern.wave_vectors[direction]))


def ground_truth_displacement(model: MotionModel, grid: Grid3, n: int) -> VectorVolume:
    """The displacement field a frame-1 -> frame-n registration estimates.

    Pull-back convention: u(x) = inverse(x) - x, so that
    ``warp_scalar(frame_1, u)`` reproduces the frame-n image; x + u(x) is the
    reference position of the material point observed at x in frame n.
    """
    pts = grid.world_points()
    return VectorVolume(grid, analytic_inverse(model, n, pts) - pts, kind="displacement")


def forward_displacement(model: MotionModel, grid: Grid3, n: int) -> VectorVolume:
    """Forward-map displacement forward(x) - x; warps frame n back onto frame 1."""
    pts = grid.world_points()
    return VectorVolume(grid, analytic_forward(model, n, pts) - pts, kind="displacement")


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def default_schedule(n_frames: int) -> tuple[float, ...]:
    """Three-stage smoothstep amplitude ramp crossing the jump threshold fast.

    A gentle stage reaches 75% of peak about a third into the sequence, a
    steep stage carries the motion from safely below half a tag period to
    well beyond it within ~3 frames (a smooth crossing that lingers near the
    threshold gets rescued by regularization instead of jumping), and a slow
    final stage keeps the motion strictly growing to the full peak at the
    last frame. Stage boundaries are C1 (smoothstep ends are flat) and scale
    with the sequence length; proportions follow the 26-frame default.
    """
    if n_frames < 2:
        raise ValueError("need at least two frames")
    u = np.arange(n_frames, dtype=np.float64) * (25.0 / (n_frames - 1.0))
    a = (
        0.75 * _smoothstep(u / 8.0)
        + 0.23 * _smoothstep((u - 8.0) / 3.0)
        + 0.02 * _smoothstep((u - 11.0) / 14.0)
    )
    a[0] = 0.0
    a[-1] = 1.0
    return tuple(a)


def default_grid() -> Grid3:
    return Grid3(DEFAULT_DIMS, DEFAULT_SPACING_MM)


def default_tag_pattern(
    period_mm: float = DEFAULT_TAG_PERIOD_MM,
    period_z_mm: float = DEFAULT_TAG_PERIOD_Z_MM,
) -> TagPattern:
    k_xy = 2.0 * np.pi / period_mm
    k_z = 2.0 * np.pi / period_z_mm
    return TagPattern(np.diag([k_xy, k_xy, k_z]))


def default_motion_model(
    grid: Grid3,
    n_frames: int = DEFAULT_FRAMES,
    peak_displacement_mm: float | None = None,
    tag_period_mm: float = DEFAULT_TAG_PERIOD_MM,
) -> MotionModel:
    """Three chained shears, dominant along x, wavelengths = grid extent.

    The default peak displacement is 1.2 half tag periods, so the dominant
    direction provably crosses the phase-ambiguity threshold while the
    secondary amplitudes stay well below it.
    """
    if peak_displacement_mm is None:
        peak_displacement_mm = 1.2 * (tag_period_mm / 2.0)
    ext = grid.extent_mm
    steps = (
        ShearStep("x", "y", peak_displacement_mm, ext[1], 0.9),
        ShearStep("y", "z", peak_displacement_mm / 3.0, ext[2], 2.1),
        ShearStep("z", "x", peak_displacement_mm / 4.0, ext[0], 4.4),
    )
    return MotionModel(steps, default_schedule(n_frames))


def jump_onset_frame(model: MotionModel, pattern: TagPattern) -> int | None:
    """First frame whose peak displacement along some tag direction exceeds
    half a tag period (the phase-ambiguity threshold). None if never.

    Assumes axis-aligned shear steps, where the peak displacement along an
    axis at frame n is schedule[n-1] * amplitude of the step moving it.
    """
    k = pattern.wave_vectors
    onset = None
    for d in range(3):
        axis = int(np.argmax(np.abs(k[d])))
        amp = model.amplitude_along(axis)
        if amp == 0.0:
            continue
        threshold = pattern.half_period_mm(d)
        for n in range(2, model.n_frames + 1):
            if model.schedule[n - 1] * amp > threshold:
                onset = n if onset is None else min(onset, n)
                break
    return onset


def make_default_sequence(
    seed: int,
    grid: Grid3 | None = None,
    n_frames: int = DEFAULT_FRAMES,
    tag_period_mm: float = DEFAULT_TAG_PERIOD_MM,
    tag_period_z_mm: float = DEFAULT_TAG_PERIOD_Z_MM,
    peak_displacement_mm: float | None = None,
    noise_sigma: float = 0.0,
) -> tuple[list[ScalarVolume], MotionModel, TagPattern]:
    """Render the default phantom sequence; deterministic for a given seed."""
    if grid is None:
        grid = default_grid()
    pattern = default_tag_pattern(tag_period_mm, tag_period_z_mm)
    model = default_motion_model(grid, n_frames, peak_displacement_mm, tag_period_mm)
    seeds = np.random.SeedSequence(seed).spawn(n_frames)
    frames = [
        render_tagged_frame(model, pattern, grid, n, noise_sigma, np.random.default_rng(seeds[n - 1]))
        for n in range(1, n_frames + 1)
    ]
    return frames, model, pattern


def write_model_cfg(
    path,
    model: MotionModel,
    pattern: TagPattern,
    grid: Grid3,
    seed: int,
    noise_sigma: float = 0.0,
) -> None:
    """Persist everything needed to regenerate the sequence bit-exactly."""
    lines = [
        "format=tagflow-model-v1",
        f"grid.dims={grid.dims[0]},{grid.dims[1]},{grid.dims[2]}",
        "grid.spacing_mm=" + ",".join(repr(s) for s in grid.spacing),
        "grid.origin_mm=" + ",".join(repr(o) for o in grid.origin),
        f"frames={model.n_frames}",
        f"seed={seed}",
        f"noise_sigma={noise_sigma!r}",
        "schedule=" + ",".join(repr(a) for a in model.schedule),
        f"steps={len(model.steps)}",
    ]
    for i, s in enumerate(model.steps, start=1):
        lines.append(
            f"step{i}={s.axis_moved},{s.axis_driving},{s.amplitude_mm!r},"
            f"{s.wavelength_mm!r},{s.phase_offset_rad!r}"
        )
    for d in range(3):
        lines.append(f"tag.k{d + 1}=" + ",".join(repr(float(v)) for v in pattern.wave_vectors[d]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_model_cfg(path):
    """Load a model.cfg; returns (model, pattern, grid, seed, noise_sigma)."""
    entries: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    if entries.get("format") != "tagflow-model-v1":
        raise ValueError(f"{path}: unknown model.cfg format")
    dims = tuple(int(v) for v in entries["grid.dims"].split(","))
    spacing = tuple(float(v) for v in entries["grid.spacing_mm"].split(","))
    origin = tuple(float(v) for v in entries["grid.origin_mm"].split(","))
    grid = Grid3(dims, spacing, origin)
    schedule = tuple(float(v) for v in entries["schedule"].split(","))
    steps = []
    for i in range(1, int(entries["steps"]) + 1):
        moved, driving, amp, wav, off = entries[f"step{i}"].split(",")
        steps.append(ShearStep(moved, driving, float(amp), float(wav), float(off)))
    model = MotionModel(tuple(steps), schedule)
    wv = np.array([[float(v) for v in entries[f"tag.k{d + 1}"].split(",")] for d in range(3)])
    pattern = TagPattern(wv)
    return model, pattern, grid, int(entries["seed"]), float(entries["noise_sigma"])
