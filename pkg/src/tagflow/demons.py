"""Log-domain demons registration over three wrapped-phase channels.

The engine iterates a stationary velocity field: exponentiate by scaling and
squaring, compute a symmetric demons force from the wrapped phase
differences (gated per direction by harmonic magnitude), smooth the update
(fluid) and the velocity (diffusion), and optionally project the velocity
onto the divergence-free subspace so the flow is volume-preserving. The
velocity may start from a caller-supplied field instead of zero; everything
else is unchanged, which is what makes warm starts across large motions
possible.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np

from .harp import PhaseSet
from .volume import (
    Grid3,
    GridMismatchError,
    TrilinearSampler,
    VectorVolume,
    _compose_arrays,
    _smooth_array,
    _wrapped_gradient_array,
    wrap,
)

__all__ = [
    "RegistrationParams",
    "RegistrationResult",
    "NumericalDivergenceError",
    "register",
    "demons_update",
    "exp_velocity",
    "project_divergence_free",
]

log = logging.getLogger("tagflow.demons")

TAPER_WIDTH_VOXELS = 3


class NumericalDivergenceError(RuntimeError):
    """A field stopped being finite during iteration."""


@dataclass(frozen=True)
class RegistrationParams:
    """Tunables for one registration run.

    ``magnitude_threshold`` gates the force per direction: voxels whose
    moving/fixed harmonic magnitudes fall below it contribute no force and
    inherit motion purely through regularization. ``None`` means 10% of the
    median magnitude, computed per direction at the start of the run.
    """

    sigma_fluid_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    sigma_diffusion_mm: tuple[float, float, float] = (2.0, 2.0, 6.0)
    sigma_i: float = 1.0
    max_iters: int = 200
    step_max_voxels: float = 0.4
    incompressible: bool = True
    magnitude_threshold: float | None = None
    stop_tol: float = 1e-3
    # Damp the velocity toward zero over 3 boundary voxels before the
    # spectral projection. Needed for data that is not periodic on the
    # grid; on periodic-compatible fields (the phantom) it only distorts
    # the interior solution, so it is off by default.
    boundary_taper: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sigma_fluid_mm", tuple(float(s) for s in self.sigma_fluid_mm))
        object.__setattr__(
            self, "sigma_diffusion_mm", tuple(float(s) for s in self.sigma_diffusion_mm)
        )
        if len(self.sigma_fluid_mm) != 3 or len(self.sigma_diffusion_mm) != 3:
            raise ValueError("smoothing sigmas must be triples (mm)")
        if any(s < 0 for s in self.sigma_fluid_mm + self.sigma_diffusion_mm):
            raise ValueError("smoothing sigmas must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.step_max_voxels > 0:
            raise ValueError("step_max_voxels must be positive")
        if not self.sigma_i > 0:
            raise ValueError("sigma_i must be positive")
        if self.stop_tol < 0:
            raise ValueError("stop_tol must be >= 0")
        if self.magnitude_threshold is not None and self.magnitude_threshold < 0:
            raise ValueError("magnitude_threshold must be >= 0")


@dataclass(frozen=True)
class RegistrationResult:
    """Converged velocity plus its forward/inverse exponentials.

    ``trace`` rows are (iteration, mean wrapped-phase error over gated
    voxels, max update norm in mm).
    """

    velocity: VectorVolume
    forward: VectorVolume
    inverse: VectorVolume
    trace: tuple[tuple[int, float, float], ...] = field(default_factory=tuple)


# ---------------------------------------------------------------------------
# Exponential map
# ---------------------------------------------------------------------------


def _exp_array(v: np.ndarray, grid: Grid3) -> np.ndarray:
    """Scaling and squaring: halve until steps are sub-voxel, then square."""
    vmax = float(np.sqrt((v[..., 0] ** 2 + v[..., 1] ** 2 + v[..., 2] ** 2).max()))
    limit = 0.5 * grid.min_spacing
    squarings = 0 if vmax <= limit else int(np.ceil(np.log2(vmax / limit)))
    d = v / (2.0**squarings)
    for _ in range(squarings):
        d = _compose_arrays(d, d, grid)
    return d


def exp_velocity(velocity: VectorVolume) -> VectorVolume:
    """Displacement of the unit-time flow of a stationary velocity field.

    Chooses the smallest number of squarings that brings the scaled field
    below half the minimum spacing; translation flows are exact.
    """
    if velocity.kind != "velocity":
        raise ValueError(f"exp_velocity requires a velocity field, got {velocity.kind!r}")
    return VectorVolume(
        velocity.grid, _exp_array(velocity.values, velocity.grid), kind="displacement"
    )


# ---------------------------------------------------------------------------
# Divergence-free projection
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=8)
def _projector_symbols(grid: Grid3):
    """Central-difference symbols sin(w)/h per axis on the rfft grid."""
    nx, ny, nz = grid.dims
    freqs = [
        np.fft.fftfreq(nx),
        np.fft.fftfreq(ny),
        np.fft.rfftfreq(nz),
    ]
    symbols = []
    for axis, f in enumerate(freqs):
        s = np.sin(2.0 * np.pi * f) / grid.spacing[axis]
        shape = [1, 1, 1]
        shape[axis] = f.size
        symbols.append(s.reshape(shape))
    s2 = symbols[0] ** 2 + symbols[1] ** 2 + symbols[2] ** 2
    with np.errstate(divide="ignore"):
        inv = np.where(s2 > 0.0, 1.0 / np.where(s2 > 0.0, s2, 1.0), 0.0)
    return symbols, inv


def _project_array(v: np.ndarray, grid: Grid3) -> np.ndarray:
    symbols, inv = _projector_symbols(grid)
    spectra = [np.fft.rfftn(v[..., c]) for c in range(3)]
    div = symbols[0] * spectra[0] + symbols[1] * spectra[1] + symbols[2] * spectra[2]
    coef = div * inv
    out = np.empty_like(v)
    for c in range(3):
        out[..., c] = np.fft.irfftn(spectra[c] - symbols[c] * coef, s=grid.dims)
    return out


def project_divergence_free(velocity: VectorVolume) -> VectorVolume:
    """Remove the curl-free part of a velocity field (spectral Helmholtz).

    The projector uses the same central-difference symbols in frequency
    space as the spatial divergence stencil, so the discrete divergence of
    the output vanishes (periodic sense); modes with zero symbol, including
    DC, pass through unchanged.
    """
    if velocity.kind != "velocity":
        raise ValueError(
            f"project_divergence_free requires a velocity field, got {velocity.kind!r}"
        )
    return VectorVolume(
        velocity.grid, _project_array(velocity.values, velocity.grid), kind="velocity"
    )


@functools.lru_cache(maxsize=8)
def _taper_window(grid: Grid3, width: int = TAPER_WIDTH_VOXELS) -> np.ndarray:
    """Cosine ramp from the faces to 1 over ``width`` voxels, separable."""
    window = np.ones(grid.dims)
    for axis, n in enumerate(grid.dims):
        profile = np.ones(n)
        m = min(width, n // 2)
        ramp = 0.5 * (1.0 - np.cos(np.pi * (np.arange(m) + 1.0) / (m + 1.0)))
        profile[:m] = ramp
        profile[n - m :] = ramp[::-1]
        shape = [1, 1, 1]
        shape[axis] = n
        window = window * profile.reshape(shape)
    window.setflags(write=False)
    return window


def _project_tapered(v: np.ndarray, grid: Grid3) -> np.ndarray:
    """Divergence-free projection with boundary damping.

    The spectral projector assumes periodicity; damping the field toward
    zero over a few boundary voxels before projecting keeps wrap-around
    artifacts out while the untapered boundary remainder is added back
    unprojected (it is zero everywhere in the interior).
    """
    w = _taper_window(grid)[..., None]
    return _project_array(v * w, grid) + (1.0 - w) * v


# ---------------------------------------------------------------------------
# Demons force
# ---------------------------------------------------------------------------


class _Channels:
    """Per-run precomputation shared across iterations.

    The moving cos/sin/magnitude volumes are stacked (9, nx, ny, nz) so one
    shared-weights gather per iteration samples all of them.
    """

    def __init__(self, moving: PhaseSet, fixed: PhaseSet, params: RegistrationParams):
        if moving.grid != fixed.grid:
            raise GridMismatchError("grid mismatch")
        self.grid = moving.grid
        mov = []
        for d in range(3):
            mov.append(np.cos(moving.phases[d].values).reshape(-1))
            mov.append(np.sin(moving.phases[d].values).reshape(-1))
            mov.append(moving.magnitudes[d].values.reshape(-1))
        self.mov_rows = np.ascontiguousarray(np.stack(mov, axis=-1))
        self.fix_phase = [p.values for p in fixed.phases]
        self.fix_mag = [m.values for m in fixed.magnitudes]
        self.fix_grad = [_wrapped_gradient_array(p, self.grid) for p in self.fix_phase]
        if params.magnitude_threshold is None:
            self.eps = [
                0.1 * float(np.median(np.minimum(m.values, f)))
                for m, f in zip(moving.magnitudes, self.fix_mag)
            ]
        else:
            self.eps = [params.magnitude_threshold] * 3
        self.step_cap_mm = params.step_max_voxels * self.grid.min_spacing
        self.sigma_i2 = params.sigma_i**2


def _demons_force(ch: _Channels, disp: np.ndarray):
    """Symmetric multichannel demons update at the current displacement.

    Returns (update field in mm, mean |wrapped phase error| over gated
    voxel-direction pairs).
    """
    grid = ch.grid
    sampler = TrilinearSampler(grid, grid.world_points() + disp)
    warped = sampler.sample_rows(ch.mov_rows)
    force = np.zeros(grid.dims + (3,))
    count = np.zeros(grid.dims)
    err_sum = 0.0
    err_cnt = 0
    for d in range(3):
        warped_cos = np.ascontiguousarray(warped[:, 3 * d]).reshape(grid.dims)
        warped_sin = np.ascontiguousarray(warped[:, 3 * d + 1]).reshape(grid.dims)
        warped_phase = wrap(np.arctan2(warped_sin, warped_cos))
        warped_mag = np.ascontiguousarray(warped[:, 3 * d + 2]).reshape(grid.dims)
        e = wrap(ch.fix_phase[d] - warped_phase)
        g = 0.5 * (ch.fix_grad[d] + _wrapped_gradient_array(warped_phase, grid))
        gate = np.minimum(warped_mag, ch.fix_mag[d]) > ch.eps[d]
        g2 = g[..., 0] ** 2 + g[..., 1] ** 2 + g[..., 2] ** 2
        denom = g2 + (e * e) / ch.sigma_i2
        weight = np.where((denom > 0.0) & gate, e / np.where(denom > 0.0, denom, 1.0), 0.0)
        force += g * weight[..., None]
        count += gate
        err_sum += float(np.abs(e[gate]).sum())
        err_cnt += int(gate.sum())
    update = np.where(count[..., None] > 0, force / np.maximum(count, 1.0)[..., None], 0.0)
    norm = np.sqrt(update[..., 0] ** 2 + update[..., 1] ** 2 + update[..., 2] ** 2)
    over = norm > ch.step_cap_mm
    if over.any():
        scale = np.ones_like(norm)
        scale[over] = ch.step_cap_mm / norm[over]
        update *= scale[..., None]
    mean_err = err_sum / err_cnt if err_cnt else 0.0
    return update, mean_err


def demons_update(
    moving: PhaseSet,
    fixed: PhaseSet,
    current_disp: VectorVolume,
    params: RegistrationParams | None = None,
) -> VectorVolume:
    """One raw (unsmoothed) demons force evaluation.

    Per direction the wrapped difference between the fixed phase and the
    warped moving phase drives a step along the symmetric wrapped gradient,
    normalized demons-style; directions whose harmonic magnitude falls below
    the confidence gate contribute nothing, and voxels with no usable
    direction receive zero force. Steps are capped at
    ``step_max_voxels * min spacing``.
    """
    params = params or RegistrationParams()
    if current_disp.grid != moving.grid:
        raise GridMismatchError("grid mismatch")
    if current_disp.kind != "displacement":
        raise ValueError(f"demons_update requires a displacement, got {current_disp.kind!r}")
    ch = _Channels(moving, fixed, params)
    update, _ = _demons_force(ch, current_disp.values)
    return VectorVolume(moving.grid, update, kind="displacement")


# ---------------------------------------------------------------------------
# Registration loop
# ---------------------------------------------------------------------------


def _smooth_vector_array(v: np.ndarray, grid: Grid3, sigma_mm) -> np.ndarray:
    if all(s == 0.0 for s in sigma_mm):
        return v
    out = np.empty_like(v)
    for c in range(3):
        out[..., c] = _smooth_array(v[..., c], grid, sigma_mm)
    return out


def register(
    moving: PhaseSet,
    fixed: PhaseSet,
    params: RegistrationParams | None = None,
    init_velocity: VectorVolume | None = None,
) -> RegistrationResult:
    """Estimate the stationary velocity carrying ``moving`` onto ``fixed``.

    Starting from ``init_velocity`` (or zero), each iteration exponentiates
    the velocity, evaluates the demons force at the warped position, smooths
    the update (fluid), accumulates it into the velocity (first-order
    log-domain step), smooths the velocity (diffusion) and, when requested,
    projects it divergence-free. Iteration stops early once the smoothed
    update drops below ``stop_tol`` voxels.
    """
    params = params or RegistrationParams()
    ch = _Channels(moving, fixed, params)
    grid = ch.grid
    if init_velocity is not None:
        if init_velocity.grid != grid:
            raise GridMismatchError("grid mismatch")
        if init_velocity.kind != "velocity":
            raise ValueError(f"init_velocity must be a velocity field, got {init_velocity.kind!r}")
        v = init_velocity.values.copy()
    else:
        v = np.zeros(grid.dims + (3,))
    stop_mm = params.stop_tol * grid.min_spacing
    trace: list[tuple[int, float, float]] = []
    for it in range(1, params.max_iters + 1):
        phi = _exp_array(v, grid)
        update, mean_err = _demons_force(ch, phi)
        update = _smooth_vector_array(update, grid, params.sigma_fluid_mm)
        max_update = float(
            np.sqrt((update[..., 0] ** 2 + update[..., 1] ** 2 + update[..., 2] ** 2).max())
        )
        v = v + update
        v = _smooth_vector_array(v, grid, params.sigma_diffusion_mm)
        if params.incompressible:
            v = _project_tapered(v, grid) if params.boundary_taper else _project_array(v, grid)
        if not np.isfinite(v).all():
            raise NumericalDivergenceError(f"numerical divergence at iteration {it}")
        trace.append((it, mean_err, max_update))
        if max_update < stop_mm:
            break
    log.debug("register: %d iterations, final mean phase err %.3g", len(trace), trace[-1][1])
    return RegistrationResult(
        velocity=VectorVolume(grid, v, kind="velocity"),
        forward=VectorVolume(grid, _exp_array(v, grid), kind="displacement"),
        inverse=VectorVolume(grid, _exp_array(-v, grid), kind="displacement"),
        trace=tuple(trace),
    )
