"""3D scalar and vector fields on regular anisotropic grids.

All vector quantities (displacements, velocities, gradients) are stored in
physical millimeters, never in voxel units, so anisotropic spacing cannot
silently skew directional arithmetic; conversion to index space happens only
inside the interpolation kernel. Arrays are indexed ``[i, j, k]`` with axis 0
along x; the canonical flat layout (files, hashing) is x-fastest.

Volumes are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

__all__ = [
    "Grid3",
    "ScalarVolume",
    "VectorVolume",
    "GridMismatchError",
    "wrap",
    "trilinear_sample",
    "TrilinearSampler",
    "warp_scalar",
    "warp_phase",
    "gaussian_smooth",
    "gradient_central",
    "wrapped_gradient",
    "divergence",
    "jacobian_determinant",
    "compose_displacements",
]

TWO_PI = 2.0 * np.pi

VECTOR_KINDS = ("displacement", "velocity", "gradient")


class GridMismatchError(ValueError):
    """Two volumes that are required to share a grid do not."""


@dataclass(frozen=True)
class Grid3:
    """Geometry of a 3D sampling lattice.

    ``world(i, j, k) = origin + (i*sx, j*sy, k*sz)``. This mapping is the
    single source of truth for index <-> world conversion.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise ValueError(f"grid dims must be three integers >= 2, got {self.dims!r}")
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"grid spacing must be positive, got {self.spacing!r}")
        if len(origin) != 3 or any(not np.isfinite(o) for o in origin):
            raise ValueError(f"grid origin must be finite, got {self.origin!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def min_spacing(self) -> float:
        return min(self.spacing)

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        """Physical period of the lattice per axis (dims * spacing)."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def axis_coords(self, axis: int) -> np.ndarray:
        """World coordinates of voxel centers along one axis."""
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def world_points(self) -> np.ndarray:
        """World coordinates of every voxel, shape (nx, ny, nz, 3). Read-only."""
        return _world_points_cached(self)


@functools.lru_cache(maxsize=8)
def _world_points_cached(grid: Grid3) -> np.ndarray:
    axes = [grid.axis_coords(a) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pts.setflags(write=False)
    return pts


def _check_values(values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(values).all():
        raise ValueError(f"{what} contains non-finite values")
    return values


@dataclass(frozen=True)
class ScalarVolume:
    """One real value per voxel, shape (nx, ny, nz)."""

    grid: Grid3
    values: np.ndarray

    def __post_init__(self):
        values = _check_values(self.values, "scalar volume")
        if values.shape != self.grid.dims:
            raise ValueError(f"values shape {values.shape} != grid dims {self.grid.dims}")
        values = np.ascontiguousarray(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class VectorVolume:
    """One 3-vector per voxel in mm, shape (nx, ny, nz, 3).

    ``kind`` declares the physical meaning (displacement, velocity or
    gradient) and is immutable; operations check the kinds they accept.
    """

    grid: Grid3
    values: np.ndarray
    kind: str = "displacement"

    def __post_init__(self):
        if self.kind not in VECTOR_KINDS:
            raise ValueError(f"unknown vector kind {self.kind!r}, expected one of {VECTOR_KINDS}")
        values = _check_values(self.values, "vector volume")
        if values.shape != self.grid.dims + (3,):
            raise ValueError(f"values shape {values.shape} != grid dims {self.grid.dims} + (3,)")
        values = np.ascontiguousarray(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def max_norm(self) -> float:
        return float(np.sqrt((self.values**2).sum(axis=-1)).max())


def _require_same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatchError("grid mismatch")


def _require_kind(v: VectorVolume, kind: str, op: str):
    if v.kind != kind:
        raise ValueError(f"{op} requires a {kind} field, got {v.kind!r}")


def wrap(theta):
    """Wrap angles to [-pi, pi): W(t) = t - 2*pi*floor(t/(2*pi) + 1/2).

    Computed as ((t + pi) mod 2*pi) - pi, which is the same function with
    the range guaranteed even at the seam. Half-open on the right, so
    wrap(pi) == -pi. Accepts scalars or arrays.
    """
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = np.remainder(theta + np.pi, TWO_PI) - np.pi
    # remainder can round up to exactly 2*pi for inputs one ulp below the
    # seam; fold that single out-of-range case back
    wrapped = np.where(wrapped >= np.pi, wrapped - TWO_PI, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


class TrilinearSampler:
    """Trilinear interpolation weights for a fixed set of sample points.

    Building the corner indices and weights once lets several fields be
    sampled at the same points (e.g. the three phase channels plus their
    magnitudes) for the cost of a single coordinate setup. Points outside
    the grid clamp to the boundary face before interpolation.
    """

    __slots__ = ("grid", "_base", "_tx", "_ty", "_tz", "_off", "out_shape")

    def __init__(self, grid: Grid3, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.shape[-1] != 3:
            raise ValueError("points must have a trailing axis of size 3")
        self.grid = grid
        self.out_shape = points.shape[:-1]
        nx, ny, nz = grid.dims
        flat = points.reshape(-1, 3)
        idx0 = []
        frac = []
        for a, n in enumerate(grid.dims):
            f = (flat[:, a] - grid.origin[a]) / grid.spacing[a]
            np.clip(f, 0.0, n - 1.0, out=f)
            i0 = np.minimum(f.astype(np.intp), n - 2)
            idx0.append(i0)
            frac.append(f - i0)
        i0, j0, k0 = idx0
        self._base = (i0 * ny + j0) * nz + k0
        self._tx, self._ty, self._tz = frac
        self._off = (ny * nz, nz, 1)

    def sample(self, values: np.ndarray) -> np.ndarray:
        """Sample one scalar field (nx, ny, nz) at the stored points.

        Nested lerps, so constant input is reproduced exactly regardless of
        the weights.
        """
        out = self.sample_rows(np.ascontiguousarray(values).reshape(-1, 1))
        return out.reshape(self.out_shape)

    def sample_rows(self, rows: np.ndarray) -> np.ndarray:
        """Sample m fields stored as one (n_voxels, m) row matrix.

        Gathering whole rows keeps every channel of a voxel in one cache
        line, which makes this far cheaper than m separate sample() calls.
        Returns (n_points, m).
        """
        out = np.empty((self._base.size, rows.shape[1]))
        if _HAVE_NUMBA:
            _gather_lerp_rows(
                rows, self._base, *self._off, self._tx, self._ty, self._tz, out
            )
            return out
        base = self._base
        ox, oy, oz = self._off
        tx = self._tx[:, None]
        ty = self._ty[:, None]
        tz = self._tz[:, None]
        take = np.take
        c00 = _lerp(take(rows, base, 0), take(rows, base + ox, 0), tx)
        c01 = _lerp(take(rows, base + oz, 0), take(rows, base + ox + oz, 0), tx)
        c10 = _lerp(take(rows, base + oy, 0), take(rows, base + ox + oy, 0), tx)
        c11 = _lerp(take(rows, base + oy + oz, 0), take(rows, base + ox + oy + oz, 0), tx)
        return _lerp(_lerp(c00, c10, ty), _lerp(c01, c11, ty), tz)

    def sample_stack(self, stack: np.ndarray) -> np.ndarray:
        """Sample m fields (m, nx, ny, nz) at once; returns (m, ...)."""
        m = stack.shape[0]
        rows = np.ascontiguousarray(stack.reshape(m, -1).T)
        out = self.sample_rows(rows)
        return np.ascontiguousarray(out.T).reshape((m,) + self.out_shape)

    def sample_vector(self, values: np.ndarray) -> np.ndarray:
        """Sample a vector field (nx, ny, nz, 3); returns (..., 3)."""
        out = self.sample_rows(values.reshape(-1, 3))
        return out.reshape(self.out_shape + (3,))


def _lerp(a, b, t):
    return a + t * (b - a)


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _gather_lerp_rows(rows, base, ox, oy, oz, tx, ty, tz, out):
        # Same lerp expression tree as the numpy path, fused into one pass.
        n, m = out.shape
        for i in range(n):
            b = base[i]
            wx = tx[i]
            wy = ty[i]
            wz = tz[i]
            for j in range(m):
                v000 = rows[b, j]
                v100 = rows[b + ox, j]
                v010 = rows[b + oy, j]
                v110 = rows[b + ox + oy, j]
                v001 = rows[b + oz, j]
                v101 = rows[b + ox + oz, j]
                v011 = rows[b + oy + oz, j]
                v111 = rows[b + ox + oy + oz, j]
                c00 = v000 + wx * (v100 - v000)
                c01 = v001 + wx * (v101 - v001)
                c10 = v010 + wx * (v110 - v010)
                c11 = v011 + wx * (v111 - v011)
                c0 = c00 + wy * (c10 - c00)
                c1 = c01 + wy * (c11 - c01)
                out[i, j] = c0 + wz * (c1 - c0)


def trilinear_sample(volume: ScalarVolume, point) -> float:
    """Interpolate a scalar volume at one world point (mm).

    Total function: out-of-bounds coordinates clamp to the boundary face.
    """
    sampler = TrilinearSampler(volume.grid, np.asarray(point, dtype=np.float64))
    return float(sampler.sample(volume.values))


def warp_scalar(image: ScalarVolume, disp: VectorVolume) -> ScalarVolume:
    """Pull-back warp: output(x) = image(x + disp(x))."""
    _require_same_grid(image, disp)
    _require_kind(disp, "displacement", "warp_scalar")
    pts = image.grid.world_points() + disp.values
    sampler = TrilinearSampler(image.grid, pts)
    return ScalarVolume(image.grid, sampler.sample(image.values))


def warp_phase(phase: ScalarVolume, disp: VectorVolume) -> ScalarVolume:
    """Pull-back warp of a wrapped phase volume.

    Interpolation happens on the complex unit circle (cos and sin are
    interpolated separately, then recombined with atan2) so averaging never
    crosses the +-pi seam. Output values lie in [-pi, pi).
    """
    _require_same_grid(phase, disp)
    _require_kind(disp, "displacement", "warp_phase")
    pts = phase.grid.world_points() + disp.values
    sampler = TrilinearSampler(phase.grid, pts)
    re = sampler.sample(np.cos(phase.values))
    im = sampler.sample(np.sin(phase.values))
    return ScalarVolume(phase.grid, wrap(np.arctan2(im, re)))


def _gaussian_kernel_1d(sigma_mm: float, spacing_mm: float) -> np.ndarray:
    """Sampled Gaussian truncated at 3*sigma, normalized to sum 1."""
    radius = int(np.floor(3.0 * sigma_mm / spacing_mm + 1e-12))
    if radius < 1:
        return np.ones(1)
    taps = np.arange(-radius, radius + 1) * spacing_mm
    kernel = np.exp(-0.5 * (taps / sigma_mm) ** 2)
    return kernel / kernel.sum()


def _smooth_array(values: np.ndarray, grid: Grid3, sigma_mm) -> np.ndarray:
    """Separable Gaussian with border renormalization over in-bounds taps.

    Per-axis renormalization factorizes exactly because the in-bounds
    support is a product of intervals, so this equals the full 3D
    renormalized convolution.
    """
    out = values
    for axis in range(3):
        sigma = float(sigma_mm[axis])
        if sigma < 0:
            raise ValueError("sigma_mm components must be >= 0")
        if sigma == 0.0:
            continue
        kernel = _gaussian_kernel_1d(sigma, grid.spacing[axis])
        if kernel.size == 1:
            continue
        out = correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
        norm = correlate1d(np.ones(grid.dims[axis]), kernel, mode="constant", cval=0.0)
        shape = [1, 1, 1]
        shape[axis] = grid.dims[axis]
        out = out / norm.reshape(shape)
    return out if out is not values else values.copy()


def gaussian_smooth(volume, sigma_mm):
    """Smooth a ScalarVolume, or each component of a VectorVolume.

    ``sigma_mm`` is a per-axis triple in mm; a zero component disables
    smoothing along that axis. Kernels are truncated at 3*sigma and border
    taps are renormalized, so a constant field passes through unchanged and
    the max norm never grows.
    """
    sigma_mm = tuple(float(s) for s in sigma_mm)
    if len(sigma_mm) != 3:
        raise ValueError("sigma_mm must be a triple")
    if isinstance(volume, ScalarVolume):
        return ScalarVolume(volume.grid, _smooth_array(volume.values, volume.grid, sigma_mm))
    if isinstance(volume, VectorVolume):
        out = np.empty_like(volume.values)
        for c in range(3):
            out[..., c] = _smooth_array(volume.values[..., c], volume.grid, sigma_mm)
        return VectorVolume(volume.grid, out, kind=volume.kind)
    raise TypeError(f"cannot smooth {type(volume).__name__}")


def _gradient_arrays(values: np.ndarray, grid: Grid3) -> list[np.ndarray]:
    return list(np.gradient(values, *grid.spacing))


def gradient_central(volume: ScalarVolume) -> VectorVolume:
    """Spatial gradient in 1/mm: central differences, one-sided at faces."""
    parts = _gradient_arrays(volume.values, volume.grid)
    return VectorVolume(volume.grid, np.stack(parts, axis=-1), kind="gradient")


def _wrapped_gradient_numpy(values: np.ndarray, grid: Grid3) -> np.ndarray:
    out = np.empty(values.shape + (3,))
    for axis in range(3):
        h = grid.spacing[axis]
        d = np.empty_like(values)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        mid = [slice(None)] * 3
        lo[axis], hi[axis], mid[axis] = slice(None, -2), slice(2, None), slice(1, -1)
        # Wrapping the raw difference to [-pi, pi) is the minimum-magnitude
        # choice among the difference and its +-2*pi shifts.
        d[tuple(mid)] = wrap(values[tuple(hi)] - values[tuple(lo)]) / (2.0 * h)
        first_out, first_a, first_b = [slice(None)] * 3, [slice(None)] * 3, [slice(None)] * 3
        first_out[axis], first_a[axis], first_b[axis] = 0, 1, 0
        d[tuple(first_out)] = wrap(values[tuple(first_a)] - values[tuple(first_b)]) / h
        last_out, last_a, last_b = [slice(None)] * 3, [slice(None)] * 3, [slice(None)] * 3
        last_out[axis], last_a[axis], last_b[axis] = -1, -1, -2
        d[tuple(last_out)] = wrap(values[tuple(last_a)] - values[tuple(last_b)]) / h
        out[..., axis] = d
    return out


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _wrapped_gradient_kernel(v, hx, hy, hz, out):
        nx, ny, nz = v.shape
        pi = np.pi
        two_pi = 2.0 * np.pi
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    if 0 < i < nx - 1:
                        d = (v[i + 1, j, k] - v[i - 1, j, k], 2.0 * hx)
                    elif i == 0:
                        d = (v[1, j, k] - v[0, j, k], hx)
                    else:
                        d = (v[nx - 1, j, k] - v[nx - 2, j, k], hx)
                    w = np.remainder(d[0] + pi, two_pi) - pi
                    out[i, j, k, 0] = (w - two_pi if w >= pi else w) / d[1]
                    if 0 < j < ny - 1:
                        d = (v[i, j + 1, k] - v[i, j - 1, k], 2.0 * hy)
                    elif j == 0:
                        d = (v[i, 1, k] - v[i, 0, k], hy)
                    else:
                        d = (v[i, ny - 1, k] - v[i, ny - 2, k], hy)
                    w = np.remainder(d[0] + pi, two_pi) - pi
                    out[i, j, k, 1] = (w - two_pi if w >= pi else w) / d[1]
                    if 0 < k < nz - 1:
                        d = (v[i, j, k + 1] - v[i, j, k - 1], 2.0 * hz)
                    elif k == 0:
                        d = (v[i, j, 1] - v[i, j, 0], hz)
                    else:
                        d = (v[i, j, nz - 1] - v[i, j, nz - 2], hz)
                    w = np.remainder(d[0] + pi, two_pi) - pi
                    out[i, j, k, 2] = (w - two_pi if w >= pi else w) / d[1]


def _wrapped_gradient_array(values: np.ndarray, grid: Grid3) -> np.ndarray:
    if _HAVE_NUMBA:
        out = np.empty(values.shape + (3,))
        _wrapped_gradient_kernel(values, *grid.spacing, out)
        return out
    return _wrapped_gradient_numpy(values, grid)


def wrapped_gradient(phase: ScalarVolume) -> VectorVolume:
    """Gradient of a wrapped phase volume in rad/mm.

    Finite differences of the wrapped values are themselves wrapped to
    [-pi, pi) before dividing by the step, which keeps the smaller-magnitude
    branch at each sample and removes the 2*pi/h spikes a plain difference
    would produce at the seam.
    """
    return VectorVolume(
        phase.grid, _wrapped_gradient_array(phase.values, phase.grid), kind="gradient"
    )


def divergence(field: VectorVolume) -> ScalarVolume:
    """Sum of central-difference partials of the components, in 1/mm."""
    g = field.grid
    out = np.gradient(field.values[..., 0], g.spacing[0], axis=0)
    out += np.gradient(field.values[..., 1], g.spacing[1], axis=1)
    out += np.gradient(field.values[..., 2], g.spacing[2], axis=2)
    return ScalarVolume(g, out)


def jacobian_determinant(disp: VectorVolume) -> ScalarVolume:
    """det(I + grad u) per voxel, via central differences."""
    _require_kind(disp, "displacement", "jacobian_determinant")
    g = disp.grid
    J = np.empty(g.dims + (3, 3))
    for c in range(3):
        for axis, part in enumerate(_gradient_arrays(disp.values[..., c], g)):
            J[..., c, axis] = part
    J[..., 0, 0] += 1.0
    J[..., 1, 1] += 1.0
    J[..., 2, 2] += 1.0
    det = (
        J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
        - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
        + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
    )
    return ScalarVolume(g, det)


def _compose_arrays(outer: np.ndarray, inner: np.ndarray, grid: Grid3) -> np.ndarray:
    pts = grid.world_points() + inner
    sampler = TrilinearSampler(grid, pts)
    return inner + sampler.sample_vector(outer)


def compose_displacements(outer: VectorVolume, inner: VectorVolume) -> VectorVolume:
    """Displacement of the pull-back warp "inner, then outer".

    result(x) = inner(x) + outer(x + inner(x)), so warping an image by the
    result equals warping it by ``outer`` and warping that output by
    ``inner``. Out-of-grid lookups clamp.
    """
    _require_same_grid(outer, inner)
    _require_kind(outer, "displacement", "compose_displacements")
    _require_kind(inner, "displacement", "compose_displacements")
    return VectorVolume(
        outer.grid, _compose_arrays(outer.values, inner.values, outer.grid), kind="displacement"
    )
