"""Quantitative evaluation of estimated motion.

Deformed-phase generation (warp the reference-frame phases by each estimated
deformation), SSIM and Pearson correlation against the per-frame extracted
phases, endpoint error against phantom ground truth, and a tag-jump detector
that counts voxels whose displacement error along a tag direction exceeds
half that direction's period (the phase-ambiguity boundary).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .phantom import MotionModel, TagPattern, ground_truth_displacement
from .harp import PhaseSet
from .volume import (
    GridMismatchError,
    ScalarVolume,
    VectorVolume,
    warp_phase,
    warp_scalar,
)

__all__ = [
    "MetricRow",
    "DegenerateInputError",
    "deformed_phase",
    "ssim",
    "corr",
    "endpoint_error",
    "detect_tag_jump",
    "evaluate_sequence",
    "EndpointError",
    "TagJumpFractions",
]

TWO_PI = 2.0 * math.pi


class DegenerateInputError(ValueError):
    """An input without enough variation for the requested metric."""


@dataclass(frozen=True)
class MetricRow:
    """One evaluation record: a slice of one frame of one method.

    ``slice_index`` is an axial slice number or "volume" for the
    whole-volume aggregate. Endpoint-error and jump fields are NaN when no
    ground truth is available.
    """

    method: str
    frame: int
    slice_index: int | str
    ssim: float
    corr: float
    median_epe_mm: float = math.nan
    max_epe_mm: float = math.nan
    jump_fraction: float = math.nan

    def __post_init__(self):
        if not (math.isnan(self.ssim) or -1.0 <= self.ssim <= 1.0 + 1e-12):
            raise ValueError(f"ssim out of range: {self.ssim}")
        if not (math.isnan(self.corr) or -1.0 - 1e-12 <= self.corr <= 1.0 + 1e-12):
            raise ValueError(f"corr out of range: {self.corr}")
        if not math.isnan(self.median_epe_mm) and self.median_epe_mm < 0:
            raise ValueError("endpoint error must be nonnegative")


class EndpointError(NamedTuple):
    median_mm: float
    max_mm: float
    per_voxel: ScalarVolume


class TagJumpFractions(NamedTuple):
    per_direction: tuple[float, float, float]
    overall: float


def deformed_phase(psi: VectorVolume, reference: PhaseSet) -> PhaseSet:
    """Warp the reference-frame phase set by an estimated deformation.

    Phases are warped on the unit circle, magnitudes with plain trilinear
    interpolation.
    """
    if psi.grid != reference.grid:
        raise GridMismatchError("grid mismatch")
    phases = tuple(warp_phase(p, psi) for p in reference.phases)
    magnitudes = tuple(warp_scalar(m, psi) for m in reference.magnitudes)
    return PhaseSet(phases, magnitudes, reference.filter_specs)


def _window_means(a: np.ndarray, window: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    return view.mean(axis=(-2, -1))


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 7,
    dynamic_range: float = TWO_PI,
    mask: np.ndarray | None = None,
) -> float:
    """Structural similarity of two 2D arrays.

    Uniform window weights, valid-region aggregation (windows fully inside
    the image), constants c1 = (0.01 L)^2 and c2 = (0.03 L)^2 with
    L = ``dynamic_range`` (2*pi by default, matching wrapped phase slices).
    ``mask`` optionally restricts the aggregate to windows whose center
    pixel is masked in.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("shape mismatch")
    if window % 2 != 1 or window < 3:
        raise ValueError("window must be odd and >= 3")
    if min(a.shape) < window:
        raise ValueError("window larger than image")
    mu_a = _window_means(a, window)
    mu_b = _window_means(b, window)
    var_a = _window_means(a * a, window) - mu_a * mu_a
    var_b = _window_means(b * b, window) - mu_b * mu_b
    cov = _window_means(a * b, window) - mu_a * mu_b
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    if mask is not None:
        half = window // 2
        centers = mask[half : mask.shape[0] - half, half : mask.shape[1] - half]
        if not centers.any():
            raise DegenerateInputError("degenerate input")
        return float(ssim_map[centers].mean())
    return float(ssim_map.mean())


def ssim_phase(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 7,
    mode: str = "wrapped",
    mask: np.ndarray | None = None,
) -> float:
    """SSIM for wrapped phase slices.

    ``wrapped`` scores the raw wrapped values with L = 2*pi; ``sincos``
    scores the cos and sin channels (L = 2) and averages, which removes the
    seam discontinuity.
    """
    if mode == "wrapped":
        return ssim(a, b, window, TWO_PI, mask)
    if mode == "sincos":
        s_cos = ssim(np.cos(a), np.cos(b), window, 2.0, mask)
        s_sin = ssim(np.sin(a), np.sin(b), window, 2.0, mask)
        return 0.5 * (s_cos + s_sin)
    raise ValueError(f"unknown ssim mode {mode!r}")


def corr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Pearson correlation coefficient over all pixels (optionally masked)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if mask is not None:
        sel = np.asarray(mask, dtype=bool).ravel()
        a, b = a[sel], b[sel]
    am = a - a.mean()
    bm = b - b.mean()
    denom = math.sqrt(float((am * am).sum()) * float((bm * bm).sum()))
    if denom == 0.0:
        raise DegenerateInputError("degenerate input")
    return float((am * bm).sum() / denom)


def _interior_mask(dims, margin: int) -> np.ndarray:
    if any(d <= 2 * margin for d in dims):
        raise ValueError(f"margin {margin} leaves no interior for dims {dims}")
    mask = np.zeros(dims, dtype=bool)
    mask[margin:-margin or None, margin:-margin or None, margin:-margin or None] = True
    return mask


def endpoint_error(
    estimate: VectorVolume, truth: VectorVolume, margin: int = 3
) -> EndpointError:
    """|estimated - true| displacement per voxel, summarized over the interior."""
    if estimate.grid != truth.grid:
        raise GridMismatchError("grid mismatch")
    diff = estimate.values - truth.values
    err = np.sqrt((diff * diff).sum(axis=-1))
    mask = _interior_mask(estimate.grid.dims, margin)
    inside = err[mask]
    return EndpointError(
        median_mm=float(np.median(inside)),
        max_mm=float(inside.max()),
        per_voxel=ScalarVolume(estimate.grid, err),
    )


def detect_tag_jump(
    estimate: VectorVolume,
    truth: VectorVolume,
    pattern: TagPattern,
    margin: int = 3,
) -> TagJumpFractions:
    """Fraction of interior voxels displaced into the wrong tag cycle.

    A voxel counts as jumped along direction d when the component of the
    displacement error along k_d exceeds pi/|k_d| (half the tag period),
    i.e. the nearest-phase match lies in a neighboring sinusoidal cycle.
    """
    if estimate.grid != truth.grid:
        raise GridMismatchError("grid mismatch")
    diff = estimate.values - truth.values
    mask = _interior_mask(estimate.grid.dims, margin)
    fractions = []
    for d in range(3):
        k = pattern.wave_vectors[d]
        k_norm = float(np.linalg.norm(k))
        along = diff @ (k / k_norm)
        jumped = np.abs(along[mask]) > (math.pi / k_norm)
        fractions.append(float(jumped.mean()))
    return TagJumpFractions(tuple(fractions), max(fractions))


def _slice_mask_2d(dims_2d, margin: int) -> np.ndarray:
    mask = np.zeros(dims_2d, dtype=bool)
    mask[margin:-margin or None, margin:-margin or None] = True
    return mask


def evaluate_sequence(
    estimates: dict,
    phases,
    *,
    model: MotionModel | None = None,
    pattern: TagPattern | None = None,
    window: int = 7,
    ssim_mode: str = "wrapped",
    margin: int = 3,
    magnitude_mask: bool = False,
) -> list[MetricRow]:
    """Score every method at every frame, per axial slice plus a volume row.

    The reference for frame n is the phase set extracted from frame n
    itself; the deformed phases are the frame-1 phases warped by each
    method's deformation. Slice rows restrict endpoint/jump statistics to
    the in-plane interior of that slice; the volume row uses the 3D interior
    and slice-averaged similarity. ``magnitude_mask`` optionally limits the
    similarity metrics to pixels whose harmonic magnitude passes 10% of the
    slice median.
    """
    phases = list(phases)
    if len(phases) < 2:
        raise ValueError("need at least two frames")
    grid = phases[0].grid
    nz = grid.dims[2]
    have_truth = model is not None and pattern is not None
    rows: list[MetricRow] = []
    truth_cache: dict[int, VectorVolume] = {}
    for method, est in estimates.items():
        if est.n_frames != len(phases):
            raise ValueError(f"{method}: estimate covers {est.n_frames} frames, got {len(phases)}")
        for n in range(2, len(phases) + 1):
            psi = est.deformations[n - 2]
            deformed = deformed_phase(psi, phases[0])
            reference = phases[n - 1]
            if have_truth and n not in truth_cache:
                truth_cache[n] = ground_truth_displacement(model, grid, n)
            err_volume = None
            if have_truth:
                diff = psi.values - truth_cache[n].values
                err_volume = np.sqrt((diff * diff).sum(axis=-1))
            slice_ssims = []
            slice_corrs = []
            for k in range(nz):
                s_vals = []
                pooled_a = []
                pooled_b = []
                for d in range(3):
                    a = deformed.phases[d].values[:, :, k]
                    b = reference.phases[d].values[:, :, k]
                    mask = None
                    if magnitude_mask:
                        mag = reference.magnitudes[d].values[:, :, k]
                        mask = mag > 0.1 * np.median(mag)
                    s_vals.append(ssim_phase(a, b, window, ssim_mode, mask))
                    sel = slice(None) if mask is None else mask
                    pooled_a.append(a[sel].ravel())
                    pooled_b.append(b[sel].ravel())
                slice_ssim = float(np.mean(s_vals))
                # correlation pools the three channels: an axis-aligned tag
                # phase is constant within a slice normal to it, so a
                # per-direction slice correlation would be degenerate
                slice_corr = corr(np.concatenate(pooled_a), np.concatenate(pooled_b))
                slice_ssims.append(slice_ssim)
                slice_corrs.append(slice_corr)
                med = mx = jump = math.nan
                if have_truth:
                    mask2d = _slice_mask_2d(grid.dims[:2], margin)
                    err_slice = err_volume[:, :, k][mask2d]
                    med = float(np.median(err_slice))
                    mx = float(err_slice.max())
                    diff_slice = (psi.values - truth_cache[n].values)[:, :, k, :]
                    jump_d = []
                    for d in range(3):
                        kvec = pattern.wave_vectors[d]
                        k_norm = float(np.linalg.norm(kvec))
                        along = diff_slice @ (kvec / k_norm)
                        jump_d.append(float((np.abs(along[mask2d]) > math.pi / k_norm).mean()))
                    jump = max(jump_d)
                rows.append(
                    MetricRow(method, n, k, slice_ssim, slice_corr, med, mx, jump)
                )
            med = mx = jump = math.nan
            if have_truth:
                epe = endpoint_error(psi, truth_cache[n], margin)
                med, mx = epe.median_mm, epe.max_mm
                jump = detect_tag_jump(psi, truth_cache[n], pattern, margin).overall
            rows.append(
                MetricRow(
                    method,
                    n,
                    "volume",
                    float(np.mean(slice_ssims)),
                    float(np.mean(slice_corrs)),
                    med,
                    mx,
                    jump,
                )
            )
    return rows


def worst_slice_rows(rows: list[MetricRow]) -> list[MetricRow]:
    """The lowest-SSIM slice row for each (method, frame)."""
    worst: dict[tuple[str, int], MetricRow] = {}
    for row in rows:
        if row.slice_index == "volume":
            continue
        key = (row.method, row.frame)
        if key not in worst or row.ssim < worst[key].ssim:
            worst[key] = row
    return [worst[k] for k in sorted(worst, key=lambda k: (k[0], k[1]))]
