"""Similarity metrics, endpoint error, jump detection, sequence scoring."""

import math

import numpy as np
import pytest

from tagflow.harp import default_filter_specs, extract_phase_set
from tagflow.metrics import (
    DegenerateInputError,
    MetricRow,
    corr,
    deformed_phase,
    detect_tag_jump,
    endpoint_error,
    evaluate_sequence,
    ssim,
    ssim_phase,
    worst_slice_rows,
)
from tagflow.phantom import (
    default_motion_model,
    default_tag_pattern,
    ground_truth_displacement,
    render_tagged_frame,
)
from tagflow.strategies import SequenceEstimate
from tagflow.demons import RegistrationParams
from tagflow.volume import Grid3, GridMismatchError, VectorVolume, wrap

GRID = Grid3((24, 24, 8), (1.875, 1.875, 6.0))
PATTERN = default_tag_pattern()
SPECS = default_filter_specs(PATTERN)


def ssim_reference(a, b, window, L):
    """Independent direct-formula evaluation: explicit loop over windows."""
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    h, w = a.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            pa = a[i : i + window, j : j + window]
            pb = b[i : i + window, j : j + window]
            mu_a, mu_b = pa.mean(), pb.mean()
            var_a = (pa * pa).mean() - mu_a**2
            var_b = (pb * pb).mean() - mu_b**2
            cov = (pa * pb).mean() - mu_a * mu_b
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def test_ssim_identity_is_one():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_anticorrelated_negative():
    # zero mean in every window: full sine periods per 7x7 window
    i, j = np.meshgrid(np.arange(21), np.arange(21), indexing="ij")
    a = 3.0 * np.sin(2 * np.pi * i / 7.0) * np.cos(2 * np.pi * j / 7.0)
    assert ssim(a, -a) < 0.0


def test_ssim_matches_direct_formula():
    rng = np.random.default_rng(2)
    a = rng.uniform(-np.pi, np.pi, (8, 8))
    b = rng.uniform(-np.pi, np.pi, (8, 8))
    got = ssim(a, b, window=7, dynamic_range=2 * np.pi)
    want = ssim_reference(a, b, 7, 2 * np.pi)
    assert got == pytest.approx(want, abs=1e-12)


def test_ssim_symmetry():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(12, 12))
    b = rng.normal(size=(12, 12))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_never_exceeds_one():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a = rng.normal(size=(10, 10))
        b = a + rng.normal(0, 0.3, size=(10, 10))
        assert ssim(a, b) <= 1.0 + 1e-12


def test_ssim_shape_and_window_validation():
    a = np.zeros((8, 8))
    with pytest.raises(ValueError, match="shape mismatch"):
        ssim(a, np.zeros((8, 9)))
    with pytest.raises(ValueError):
        ssim(a, a, window=4)
    with pytest.raises(ValueError):
        ssim(a, a, window=9)


def test_ssim_phase_modes():
    rng = np.random.default_rng(5)
    a = wrap(rng.uniform(-4, 4, (12, 12)))
    b = wrap(rng.uniform(-4, 4, (12, 12)))
    for mode in ("wrapped", "sincos"):
        assert ssim_phase(a, a, mode=mode) == pytest.approx(1.0, abs=1e-12)
        assert ssim_phase(a, b, mode=mode) == pytest.approx(
            ssim_phase(b, a, mode=mode), abs=1e-12
        )
    with pytest.raises(ValueError):
        ssim_phase(a, b, mode="polar")


# ---------------------------------------------------------------------------
# CORR
# ---------------------------------------------------------------------------


def test_corr_identity_and_affine_invariance():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(14, 14))
    assert corr(a, a) == pytest.approx(1.0, abs=1e-12)
    assert corr(a, 2.0 * a + 3.0) == pytest.approx(1.0, abs=1e-12)
    assert corr(2.0 * a + 3.0, a) == pytest.approx(1.0, abs=1e-12)


def test_corr_matches_numpy():
    rng = np.random.default_rng(7)
    a = rng.normal(size=200)
    b = rng.normal(size=200)
    assert corr(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)


def test_corr_degenerate_input():
    with pytest.raises(DegenerateInputError, match="degenerate input"):
        corr(np.ones(10), np.arange(10.0))


# ---------------------------------------------------------------------------
# Endpoint error and jump detection
# ---------------------------------------------------------------------------


def _disp(values):
    return VectorVolume(GRID, values, kind="displacement")


def test_endpoint_error_zero():
    rng = np.random.default_rng(8)
    u = _disp(rng.normal(size=GRID.dims + (3,)))
    res = endpoint_error(u, u, margin=2)
    assert res.median_mm == 0.0
    assert res.max_mm == 0.0


def test_endpoint_error_constant_offset():
    rng = np.random.default_rng(9)
    truth = _disp(rng.normal(size=GRID.dims + (3,)))
    shifted = truth.values.copy()
    shifted[..., 0] += 1.0
    res = endpoint_error(_disp(shifted), truth, margin=2)
    assert res.median_mm == pytest.approx(1.0, abs=1e-12)
    assert res.max_mm == pytest.approx(1.0, abs=1e-12)
    assert res.per_voxel.values.shape == GRID.dims


def test_endpoint_error_grid_mismatch():
    other = Grid3(GRID.dims, (1.0, 1.0, 1.0))
    a = _disp(np.zeros(GRID.dims + (3,)))
    b = VectorVolume(other, np.zeros(GRID.dims + (3,)), kind="displacement")
    with pytest.raises(GridMismatchError):
        endpoint_error(a, b)


def test_tag_jump_zero_for_equal_fields():
    rng = np.random.default_rng(10)
    u = _disp(rng.normal(size=GRID.dims + (3,)))
    res = detect_tag_jump(u, u, PATTERN, margin=2)
    assert res.overall == 0.0


def test_tag_jump_half_volume_offset():
    truth = _disp(np.zeros(GRID.dims + (3,)))
    period = 2 * np.pi / np.linalg.norm(PATTERN.wave_vectors[0])
    est = np.zeros(GRID.dims + (3,))
    est[: GRID.dims[0] // 2, ..., 0] = period  # full period along x in half the volume
    res = detect_tag_jump(_disp(est), truth, PATTERN, margin=2)
    assert res.per_direction[0] == pytest.approx(0.5, abs=0.06)
    assert res.per_direction[1] == 0.0
    assert res.overall == res.per_direction[0]


def test_tag_jump_invariant_to_common_period_shift():
    rng = np.random.default_rng(11)
    truth_vals = rng.normal(0, 0.4, GRID.dims + (3,))
    est_vals = truth_vals + rng.normal(0, 0.4, GRID.dims + (3,))
    base = detect_tag_jump(_disp(est_vals), _disp(truth_vals), PATTERN)
    period = 2 * np.pi / np.linalg.norm(PATTERN.wave_vectors[0])
    shift = np.zeros(3)
    shift[0] = 2 * period
    shifted = detect_tag_jump(
        _disp(est_vals + shift), _disp(truth_vals + shift), PATTERN
    )
    assert shifted.per_direction == pytest.approx(base.per_direction, abs=1e-12)


# ---------------------------------------------------------------------------
# Deformed phase and sequence evaluation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_sequence():
    model = default_motion_model(GRID, n_frames=3, peak_displacement_mm=2.0)
    frames = [render_tagged_frame(model, PATTERN, GRID, n) for n in range(1, 4)]
    phases = [extract_phase_set(f, SPECS) for f in frames]
    return phases, model


def test_deformed_phase_identity(small_sequence):
    phases, _ = small_sequence
    psi = _disp(np.zeros(GRID.dims + (3,)))
    out = deformed_phase(psi, phases[0])
    for d in range(3):
        err = np.abs(wrap(out.phases[d].values - phases[0].phases[d].values))
        assert err.max() < 1e-12
        assert out.phases[d].values.min() >= -np.pi
        assert out.phases[d].values.max() < np.pi


def test_deformed_phase_matches_frame_n(small_sequence):
    # warping the reference phases by the ground truth reproduces the
    # frame-n extracted phases up to filter/interpolation error
    phases, model = small_sequence
    psi = ground_truth_displacement(model, GRID, 3)
    out = deformed_phase(psi, phases[0])
    for d in range(3):
        err = np.abs(wrap(out.phases[d].values - phases[2].phases[d].values))
        assert np.median(err[3:-3, 3:-3, 2:-2]) < 0.1


def _identity_estimate(method, n_frames, params):
    zero = _disp(np.zeros(GRID.dims + (3,)))
    vel = VectorVolume(GRID, np.zeros(GRID.dims + (3,)), kind="velocity")
    return SequenceEstimate(
        method=method,
        deformations=[zero] * (n_frames - 1),
        velocities=[vel] * (n_frames - 1),
        params=params,
        timing=[0.0] * (n_frames - 1),
    )


def test_evaluate_identical_sequence_perfect_scores(small_sequence):
    phases, _ = small_sequence
    params = RegistrationParams()
    same = [phases[0], phases[0], phases[0]]
    estimates = {m: _identity_estimate(m, 3, params) for m in ("direct", "incremental")}
    rows = evaluate_sequence(estimates, same)
    assert len(rows) == 2 * 2 * (GRID.dims[2] + 1)
    for row in rows:
        assert row.ssim == pytest.approx(1.0, abs=1e-9)
        assert row.corr == pytest.approx(1.0, abs=1e-9)
        assert math.isnan(row.median_epe_mm)


def test_evaluate_row_order_and_truth_metrics(small_sequence):
    phases, model = small_sequence
    params = RegistrationParams()
    estimates = {"direct": _identity_estimate("direct", 3, params)}
    rows = evaluate_sequence(estimates, phases, model=model, pattern=PATTERN)
    assert [r.frame for r in rows[: GRID.dims[2] + 1]] == [2] * (GRID.dims[2] + 1)
    volume_rows = [r for r in rows if r.slice_index == "volume"]
    assert len(volume_rows) == 2
    for r in volume_rows:
        assert r.median_epe_mm >= 0.0
        assert 0.0 <= r.jump_fraction <= 1.0
    # identity estimate vs real motion: frame 3 error exceeds frame 2 error
    assert volume_rows[1].median_epe_mm > volume_rows[0].median_epe_mm


def test_worst_slice_selection():
    params = RegistrationParams()
    rows = [
        MetricRow("direct", 2, 0, 0.9, 0.9),
        MetricRow("direct", 2, 1, 0.4, 0.5),
        MetricRow("direct", 2, "volume", 0.7, 0.7),
        MetricRow("direct", 3, 0, 0.8, 0.8),
    ]
    worst = worst_slice_rows(rows)
    assert len(worst) == 2
    assert worst[0].slice_index == 1
    assert worst[1].frame == 3


def test_metric_row_validation():
    with pytest.raises(ValueError):
        MetricRow("direct", 2, 0, 1.5, 0.0)
    with pytest.raises(ValueError):
        MetricRow("direct", 2, 0, 0.5, 0.0, median_epe_mm=-1.0)
