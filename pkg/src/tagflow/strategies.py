"""Sequence-level motion estimation strategies.

Three ways to estimate the frame-1 -> frame-n deformation over a time
series:

* ``direct``: register frame 1 to frame n in one shot; fails by latching
  onto the wrong tag cycle once the true motion exceeds half a tag period.
* ``incremental``: register consecutive frames and compose the small
  deformations; immune to jumping but accumulates error over time.
* ``new_start``: sum the incremental stationary velocity fields and use the
  sum as the starting velocity of a final frame-1 -> frame-n registration,
  which begins inside the correct phase cycle and then refines.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .demons import RegistrationParams, RegistrationResult, project_divergence_free, register
from .harp import PhaseSet
from .tmv import read_volume, write_volume
from .volume import GridMismatchError, VectorVolume, compose_displacements

__all__ = [
    "METHODS",
    "SequenceEstimate",
    "run_direct",
    "run_incremental",
    "run_new_start",
    "accumulate_velocities",
    "pair_registrations",
    "save_estimate",
    "load_estimate",
]

METHODS = ("direct", "incremental", "new_start")


@dataclass
class SequenceEstimate:
    """Per-frame deformations from one strategy.

    ``deformations[i]`` maps frame n = i + 2 coordinates back to frame 1
    (pull-back convention). ``velocities`` holds the stationary velocity
    fields the method produced: one per frame for direct/new_start, one per
    consecutive pair for incremental. ``init_velocities`` additionally keeps
    the accumulated warm-start fields of new_start.
    """

    method: str
    deformations: list[VectorVolume]
    velocities: list[VectorVolume]
    params: RegistrationParams
    timing: list[float]
    init_velocities: list[VectorVolume] | None = None
    traces: list[tuple] | None = None  # one convergence trace per registration

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if len(self.deformations) != len(self.timing):
            raise ValueError("one timing entry per deformation required")

    @property
    def n_frames(self) -> int:
        return len(self.deformations) + 1


def _check_sequence(phases) -> list[PhaseSet]:
    phases = list(phases)
    if len(phases) < 2:
        raise ValueError("need at least two frames")
    grid = phases[0].grid
    for p in phases:
        if p.grid != grid:
            raise GridMismatchError("grid mismatch")
    return phases


def _run_indexed(tasks, jobs):
    """Run callables preserving order; results independent of jobs."""
    if jobs <= 1:
        return [t() for t in tasks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(t) for t in tasks]
        return [f.result() for f in futures]


def run_direct(
    phases,
    params: RegistrationParams | None = None,
    *,
    register_fn=register,
    jobs: int = 1,
) -> SequenceEstimate:
    """Register frame 1 to every later frame from a zero start."""
    phases = _check_sequence(phases)
    params = params or RegistrationParams()

    def task(n):
        def run():
            t0 = time.perf_counter()
            res = register_fn(phases[0], phases[n - 1], params, None)
            return res, time.perf_counter() - t0

        return run

    results = _run_indexed([task(n) for n in range(2, len(phases) + 1)], jobs)
    return SequenceEstimate(
        method="direct",
        deformations=[r.forward for r, _ in results],
        velocities=[r.velocity for r, _ in results],
        params=params,
        timing=[dt for _, dt in results],
        traces=[r.trace for r, _ in results],
    )


def pair_registrations(
    phases,
    params: RegistrationParams,
    cache: dict[int, tuple[RegistrationResult, float]] | None = None,
    *,
    register_fn=register,
    jobs: int = 1,
) -> list[tuple[RegistrationResult, float]]:
    """Registrations of consecutive pairs i -> i+1, i = 1..N-1.

    ``cache`` maps pair index to (result, seconds); passing the same dict to
    run_incremental and run_new_start makes them share the N-1 pair
    registrations instead of recomputing them.
    """
    phases = _check_sequence(phases)
    if cache is None:
        cache = {}
    missing = [i for i in range(1, len(phases)) if i not in cache]

    def task(i):
        def run():
            t0 = time.perf_counter()
            res = register_fn(phases[i - 1], phases[i], params, None)
            return i, res, time.perf_counter() - t0

        return run

    for i, res, dt in _run_indexed([task(i) for i in missing], jobs):
        cache[i] = (res, dt)
    return [cache[i] for i in range(1, len(phases))]


def run_incremental(
    phases,
    params: RegistrationParams | None = None,
    *,
    pair_cache: dict | None = None,
    register_fn=register,
    jobs: int = 1,
) -> SequenceEstimate:
    """Compose consecutive-pair deformations into frame-1 -> frame-n maps."""
    phases = _check_sequence(phases)
    params = params or RegistrationParams()
    if pair_cache is None:
        pair_cache = {}
    pairs = pair_registrations(phases, params, pair_cache, register_fn=register_fn, jobs=jobs)
    deformations = [pairs[0][0].forward]
    timing = [pairs[0][1]]
    for i in range(2, len(phases)):
        t0 = time.perf_counter()
        # psi_n(x) = phi_{n-1}(x) + psi_{n-1}(x + phi_{n-1}(x)): step from
        # frame n to n-1 first, then follow the accumulated map to frame 1.
        composed = compose_displacements(deformations[-1], pairs[i - 1][0].forward)
        deformations.append(composed)
        timing.append(pairs[i - 1][1] + (time.perf_counter() - t0))
    return SequenceEstimate(
        method="incremental",
        deformations=deformations,
        velocities=[p.velocity for p, _ in pairs],
        params=params,
        timing=timing,
        traces=[p.trace for p, _ in pairs],
    )


def accumulate_velocities(velocities) -> VectorVolume:
    """Voxelwise sum of stationary velocity fields, in ascending order.

    No smoothing and no projection; the sum is used verbatim as a warm
    start. The fold order is fixed (plain left fold) for bitwise
    reproducibility.
    """
    velocities = list(velocities)
    if not velocities:
        raise ValueError("empty velocity list")
    grid = velocities[0].grid
    total = np.zeros(grid.dims + (3,))
    for v in velocities:
        if v.grid != grid:
            raise GridMismatchError("grid mismatch")
        if v.kind != "velocity":
            raise ValueError(f"accumulate_velocities requires velocity fields, got {v.kind!r}")
        total += v.values
    return VectorVolume(grid, total, kind="velocity")


def run_new_start(
    phases,
    params: RegistrationParams | None = None,
    *,
    pair_cache: dict | None = None,
    register_fn=register,
    jobs: int = 1,
    project_init: bool = False,
) -> SequenceEstimate:
    """Warm-start every frame-1 -> frame-n registration from summed pair velocities.

    The accumulated velocity already points into the correct tag cycle, so
    the final registration refines instead of latching onto a neighboring
    cycle. ``project_init`` optionally projects each warm start
    divergence-free first (off by default: the sums are used raw).
    """
    phases = _check_sequence(phases)
    params = params or RegistrationParams()
    if pair_cache is None:
        pair_cache = {}
    pairs = pair_registrations(phases, params, pair_cache, register_fn=register_fn, jobs=jobs)
    inits = []
    for n in range(2, len(phases) + 1):
        warm = accumulate_velocities([p.velocity for p, _ in pairs[: n - 1]])
        if project_init:
            warm = project_divergence_free(warm)
        inits.append(warm)

    def task(n):
        def run():
            t0 = time.perf_counter()
            res = register_fn(phases[0], phases[n - 1], params, inits[n - 2])
            return res, time.perf_counter() - t0

        return run

    results = _run_indexed([task(n) for n in range(2, len(phases) + 1)], jobs)
    return SequenceEstimate(
        method="new_start",
        deformations=[r.forward for r, _ in results],
        velocities=[r.velocity for r, _ in results],
        params=params,
        timing=[dt for _, dt in results],
        init_velocities=inits,
        traces=[r.trace for r, _ in results],
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _params_lines(params: RegistrationParams) -> list[str]:
    threshold = "auto" if params.magnitude_threshold is None else repr(params.magnitude_threshold)
    return [
        "pvira.sigma_fluid_mm=" + ",".join(repr(s) for s in params.sigma_fluid_mm),
        "pvira.sigma_diffusion_mm=" + ",".join(repr(s) for s in params.sigma_diffusion_mm),
        f"pvira.sigma_i={params.sigma_i!r}",
        f"pvira.max_iters={params.max_iters}",
        f"pvira.step_max_voxels={params.step_max_voxels!r}",
        f"pvira.incompressible={'true' if params.incompressible else 'false'}",
        f"pvira.magnitude_threshold={threshold}",
        f"pvira.stop_tol={params.stop_tol!r}",
        f"pvira.boundary_taper={'true' if params.boundary_taper else 'false'}",
    ]


def _params_from_entries(entries: dict[str, str]) -> RegistrationParams:
    threshold = entries["pvira.magnitude_threshold"]
    return RegistrationParams(
        sigma_fluid_mm=tuple(float(v) for v in entries["pvira.sigma_fluid_mm"].split(",")),
        sigma_diffusion_mm=tuple(float(v) for v in entries["pvira.sigma_diffusion_mm"].split(",")),
        sigma_i=float(entries["pvira.sigma_i"]),
        max_iters=int(entries["pvira.max_iters"]),
        step_max_voxels=float(entries["pvira.step_max_voxels"]),
        incompressible=entries["pvira.incompressible"] == "true",
        magnitude_threshold=None if threshold == "auto" else float(threshold),
        stop_tol=float(entries["pvira.stop_tol"]),
        boundary_taper=entries.get("pvira.boundary_taper", "false") == "true",
    )


def save_estimate(estimate: SequenceEstimate, directory) -> None:
    """Persist one SequenceEstimate as a directory of TMV files + manifest.

    Deformations are psi_NN.tmv for frames n = 2..N. Velocities are
    v_NN.tmv: per frame for direct/new_start, per consecutive pair for
    incremental. new_start also keeps its warm starts as v_init_NN.tmv.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_frames = estimate.n_frames
    for i, psi in enumerate(estimate.deformations):
        write_volume(psi, directory / f"psi_{i + 2:02d}.tmv")
    velocity_offset = 2 if estimate.method in ("direct", "new_start") else 1
    for i, v in enumerate(estimate.velocities):
        write_volume(v, directory / f"v_{i + velocity_offset:02d}.tmv")
    if estimate.init_velocities is not None:
        for i, v in enumerate(estimate.init_velocities):
            write_volume(v, directory / f"v_init_{i + 2:02d}.tmv")
    lines = [
        "format=tagflow-estimate-v1",
        f"method={estimate.method}",
        f"frames={n_frames}",
        *_params_lines(estimate.params),
        "timing=" + ",".join(repr(t) for t in estimate.timing),
    ]
    (directory / "manifest.cfg").write_text("\n".join(lines) + "\n")


def load_estimate(directory) -> SequenceEstimate:
    directory = Path(directory)
    entries: dict[str, str] = {}
    for raw in (directory / "manifest.cfg").read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    if entries.get("format") != "tagflow-estimate-v1":
        raise ValueError(f"{directory}: unknown estimate manifest format")
    method = entries["method"]
    n_frames = int(entries["frames"])
    deformations = [
        read_volume(directory / f"psi_{n:02d}.tmv", vector_kind="displacement")
        for n in range(2, n_frames + 1)
    ]
    velocity_offset = 2 if method in ("direct", "new_start") else 1
    velocities = [
        read_volume(directory / f"v_{i + velocity_offset:02d}.tmv", vector_kind="velocity")
        for i in range(n_frames - 1)
    ]
    init_velocities = None
    if (directory / "v_init_02.tmv").exists():
        init_velocities = [
            read_volume(directory / f"v_init_{n:02d}.tmv", vector_kind="velocity")
            for n in range(2, n_frames + 1)
        ]
    timing = [float(t) for t in entries["timing"].split(",")] if entries.get("timing") else []
    return SequenceEstimate(
        method=method,
        deformations=deformations,
        velocities=velocities,
        params=_params_from_entries(entries),
        timing=timing,
        init_velocities=init_velocities,
    )
