"""End-to-end orchestration: phantom -> harp -> register -> evaluate.

Each stage reads its inputs from the output directory of the previous one
and writes TMV/cfg/csv artifacts, so running the stages individually through
the CLI and running the combined pipeline produce identical bytes. A run
manifest records the config hash and library versions.
"""

from __future__ import annotations

import logging
import os
import shutil
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import EvalConfig, PipelineConfig, config_hash
from .demons import register
from .harp import PhaseSet, default_filter_specs, extract_phase_set
from .metrics import evaluate_sequence, worst_slice_rows
from .phantom import (
    TagPattern,
    default_motion_model,
    jump_onset_frame,
    read_model_cfg,
    render_tagged_frame,
    write_model_cfg,
)
from .report import (
    render_similarity_figure,
    render_worst_slice_figure,
    write_metrics_csv,
    write_pgm,
)
from .strategies import (
    load_estimate,
    pair_registrations,
    run_direct,
    run_incremental,
    run_new_start,
    save_estimate,
)
from .tmv import read_volume, write_volume
from .volume import Grid3, ScalarVolume, wrap

__all__ = [
    "StageFailure",
    "stage_phantom",
    "stage_harp",
    "stage_register",
    "stage_evaluate",
    "run_pipeline",
    "load_phase_sets",
]

log = logging.getLogger("tagflow.pipeline")

STAGES = ("phantom", "harp", "register", "evaluate")


class StageFailure(RuntimeError):
    """A pipeline stage failed; the original error is the __cause__."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _frame_path(directory: Path, n: int) -> Path:
    return directory / f"frame_{n:02d}.tmv"


def _phase_path(directory: Path, n: int, d: int, what: str) -> Path:
    return directory / f"frame_{n:02d}_dir{d + 1}_{what}.tmv"


def _grid_from_config(config: PipelineConfig) -> Grid3:
    p = config.phantom
    return Grid3(p.dims, p.spacing_mm, p.origin_mm)


def stage_phantom(config: PipelineConfig, out_dir, jobs: int = 1) -> Path:
    """Render the tagged sequence and write frames + model sidecar."""
    p = config.phantom
    grid = _grid_from_config(config)
    model = default_motion_model(grid, p.frames, p.peak_displacement_mm, p.tag_period_mm)
    pattern = _pattern_from_config(config)
    directory = Path(out_dir) / "phantom"
    directory.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(p.seed).spawn(p.frames)

    def render(n):
        rng = np.random.default_rng(seeds[n - 1])
        frame = render_tagged_frame(model, pattern, grid, n, p.noise_sigma, rng)
        write_volume(frame, _frame_path(directory, n))

    _run_tasks([lambda n=n: render(n) for n in range(1, p.frames + 1)], jobs)
    write_model_cfg(directory / "model.cfg", model, pattern, grid, p.seed, p.noise_sigma)
    log.info("phantom: wrote %d frames to %s", p.frames, directory)
    return directory


def _pattern_from_config(config: PipelineConfig) -> TagPattern:
    from .phantom import default_tag_pattern

    return default_tag_pattern(config.phantom.tag_period_mm, config.phantom.tag_period_z_mm)


def _run_tasks(tasks, jobs):
    if jobs <= 1:
        for t in tasks:
            t()
        return
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for f in [pool.submit(t) for t in tasks]:
            f.result()


def stage_harp(config: PipelineConfig, out_dir, jobs: int = 1) -> Path:
    """Extract three phase/magnitude volumes per frame."""
    out_dir = Path(out_dir)
    phantom_dir = out_dir / "phantom"
    model_cfg = phantom_dir / "model.cfg"
    if not model_cfg.exists():
        raise FileNotFoundError(f"missing phantom outputs: {model_cfg}")
    _, pattern, _, _, _ = read_model_cfg(model_cfg)
    specs = default_filter_specs(
        pattern, config.harp.radius_fraction, config.harp.profile, config.harp.rolloff
    )
    directory = out_dir / "harp"
    directory.mkdir(parents=True, exist_ok=True)
    n_frames = config.phantom.frames

    def extract(n):
        path = _frame_path(phantom_dir, n)
        if not path.exists():
            raise FileNotFoundError(f"missing phantom frame: {path}")
        frame = read_volume(path)
        phase_set = extract_phase_set(frame, specs)
        for d in range(3):
            write_volume(phase_set.phases[d], _phase_path(directory, n, d, "phase"))
            write_volume(phase_set.magnitudes[d], _phase_path(directory, n, d, "mag"))

    _run_tasks([lambda n=n: extract(n) for n in range(1, n_frames + 1)], jobs)
    log.info("harp: wrote %d volumes to %s", n_frames * 6, directory)
    return directory


def load_phase_sets(config: PipelineConfig, out_dir) -> list[PhaseSet]:
    """Rebuild the per-frame PhaseSets from the harp stage outputs.

    Stored phases are f32-quantized, which can nudge values just past pi;
    they are re-wrapped on load.
    """
    out_dir = Path(out_dir)
    harp_dir = out_dir / "harp"
    _, pattern, _, _, _ = read_model_cfg(out_dir / "phantom" / "model.cfg")
    specs = default_filter_specs(
        pattern, config.harp.radius_fraction, config.harp.profile, config.harp.rolloff
    )
    phase_sets = []
    for n in range(1, config.phantom.frames + 1):
        phases = []
        magnitudes = []
        for d in range(3):
            path = _phase_path(harp_dir, n, d, "phase")
            if not path.exists():
                raise FileNotFoundError(f"missing harp output: {path}")
            raw = read_volume(path)
            phases.append(ScalarVolume(raw.grid, wrap(raw.values)))
            mag = read_volume(_phase_path(harp_dir, n, d, "mag"))
            magnitudes.append(ScalarVolume(mag.grid, np.maximum(mag.values, 0.0)))
        phase_sets.append(PhaseSet(tuple(phases), tuple(magnitudes), specs))
    return phase_sets


def stage_register(config: PipelineConfig, out_dir, jobs: int = 1, trace: bool = False) -> Path:
    """Run the configured strategies and persist one directory per method.

    Incremental and new_start share their consecutive-pair registrations.
    Each method directory is written atomically (staged under a temporary
    name, renamed on success) so failures leave no partial results.
    """
    out_dir = Path(out_dir)
    phases = load_phase_sets(config, out_dir)
    directory = out_dir / "register"
    directory.mkdir(parents=True, exist_ok=True)
    params = config.registration
    pair_cache: dict = {}
    runners = {
        "direct": lambda: run_direct(phases, params, jobs=jobs),
        "incremental": lambda: run_incremental(phases, params, pair_cache=pair_cache, jobs=jobs),
        "new_start": lambda: run_new_start(
            phases, params, pair_cache=pair_cache, jobs=jobs, project_init=config.project_init
        ),
    }
    for method in config.methods:
        t0 = time.perf_counter()
        estimate = runners[method]()
        target = directory / method
        staging = directory / f".tmp_{method}"
        if staging.exists():
            shutil.rmtree(staging)
        try:
            save_estimate(estimate, staging)
            if trace:
                _write_traces(estimate, staging)
        except BaseException:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        if target.exists():
            shutil.rmtree(target)
        os.replace(staging, target)
        log.info("register: %s done in %.1fs", method, time.perf_counter() - t0)
    return directory


def _write_traces(estimate, directory: Path) -> None:
    if estimate.traces is None:
        return
    # Trace indices follow the velocity files: pair index for incremental,
    # target frame for direct/new_start.
    offset = 1 if estimate.method == "incremental" else 2
    for i, trace in enumerate(estimate.traces):
        lines = ["iteration,mean_phase_err,max_update"]
        for it, err, upd in trace:
            lines.append(f"{it},{format(err, '.12g')},{format(upd, '.12g')}")
        (directory / f"trace_{i + offset:02d}.csv").write_text("\n".join(lines) + "\n")


def stage_evaluate(config: PipelineConfig, out_dir, jobs: int = 1):
    """Score the persisted estimates; write metrics.csv, figures, PGM dumps."""
    out_dir = Path(out_dir)
    model, pattern, grid, _, _ = read_model_cfg(out_dir / "phantom" / "model.cfg")
    phases = load_phase_sets(config, out_dir)
    estimates = {}
    for method in config.methods:
        method_dir = out_dir / "register" / method
        if not method_dir.exists():
            raise FileNotFoundError(f"missing registration outputs: {method_dir}")
        estimates[method] = load_estimate(method_dir)
    e: EvalConfig = config.evaluation
    rows = evaluate_sequence(
        estimates,
        phases,
        model=model,
        pattern=pattern,
        window=e.window,
        ssim_mode=e.ssim_mode,
        margin=e.interior_margin_voxels,
        magnitude_mask=e.magnitude_mask,
    )
    directory = out_dir / "evaluate"
    directory.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, directory / "metrics.csv")
    onset = jump_onset_frame(model, pattern)
    render_similarity_figure(rows, directory / "similarity_vs_frame.svg", onset)
    render_worst_slice_figure(rows, directory / "worst_slice_vs_frame.svg", onset)
    if e.write_pgm:
        _dump_worst_slices(rows, estimates, phases, directory / "pgm")
    log.info("evaluate: %d metric rows -> %s", len(rows), directory)
    return rows


def _dump_worst_slices(rows, estimates, phases, directory: Path) -> None:
    from .metrics import deformed_phase

    directory.mkdir(parents=True, exist_ok=True)
    for row in worst_slice_rows(rows):
        est = estimates[row.method]
        deformed = deformed_phase(est.deformations[row.frame - 2], phases[0])
        slice_2d = deformed.phases[0].values[:, :, row.slice_index]
        write_pgm(slice_2d, directory / f"{row.method}_frame{row.frame:02d}_slice{row.slice_index:02d}.pgm")


def run_pipeline(config: PipelineConfig, out_dir=None, jobs: int = 1, trace: bool = False):
    """phantom -> harp -> register -> evaluate; abort on the first failure."""
    out_dir = Path(out_dir if out_dir is not None else config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = {
        "phantom": lambda: stage_phantom(config, out_dir, jobs),
        "harp": lambda: stage_harp(config, out_dir, jobs),
        "register": lambda: stage_register(config, out_dir, jobs, trace),
        "evaluate": lambda: stage_evaluate(config, out_dir, jobs),
    }
    t0 = time.perf_counter()
    for name in STAGES:
        try:
            stages[name]()
        except Exception as exc:
            raise StageFailure(name, exc) from exc
    manifest = [
        "format=tagflow-run-v1",
        f"config_sha256={config_hash(config)}",
        f"tagflow_version={__version__}",
        f"numpy_version={np.__version__}",
        f"scipy_version={scipy.__version__}",
        "stages=" + ",".join(STAGES),
    ]
    (out_dir / "run_manifest.cfg").write_text("\n".join(manifest) + "\n")
    log.info("pipeline: completed in %.1fs -> %s", time.perf_counter() - t0, out_dir)
    return out_dir
