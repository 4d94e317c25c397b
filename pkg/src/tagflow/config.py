"""Pipeline configuration: flat key=value text with dotted namespaces.

Parsing is fail-closed: unknown keys, duplicate keys and out-of-range values
are rejected before any computation starts. ``parse_config`` returns a fully
typed PipelineConfig; ``canonical_text`` serializes it back in sorted-key
form, which is what gets hashed into the run manifest.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .demons import RegistrationParams

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "PhantomConfig",
    "HarpConfig",
    "EvalConfig",
    "parse_config",
    "parse_config_file",
    "canonical_text",
    "config_hash",
    "default_config_text",
]


class ConfigError(ValueError):
    """Invalid configuration or usage."""


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 24)
    spacing_mm: tuple[float, float, float] = (1.875, 1.875, 6.0)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    frames: int = 26
    tag_period_mm: float = 12.0
    tag_period_z_mm: float = 36.0
    peak_displacement_mm: float | None = None  # None -> 1.2 * tag_period / 2
    noise_sigma: float = 0.0
    seed: int = 42


@dataclass(frozen=True)
class HarpConfig:
    radius_fraction: float = 0.4
    profile: str = "raised_cosine"
    rolloff: float = 0.25


@dataclass(frozen=True)
class EvalConfig:
    window: int = 7
    ssim_mode: str = "wrapped"
    interior_margin_voxels: int = 3
    magnitude_mask: bool = False
    write_pgm: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    harp: HarpConfig = field(default_factory=HarpConfig)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    methods: tuple[str, ...] = ("direct", "incremental", "new_start")
    project_init: bool = False
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "tagflow_out"


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_int(raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {raw!r}") from exc


def _parse_float(raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {raw!r}") from exc


def _parse_triple(parse_one):
    def inner(raw: str):
        parts = [p for p in raw.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"expected three comma-separated values, got {raw!r}")
        return tuple(parse_one(p) for p in parts)

    return inner


def _parse_methods(raw: str) -> tuple[str, ...]:
    methods = tuple(m.strip() for m in raw.split(",") if m.strip())
    if not methods:
        raise ConfigError("strategies.methods must list at least one method")
    seen = set()
    for m in methods:
        if m not in ("direct", "incremental", "new_start"):
            raise ConfigError(f"unknown method {m!r}")
        if m in seen:
            raise ConfigError(f"method {m!r} listed twice")
        seen.add(m)
    return methods


def _parse_threshold(raw: str):
    if raw.strip().lower() == "auto":
        return None
    value = _parse_float(raw)
    if value < 0:
        raise ConfigError("pvira.magnitude_threshold must be >= 0 or 'auto'")
    return value


def _positive(value, key):
    if not value > 0:
        raise ConfigError(f"{key} must be positive, got {value}")
    return value


def _nonnegative(value, key):
    if value < 0:
        raise ConfigError(f"{key} must be >= 0, got {value}")
    return value


# key -> (parser, validator). Validators run on the parsed value.
_SCHEMA = {
    "phantom.dims": (_parse_triple(_parse_int), lambda v, k: v),
    "phantom.spacing_mm": (_parse_triple(_parse_float), lambda v, k: tuple(_positive(s, k) for s in v)),
    "phantom.origin_mm": (_parse_triple(_parse_float), lambda v, k: v),
    "phantom.frames": (_parse_int, lambda v, k: _positive(v, k)),
    "phantom.tag_period_mm": (_parse_float, lambda v, k: _positive(v, k)),
    "phantom.tag_period_z_mm": (_parse_float, lambda v, k: _positive(v, k)),
    "phantom.peak_displacement_mm": (_parse_float, lambda v, k: _positive(v, k)),
    "phantom.noise_sigma": (_parse_float, lambda v, k: _nonnegative(v, k)),
    "phantom.seed": (_parse_int, lambda v, k: _nonnegative(v, k)),
    "harp.radius_fraction": (_parse_float, lambda v, k: _positive(v, k)),
    "harp.profile": (str.strip, lambda v, k: v),
    "harp.rolloff": (_parse_float, lambda v, k: _nonnegative(v, k)),
    "pvira.sigma_fluid_mm": (_parse_triple(_parse_float), lambda v, k: tuple(_nonnegative(s, k) for s in v)),
    "pvira.sigma_diffusion_mm": (_parse_triple(_parse_float), lambda v, k: tuple(_nonnegative(s, k) for s in v)),
    "pvira.sigma_i": (_parse_float, lambda v, k: _positive(v, k)),
    "pvira.max_iters": (_parse_int, lambda v, k: _positive(v, k)),
    "pvira.step_max_voxels": (_parse_float, lambda v, k: _positive(v, k)),
    "pvira.incompressible": (_parse_bool, lambda v, k: v),
    "pvira.magnitude_threshold": (_parse_threshold, lambda v, k: v),
    "pvira.stop_tol": (_parse_float, lambda v, k: _nonnegative(v, k)),
    "pvira.boundary_taper": (_parse_bool, lambda v, k: v),
    "strategies.methods": (_parse_methods, lambda v, k: v),
    "strategies.project_init": (_parse_bool, lambda v, k: v),
    "eval.window": (_parse_int, lambda v, k: v),
    "eval.ssim_mode": (str.strip, lambda v, k: v),
    "eval.interior_margin_voxels": (_parse_int, lambda v, k: _nonnegative(v, k)),
    "eval.magnitude_mask": (_parse_bool, lambda v, k: v),
    "eval.write_pgm": (_parse_bool, lambda v, k: v),
    "output.dir": (str.strip, lambda v, k: v),
}


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    """Parse and validate; any unknown key or bad value raises ConfigError."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        parser, validator = _SCHEMA[key]
        try:
            values[key] = validator(parser(raw_value), key)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None

    def get(key, default):
        return values.get(key, default)

    phantom = PhantomConfig(
        dims=get("phantom.dims", PhantomConfig.dims),
        spacing_mm=get("phantom.spacing_mm", PhantomConfig.spacing_mm),
        origin_mm=get("phantom.origin_mm", PhantomConfig.origin_mm),
        frames=get("phantom.frames", PhantomConfig.frames),
        tag_period_mm=get("phantom.tag_period_mm", PhantomConfig.tag_period_mm),
        tag_period_z_mm=get("phantom.tag_period_z_mm", PhantomConfig.tag_period_z_mm),
        peak_displacement_mm=get("phantom.peak_displacement_mm", None),
        noise_sigma=get("phantom.noise_sigma", PhantomConfig.noise_sigma),
        seed=get("phantom.seed", PhantomConfig.seed),
    )
    if phantom.frames < 2:
        raise ConfigError("phantom.frames must be >= 2")
    if any(d < 2 for d in phantom.dims):
        raise ConfigError("phantom.dims components must be >= 2")
    harp = HarpConfig(
        radius_fraction=get("harp.radius_fraction", HarpConfig.radius_fraction),
        profile=get("harp.profile", HarpConfig.profile),
        rolloff=get("harp.rolloff", HarpConfig.rolloff),
    )
    if harp.profile not in ("raised_cosine", "hard_sphere"):
        raise ConfigError(f"harp.profile must be raised_cosine or hard_sphere, got {harp.profile!r}")
    if not 0.0 <= harp.rolloff <= 1.0:
        raise ConfigError("harp.rolloff must lie in [0, 1]")
    if not harp.radius_fraction < 1.0:
        raise ConfigError("harp.radius_fraction must be < 1 (filter may not reach DC)")
    defaults = RegistrationParams()
    try:
        registration = RegistrationParams(
            sigma_fluid_mm=get("pvira.sigma_fluid_mm", defaults.sigma_fluid_mm),
            sigma_diffusion_mm=get("pvira.sigma_diffusion_mm", defaults.sigma_diffusion_mm),
            sigma_i=get("pvira.sigma_i", defaults.sigma_i),
            max_iters=get("pvira.max_iters", defaults.max_iters),
            step_max_voxels=get("pvira.step_max_voxels", defaults.step_max_voxels),
            incompressible=get("pvira.incompressible", defaults.incompressible),
            magnitude_threshold=get("pvira.magnitude_threshold", defaults.magnitude_threshold),
            stop_tol=get("pvira.stop_tol", defaults.stop_tol),
            boundary_taper=get("pvira.boundary_taper", defaults.boundary_taper),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    evaluation = EvalConfig(
        window=get("eval.window", EvalConfig.window),
        ssim_mode=get("eval.ssim_mode", EvalConfig.ssim_mode),
        interior_margin_voxels=get("eval.interior_margin_voxels", EvalConfig.interior_margin_voxels),
        magnitude_mask=get("eval.magnitude_mask", EvalConfig.magnitude_mask),
        write_pgm=get("eval.write_pgm", EvalConfig.write_pgm),
    )
    if evaluation.window % 2 != 1 or evaluation.window < 3:
        raise ConfigError("eval.window must be odd and >= 3")
    if evaluation.ssim_mode not in ("wrapped", "sincos"):
        raise ConfigError(f"eval.ssim_mode must be wrapped or sincos, got {evaluation.ssim_mode!r}")
    return PipelineConfig(
        phantom=phantom,
        harp=harp,
        registration=registration,
        methods=get("strategies.methods", PipelineConfig.methods),
        project_init=get("strategies.project_init", False),
        evaluation=evaluation,
        output_dir=get("output.dir", PipelineConfig.output_dir),
    )


def parse_config_file(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_text(config: PipelineConfig) -> str:
    """Sorted-key serialization; parsing it back reproduces the config."""
    p, h, r, e = config.phantom, config.harp, config.registration, config.evaluation
    entries = {
        "phantom.dims": p.dims,
        "phantom.spacing_mm": p.spacing_mm,
        "phantom.origin_mm": p.origin_mm,
        "phantom.frames": p.frames,
        "phantom.tag_period_mm": p.tag_period_mm,
        "phantom.tag_period_z_mm": p.tag_period_z_mm,
        "phantom.noise_sigma": p.noise_sigma,
        "phantom.seed": p.seed,
        "harp.radius_fraction": h.radius_fraction,
        "harp.profile": h.profile,
        "harp.rolloff": h.rolloff,
        "pvira.sigma_fluid_mm": r.sigma_fluid_mm,
        "pvira.sigma_diffusion_mm": r.sigma_diffusion_mm,
        "pvira.sigma_i": r.sigma_i,
        "pvira.max_iters": r.max_iters,
        "pvira.step_max_voxels": r.step_max_voxels,
        "pvira.incompressible": r.incompressible,
        "pvira.magnitude_threshold": "auto" if r.magnitude_threshold is None else r.magnitude_threshold,
        "pvira.stop_tol": r.stop_tol,
        "pvira.boundary_taper": r.boundary_taper,
        "strategies.methods": config.methods,
        "strategies.project_init": config.project_init,
        "eval.window": e.window,
        "eval.ssim_mode": e.ssim_mode,
        "eval.interior_margin_voxels": e.interior_margin_voxels,
        "eval.magnitude_mask": e.magnitude_mask,
        "eval.write_pgm": e.write_pgm,
        "output.dir": config.output_dir,
    }
    if p.peak_displacement_mm is not None:
        entries["phantom.peak_displacement_mm"] = p.peak_displacement_mm
    return "\n".join(f"{k}={_fmt_value(entries[k])}" for k in sorted(entries)) + "\n"


def config_hash(config: PipelineConfig) -> str:
    return hashlib.sha256(canonical_text(config).encode()).hexdigest()


def default_config_text() -> str:
    return canonical_text(PipelineConfig())
