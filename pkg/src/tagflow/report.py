"""Evaluation outputs: delimited metrics, SVG charts, PGM slice dumps.

The CSV schema is fixed (header below, one row per method/frame/slice plus a
"volume" aggregate row). Charts are rendered with matplotlib and saved as
SVG next to the CSV; rendering is configured for byte-stable output so
repeated runs produce identical files.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "tagflow"

import matplotlib.pyplot as plt

from .metrics import MetricRow, worst_slice_rows

__all__ = [
    "CSV_HEADER",
    "write_metrics_csv",
    "read_metrics_csv",
    "render_similarity_figure",
    "render_worst_slice_figure",
    "write_pgm",
]

CSV_HEADER = "method,frame,slice,ssim,corr,median_epe_mm,max_epe_mm,jump_fraction"

_SVG_METADATA = {"Date": None}  # drop the creation timestamp

_METHOD_STYLE = {
    "direct": dict(color="#d62728", marker="o"),
    "incremental": dict(color="#1f77b4", marker="s"),
    "new_start": dict(color="#2ca02c", marker="^"),
}


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return format(x, ".12g")


def write_metrics_csv(rows: list[MetricRow], path) -> None:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.method},{r.frame},{r.slice_index},{_fmt(r.ssim)},{_fmt(r.corr)},"
            f"{_fmt(r.median_epe_mm)},{_fmt(r.max_epe_mm)},{_fmt(r.jump_fraction)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path) -> list[MetricRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected metrics.csv header")
    rows = []
    for line in lines[1:]:
        method, frame, slc, s, c, med, mx, jump = line.split(",")
        rows.append(
            MetricRow(
                method,
                int(frame),
                slc if slc == "volume" else int(slc),
                float(s),
                float(c),
                float(med),
                float(mx),
                float(jump),
            )
        )
    return rows


def _per_method_series(rows, metric):
    series: dict[str, tuple[list[int], list[float]]] = {}
    for r in rows:
        frames, values = series.setdefault(r.method, ([], []))
        frames.append(r.frame)
        values.append(getattr(r, metric))
    return series


def _plot_series(ax, series, ylabel):
    for method, (frames, values) in series.items():
        style = _METHOD_STYLE.get(method, {})
        ax.plot(frames, values, label=method, markersize=3, linewidth=1.2, **style)
    ax.set_xlabel("time frame")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)


def _render_ssim_corr(rows, path, title, onset_frame=None):
    fig, (ax_ssim, ax_corr) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    _plot_series(ax_ssim, _per_method_series(rows, "ssim"), "SSIM")
    _plot_series(ax_corr, _per_method_series(rows, "corr"), "CORR")
    if onset_frame is not None:
        for ax in (ax_ssim, ax_corr):
            ax.axvline(onset_frame, color="green", linestyle="--", linewidth=1.0, alpha=0.7)
    ax_ssim.legend(fontsize=8)
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)


def render_similarity_figure(rows: list[MetricRow], path, onset_frame: int | None = None) -> None:
    """Slice-averaged SSIM and CORR versus frame, one line per method."""
    volume_rows = [r for r in rows if r.slice_index == "volume"]
    _render_ssim_corr(volume_rows, path, "slice-averaged similarity to extracted phases",
                      onset_frame)


def render_worst_slice_figure(rows: list[MetricRow], path, onset_frame: int | None = None) -> None:
    """SSIM and CORR of the most severely affected slice per frame."""
    _render_ssim_corr(worst_slice_rows(rows), path, "most affected slice per frame", onset_frame)


def write_pgm(values: np.ndarray, path, vmin: float = -math.pi, vmax: float = math.pi) -> None:
    """8-bit binary PGM (P5) of a 2D array, values clipped to [vmin, vmax].

    Rows of the file are y lines, so the array's first axis (x) runs along
    the raster width.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("PGM dump needs a 2D array")
    scaled = np.clip((values - vmin) / (vmax - vmin), 0.0, 1.0)
    gray = np.round(scaled * 255.0).astype(np.uint8)
    width, height = gray.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.T.tobytes())
