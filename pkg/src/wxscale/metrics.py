"""Forecast verification metrics and the error-growth derivative.

Two RMSE flavors live here on purpose and differ:

* :func:`area_weighted_rmse` is the per-channel verification metric, with
  cos-latitude row weights (mean 1) compensating grid-cell shrinkage;
* :func:`pooled_rmse` is the scalar training-objective mirror: the square
  root of the unweighted mean squared difference over all channels and grid
  points. It applies no latitude weighting, matching the channel-uniform MSE
  objective rather than the verification metric; reports flag the
  discrepancy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import SchemaError, WxscaleError
from .grid import POOLED_CHANNEL, STEP_HOURS, FieldState, latitude_weights
from .util import atomic_write_text, fmt_float

METRICS_CSV_HEADER = ("run_id", "ic_timestamp", "lead_hours", "channel", "rmse")


@dataclass(frozen=True)
class MetricRecord:
    """One (run, IC, lead, channel) -> area-weighted RMSE observation."""

    run_id: str
    ic_timestamp: int
    lead_hours: int
    channel: str
    rmse: float

    def __post_init__(self) -> None:
        if self.lead_hours % STEP_HOURS != 0:
            raise WxscaleError(
                f"lead {self.lead_hours} h is not a multiple of the {STEP_HOURS} h step"
            )
        if not np.isfinite(self.rmse) or self.rmse < 0.0:
            raise WxscaleError(f"rmse must be finite and >= 0, got {self.rmse}")


@dataclass(frozen=True)
class ErrorGrowthCurve:
    """d(RMSE)/dt samples for one channel, units error per hour."""

    channel: str
    lead_hours: tuple[int, ...]
    d_rmse_dt: tuple[float, ...]


def _check_pair(pred: FieldState, truth: FieldState) -> None:
    if pred.schema != truth.schema:
        raise SchemaError("pred/truth schemas do not match")
    if pred.grid != truth.grid:
        raise SchemaError("pred/truth grids do not match")


def area_weighted_rmse(pred: FieldState, truth: FieldState) -> np.ndarray:
    """Per-channel RMSE with mean-1 cos-latitude row weights.

    rmse_c = sqrt( sum_jk w_j (pred - truth)^2_cjk / (n_lat * n_lon) ).
    """
    _check_pair(pred, truth)
    w = latitude_weights(pred.grid)
    sq = (pred.values - truth.values) ** 2
    weighted = sq * w[None, :, None]
    n_cells = pred.grid.n_lat * pred.grid.n_lon
    return np.sqrt(weighted.sum(axis=(1, 2)) / n_cells)


def pooled_rmse(pred: FieldState, truth: FieldState) -> float:
    """Unweighted RMSE over all channels and grid points (training-loss mirror)."""
    _check_pair(pred, truth)
    diff = pred.values - truth.values
    return float(np.sqrt(np.mean(diff * diff)))


def mse_loss(pred: FieldState, truth: FieldState) -> float:
    """Channel-uniform global MSE; the square of :func:`pooled_rmse`."""
    _check_pair(pred, truth)
    diff = pred.values - truth.values
    return float(np.mean(diff * diff))


def error_growth(
    leads: Sequence[int],
    rmse: Sequence[float],
    channel: str = "",
    smooth_window: int | None = None,
) -> ErrorGrowthCurve:
    """Finite-difference d(RMSE)/dt: central at interior leads, one-sided at ends.

    Callers average RMSE across ICs per (lead, channel) before calling. No
    smoothing by default; ``smooth_window`` applies a centered moving average
    of that odd width to the input series first.
    """
    t = np.asarray(leads, dtype=np.float64)
    y = np.asarray(rmse, dtype=np.float64)
    if t.shape != y.shape or t.ndim != 1:
        raise WxscaleError("leads and rmse must be 1-d and the same length")
    if t.size < 2:
        raise WxscaleError("error growth needs at least 2 points")
    if np.any(np.diff(t) <= 0):
        raise WxscaleError("leads must be strictly increasing (no duplicates)")
    if smooth_window is not None:
        if smooth_window < 1 or smooth_window % 2 == 0:
            raise WxscaleError("smooth window must be a positive odd integer")
        if smooth_window > 1:
            half = smooth_window // 2
            padded = np.concatenate([np.repeat(y[0], half), y, np.repeat(y[-1], half)])
            kernel = np.ones(smooth_window) / smooth_window
            y = np.convolve(padded, kernel, mode="valid")
    d = np.empty_like(y)
    d[0] = (y[1] - y[0]) / (t[1] - t[0])
    d[-1] = (y[-1] - y[-2]) / (t[-1] - t[-2])
    if t.size > 2:
        d[1:-1] = (y[2:] - y[:-2]) / (t[2:] - t[:-2])
    return ErrorGrowthCurve(channel, tuple(int(v) for v in leads), tuple(d.tolist()))


def write_metrics_csv(records: Iterable[MetricRecord], path: str | Path) -> None:
    lines = [",".join(METRICS_CSV_HEADER)]
    for r in records:
        lines.append(
            f"{r.run_id},{r.ic_timestamp},{r.lead_hours},{r.channel},{fmt_float(r.rmse)}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_metrics_csv(path: str | Path) -> list[MetricRecord]:
    records: list[MetricRecord] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_CSV_HEADER:
            raise WxscaleError(
                f"{path}: expected header {','.join(METRICS_CSV_HEADER)}, got {header}"
            )
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise WxscaleError(f"{path}:{i}: expected 5 columns, got {len(row)}")
            records.append(
                MetricRecord(
                    run_id=row[0],
                    ic_timestamp=int(row[1]),
                    lead_hours=int(row[2]),
                    channel=row[3],
                    rmse=float(row[4]),
                )
            )
    return records


__all__ = [
    "POOLED_CHANNEL",
    "METRICS_CSV_HEADER",
    "MetricRecord",
    "ErrorGrowthCurve",
    "area_weighted_rmse",
    "pooled_rmse",
    "mse_loss",
    "error_growth",
    "write_metrics_csv",
    "read_metrics_csv",
]
