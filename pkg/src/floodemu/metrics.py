"""Scoring suite: RMSE, NSE, wet/dry confusion scores, error maps,
percentile errors, descriptive statistics, and control-point extraction.

All functions are pure. Cells holding the nodata sentinel are excluded
everywhere; undefined ratios are reported as None rather than 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import CellIndex, RasterGrid, check_compatible

WET_THRESHOLD = 0.3


@dataclass(frozen=True)
class MetricsReport:
    rmse: float | None = None
    nse: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    confusion: tuple[int, int, int, int] | None = None  # tp, fp, fn, tn
    n: int = 0
    notes: str = ""


@dataclass(frozen=True)
class ControlPoint:
    label: str
    cell: CellIndex


def rmse(observed, predicted) -> float:
    observed = np.asarray(observed, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if observed.shape != predicted.shape:
        raise ValueError("length mismatch")
    if observed.size == 0:
        raise ValueError("empty input")
    return float(np.sqrt(np.mean((observed - predicted) ** 2)))


def nse(observed, predicted) -> float:
    """Nash-Sutcliffe efficiency; 1 is perfect, negative means worse than
    the mean-observation predictor."""
    observed = np.asarray(observed, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if observed.shape != predicted.shape:
        raise ValueError("length mismatch")
    denom = float(np.sum((observed - observed.mean()) ** 2))
    if denom == 0.0:
        raise ValueError("observed series is constant; NSE undefined")
    return 1.0 - float(np.sum((observed - predicted) ** 2)) / denom


def confusion_scores(reference: RasterGrid, predicted: RasterGrid,
                     tau: float = WET_THRESHOLD) -> MetricsReport:
    """Wet/dry classification scores of predicted against reference."""
    check_compatible(reference, predicted)
    live = reference.mask() & predicted.mask()
    ref_wet = reference.values[live] > tau
    pred_wet = predicted.values[live] > tau
    tp = int(np.sum(ref_wet & pred_wet))
    fp = int(np.sum(~ref_wet & pred_wet))
    fn = int(np.sum(ref_wet & ~pred_wet))
    tn = int(np.sum(~ref_wet & ~pred_wet))
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = None
    notes = "" if precision is not None and recall is not None else "undefined ratio (empty class)"
    return MetricsReport(precision=precision, recall=recall, f1=f1,
                         confusion=(tp, fp, fn, tn), n=int(live.sum()), notes=notes)


def error_map(reference: RasterGrid, predicted: RasterGrid) -> RasterGrid:
    """Per-cell absolute depth difference; nodata propagates."""
    check_compatible(reference, predicted)
    live = reference.mask() & predicted.mask()
    vals = np.where(live, np.abs(reference.values - predicted.values), reference.nodata)
    return reference.with_values(vals)


def percentile_error(errmap: RasterGrid, p: float = 99.0) -> float:
    """Nearest-rank percentile of the error over non-nodata cells."""
    if not 0 < p <= 100:
        raise ValueError("p must lie in (0, 100]")
    vals = np.sort(errmap.values[errmap.mask()])
    if vals.size == 0:
        raise ValueError("empty domain")
    rank = int(np.ceil(p / 100.0 * vals.size))
    return float(vals[rank - 1])


def descriptive_stats(grid: RasterGrid) -> tuple[float, float, float]:
    """(max, mean, std) over non-nodata cells, dry cells counted as 0."""
    vals = grid.values[grid.mask()]
    if vals.size == 0:
        raise ValueError("empty domain")
    return float(vals.max()), float(vals.mean()), float(vals.std())


def control_point_series(depth_maps, points, tau: float = WET_THRESHOLD) -> dict[str, np.ndarray]:
    """Thresholded depth time series per control point.

    depth_maps is a sequence of depth rasters (e.g. ScenarioRun.depths or
    predicted maps), all grid-compatible.
    """
    maps = list(depth_maps)
    out = {}
    for pt in points:
        if not maps[0].in_bounds(pt.cell):
            raise IndexError(f"control point {pt.label!r} at {pt.cell} out of bounds")
        series = np.array([m.values[pt.cell.row, pt.cell.col] for m in maps])
        series = np.where(series > tau, series, 0.0)
        out[pt.label] = series
    return out


def report_csv_row(time_s: float, report: MetricsReport, extra: dict | None = None) -> str:
    """One CSV line of the stage report; None renders as 'undefined'."""
    def fmt(v):
        return "undefined" if v is None else repr(float(v))

    tp, fp, fn, tn = report.confusion if report.confusion else (0, 0, 0, 0)
    cells = [repr(float(time_s)), fmt(report.rmse), fmt(report.nse), fmt(report.precision),
             fmt(report.recall), fmt(report.f1), str(tp), str(fp), str(fn), str(tn)]
    if extra:
        cells.extend(fmt(v) for v in extra.values())
    return ",".join(cells)
