"""Discharge time series, peak-rescaling, and upstream boundary assembly."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError
from .raster import CellIndex, RasterGrid


@dataclass(frozen=True)
class Hydrograph:
    """Uniformly sampled discharge series (m3/s) at one boundary point."""

    flows: np.ndarray = field(repr=False)
    dt: float = 900.0
    t0: float = 0.0

    def __post_init__(self):
        flows = np.asarray(self.flows, dtype=np.float64)
        if flows.ndim != 1 or flows.size < 2:
            raise ValueError("a hydrograph needs at least two samples")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not np.all(np.isfinite(flows)) or np.any(flows < 0):
            raise ValueError("flows must be finite and non-negative")
        flows.setflags(write=False)
        object.__setattr__(self, "flows", flows)

    def __len__(self):
        return self.flows.size

    @property
    def peak(self) -> float:
        return float(self.flows.max())

    @property
    def duration(self) -> float:
        return (self.flows.size - 1) * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.flows.size)

    def flow_at(self, t: float) -> float:
        """Linear interpolation; constant extension beyond the series."""
        return float(np.interp(t, self.times(), self.flows))


@dataclass(frozen=True)
class BoundarySet:
    """Labelled inflow points with time-aligned hydrographs."""

    entries: tuple[tuple[str, CellIndex, Hydrograph], ...]

    def __post_init__(self):
        entries = tuple((str(lbl), CellIndex(*cell) if not isinstance(cell, CellIndex) else cell, h)
                        for lbl, cell, h in self.entries)
        if not entries:
            raise ValueError("boundary set cannot be empty")
        ref = entries[0][2]
        for lbl, _, h in entries[1:]:
            if h.dt != ref.dt or len(h) != len(ref):
                raise AlignmentError(f"hydrograph {lbl!r} not aligned with {entries[0][0]!r}")
        cells = [cell for _, cell, _ in entries]
        if len(set(cells)) != len(cells):
            raise ValueError("boundary cells must be distinct")
        object.__setattr__(self, "entries", entries)

    @property
    def dt(self) -> float:
        return self.entries[0][2].dt

    @property
    def length(self) -> int:
        return len(self.entries[0][2])

    def hydrographs(self) -> list[Hydrograph]:
        return [h for _, _, h in self.entries]


def scale_hydrograph(obs: Hydrograph, peak_max: float) -> Hydrograph:
    """Rescale a series so its peak hits peak_max, preserving shape.

    Requires peak_max above the observed peak; the ratio of any two flows
    is unchanged by the scaling.
    """
    q_max = obs.peak
    if q_max <= 0:
        raise ValueError("observed peak must be positive")
    if peak_max <= q_max:
        raise ValueError(f"peak_max ({peak_max}) must exceed the observed peak ({q_max})")
    return Hydrograph(flows=obs.flows * (peak_max / q_max), dt=obs.dt, t0=obs.t0)


def resample_to_step(h: Hydrograph, dt_new: float) -> Hydrograph:
    """Linear interpolation onto a new uniform step; endpoints preserved."""
    if dt_new <= 0:
        raise ValueError("dt_new must be positive")
    if dt_new == h.dt:
        return h
    t_old = h.times()
    n_new = int(round(h.duration / dt_new)) + 1
    t_new = h.t0 + dt_new * np.arange(n_new)
    flows = np.interp(t_new, t_old, h.flows)
    return Hydrograph(flows=flows, dt=dt_new, t0=h.t0)


def make_boundary_set(dem: RasterGrid, points, hydros) -> BoundarySet:
    """Pair labelled inflow cells with hydrographs, validating alignment.

    Warns when the first ("main") entry's peak is not the largest: tributary
    inflows are expected to stay below the main stem.
    """
    if len(points) != len(hydros):
        raise AlignmentError("points and hydrographs must have equal length")
    for label, cell in points:
        cell = CellIndex(*cell) if not isinstance(cell, CellIndex) else cell
        if not dem.in_bounds(cell):
            raise IndexError(f"boundary cell {cell} for {label!r} outside the DEM")
    entries = tuple((label, CellIndex(*cell) if not isinstance(cell, CellIndex) else cell, h)
                    for (label, cell), h in zip(points, hydros))
    bset = BoundarySet(entries=entries)
    peaks = [h.peak for h in bset.hydrographs()]
    if len(peaks) > 1 and peaks[0] < max(peaks[1:]):
        warnings.warn(
            f"main inflow {entries[0][0]!r} peak ({peaks[0]:.3g}) is below a tributary peak "
            f"({max(peaks[1:]):.3g}); expected the main stem to dominate",
            stacklevel=2,
        )
    return bset


def hydrograph_to_csv(h: Hydrograph) -> str:
    lines = ["time_s,flow_m3s"]
    lines.extend(f"{float(t)!r},{float(q)!r}" for t, q in zip(h.times(), h.flows))
    return "\n".join(lines) + "\n"


def hydrograph_from_csv(text: str) -> Hydrograph:
    rows = [line.split(",") for line in text.strip().splitlines()[1:]]
    times = np.array([float(r[0]) for r in rows])
    flows = np.array([float(r[1]) for r in rows])
    if times.size < 2:
        raise ValueError("need at least two samples")
    dts = np.diff(times)
    if not np.allclose(dts, dts[0]):
        raise AlignmentError("CSV time base is not uniform")
    return Hydrograph(flows=flows, dt=float(dts[0]), t0=float(times[0]))
