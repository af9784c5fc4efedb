"""Synthetic desk-scale catchment: DEM, defences, hydrographs, control points.

The generated site is a tilted floodplain draining north with a burned main
channel fed from the south edge and two tributaries entering from the west
and east edges. Eight training hydrograph triples are produced by rescaling
a low-magnitude base shape to a spread of peaks; two held-out triples serve
as test events.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hydrograph import Hydrograph, scale_hydrograph
from .metrics import ControlPoint
from .raster import CellIndex, DefenseSet, RasterGrid

GRID_SIZE = 96
CELLSIZE = 5.0
DT = 900.0
DURATION = 18000.0  # 5 h
MAIN_CHANNEL_COL = 48
MAIN_CHANNEL_HALF_WIDTH = 1      # 3 cells wide
MAIN_CHANNEL_DEPTH = 2.5
TRIB_DEPTH = 1.2
TRIB_WEST_ROW = 63
TRIB_EAST_ROW = 71
DEFENSE_CREST = 0.6

TRAIN_PEAKS = (80.0, 110.0, 140.0, 170.0, 200.0, 230.0, 260.0, 290.0)
TEST_PEAKS = (155.0, 245.0)
TRIB1_FRACTION = 0.18
TRIB2_FRACTION = 0.28


@dataclass(frozen=True)
class DemoCatchment:
    dem: RasterGrid
    defenses: DefenseSet
    inflow_points: tuple[tuple[str, CellIndex], ...]
    train_hydros: tuple[tuple[Hydrograph, Hydrograph, Hydrograph], ...]
    test_hydros: tuple[tuple[Hydrograph, Hydrograph, Hydrograph], ...]
    control_points: tuple[ControlPoint, ...]


def _smooth(field: np.ndarray, passes: int = 2) -> np.ndarray:
    out = field
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        out = (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2]
               + padded[1:-1, 2:] + padded[1:-1, 1:-1]) / 5.0
    return out


def make_demo_dem(seed: int = 0, nrows: int = GRID_SIZE, ncols: int = GRID_SIZE,
                  cellsize: float = CELLSIZE) -> RasterGrid:
    rng = np.random.default_rng(seed)
    rows = np.arange(nrows)[:, None]
    cols = np.arange(ncols)[None, :]
    # row 0 is the north (downstream) edge
    z = 10.0 + 0.0025 * cellsize * rows + 0.02 * np.abs(cols - MAIN_CHANNEL_COL)
    z = z + _smooth(rng.normal(0.0, 0.02, size=(nrows, ncols)))

    c0 = MAIN_CHANNEL_COL - MAIN_CHANNEL_HALF_WIDTH
    c1 = MAIN_CHANNEL_COL + MAIN_CHANNEL_HALF_WIDTH
    z[:, c0:c1 + 1] -= MAIN_CHANNEL_DEPTH
    z[TRIB_WEST_ROW:TRIB_WEST_ROW + 2, :c0] -= TRIB_DEPTH
    z[TRIB_EAST_ROW:TRIB_EAST_ROW + 2, c1 + 1:] -= TRIB_DEPTH
    return RasterGrid(ncols=ncols, nrows=nrows, xllcorner=0.0, yllcorner=0.0,
                      cellsize=cellsize, nodata=-9999.0, values=z)


def make_demo_defenses(crest: float = DEFENSE_CREST) -> DefenseSet:
    """Bank-top walls along the mid-reach of the main channel."""
    west = tuple(CellIndex(r, MAIN_CHANNEL_COL - MAIN_CHANNEL_HALF_WIDTH - 1)
                 for r in range(16, 76) if r not in (TRIB_WEST_ROW, TRIB_WEST_ROW + 1))
    east = tuple(CellIndex(r, MAIN_CHANNEL_COL + MAIN_CHANNEL_HALF_WIDTH + 1)
                 for r in range(16, 76) if r not in (TRIB_EAST_ROW, TRIB_EAST_ROW + 1))
    return DefenseSet(segments=(west, east), crest_height=crest)


def demo_inflow_points(nrows: int = GRID_SIZE, ncols: int = GRID_SIZE):
    return (
        ("upstream1", CellIndex(nrows - 1, MAIN_CHANNEL_COL)),
        ("upstream2", CellIndex(TRIB_WEST_ROW + 1, 0)),
        ("upstream3", CellIndex(TRIB_EAST_ROW + 1, ncols - 1)),
    )


def _base_shape(peak: float, base: float, t_peak: float, sharpness: float,
                dt: float = DT, duration: float = DURATION) -> Hydrograph:
    t = dt * np.arange(int(round(duration / dt)) + 1)
    rel = np.maximum(t, 1e-9) / t_peak
    shape = (rel * np.exp(1.0 - rel)) ** sharpness
    return Hydrograph(flows=base + (peak - base) * shape, dt=dt)


def make_demo_hydrographs(seed: int = 0):
    """Eight training triples plus two held-out test triples.

    Each triple is built by peak-rescaling per-tributary base shapes; the
    main stem always carries the largest flow.
    """
    rng = np.random.default_rng(seed + 1)
    base_main = _base_shape(peak=50.0, base=4.0, t_peak=7200.0, sharpness=3.0)
    base_t1 = _base_shape(peak=8.0, base=0.8, t_peak=6300.0, sharpness=2.5)
    base_t2 = _base_shape(peak=8.0, base=0.8, t_peak=8100.0, sharpness=3.5)

    def triple(peak_main):
        f1 = TRIB1_FRACTION * float(rng.uniform(0.85, 1.15))
        f2 = TRIB2_FRACTION * float(rng.uniform(0.85, 1.15))
        return (scale_hydrograph(base_main, peak_main),
                scale_hydrograph(base_t1, max(peak_main * f1, base_t1.peak * 1.01)),
                scale_hydrograph(base_t2, max(peak_main * f2, base_t2.peak * 1.01)))

    train = tuple(triple(p) for p in TRAIN_PEAKS)
    test = tuple(triple(p) for p in TEST_PEAKS)
    return train, test


def demo_control_points(nrows: int = GRID_SIZE) -> tuple[ControlPoint, ...]:
    """18 floodplain cells flanking the main channel through the reach."""
    rows = (12, 22, 32, 42, 52, 60, 68, 78, 86)
    pts = []
    for i, r in enumerate(rows):
        pts.append(ControlPoint(f"cp{2 * i + 1:02d}", CellIndex(r, MAIN_CHANNEL_COL - 4)))
        pts.append(ControlPoint(f"cp{2 * i + 2:02d}", CellIndex(r, MAIN_CHANNEL_COL + 4)))
    return tuple(pts)


def make_demo_catchment(seed: int = 0) -> DemoCatchment:
    dem = make_demo_dem(seed)
    train, test = make_demo_hydrographs(seed)
    return DemoCatchment(
        dem=dem,
        defenses=make_demo_defenses(),
        inflow_points=demo_inflow_points(),
        train_hydros=train,
        test_hydros=test,
        control_points=demo_control_points(),
    )
