"""Georeferenced raster grids, ESRI ASCII grid I/O, and DEM manipulation.

Grids are stored row-major from the top (north) row downward, matching the
ASCII grid convention. A grid is immutable after construction; operations
that change cell values return a new grid.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GridCompatibilityError, GridParseError

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")

DEFAULT_NODATA = -9999.0


@dataclass(frozen=True)
class CellIndex:
    row: int
    col: int

    def __iter__(self):
        return iter((self.row, self.col))


@dataclass(frozen=True)
class RasterGrid:
    """A rectangular grid of real values anchored at its lower-left corner."""

    ncols: int
    nrows: int
    xllcorner: float
    yllcorner: float
    cellsize: float
    nodata: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise ValueError("grid must have at least one row and column")
        if self.cellsize <= 0:
            raise ValueError("cellsize must be positive")
        vals = np.asarray(self.values, dtype=np.float64).reshape(self.nrows, self.ncols)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        live = vals[vals != self.nodata]
        if live.size and not np.all(np.isfinite(live)):
            raise ValueError("non-nodata cells must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    def mask(self) -> np.ndarray:
        """Boolean array, True where the cell holds real data."""
        return self.values != self.nodata

    def in_bounds(self, cell: CellIndex) -> bool:
        return 0 <= cell.row < self.nrows and 0 <= cell.col < self.ncols

    def with_values(self, values: np.ndarray) -> "RasterGrid":
        return replace(self, values=np.array(values, dtype=np.float64))


@dataclass(frozen=True)
class DefenseSet:
    """Rasterized flood defences: runs of cells raised by a constant crest."""

    segments: tuple[tuple[CellIndex, ...], ...]
    crest_height: float

    def __post_init__(self):
        if self.crest_height <= 0:
            raise ValueError("crest_height must be positive")
        segs = tuple(tuple(CellIndex(*c) if not isinstance(c, CellIndex) else c for c in seg)
                     for seg in self.segments)
        object.__setattr__(self, "segments", segs)

    def cells(self) -> set[CellIndex]:
        """De-duplicated set of defended cells (overlaps raised once)."""
        return {c for seg in self.segments for c in seg}


def read_ascii_grid(text) -> RasterGrid:
    """Parse an ESRI ASCII grid from a string or text stream."""
    if isinstance(text, str):
        text = io.StringIO(text)
    lines = text.read().splitlines()

    header = {}
    body_start = 0
    for i, line in enumerate(lines):
        parts = line.split()
        if len(parts) == 2 and parts[0].lower() in _HEADER_KEYS:
            key = parts[0].lower()
            try:
                header[key] = float(parts[1])
            except ValueError:
                raise GridParseError(f"non-numeric header value for {parts[0]!r}", line=i + 1)
            body_start = i + 1
        else:
            break

    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if key not in header:
            raise GridParseError(f"missing header field {key!r}", line=body_start)
    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    if ncols != header["ncols"] or nrows != header["nrows"] or ncols < 1 or nrows < 1:
        raise GridParseError("ncols/nrows must be positive integers", line=1)
    nodata = header.get("nodata_value", DEFAULT_NODATA)

    values = []
    for i in range(body_start, len(lines)):
        for j, tok in enumerate(lines[i].split()):
            try:
                values.append(float(tok))
            except ValueError:
                raise GridParseError(f"non-numeric cell token {tok!r}", line=i + 1, column=j + 1)
    if len(values) != ncols * nrows:
        raise GridParseError(
            f"cell count mismatch: header declares {ncols * nrows}, found {len(values)}",
            line=body_start + 1,
        )
    return RasterGrid(
        ncols=ncols,
        nrows=nrows,
        xllcorner=header["xllcorner"],
        yllcorner=header["yllcorner"],
        cellsize=header["cellsize"],
        nodata=nodata,
        values=np.array(values, dtype=np.float64),
    )


def write_ascii_grid(grid: RasterGrid) -> str:
    """Serialize a grid so that read_ascii_grid reproduces it exactly."""
    out = [
        f"ncols {grid.ncols}",
        f"nrows {grid.nrows}",
        f"xllcorner {float(grid.xllcorner)!r}",
        f"yllcorner {float(grid.yllcorner)!r}",
        f"cellsize {float(grid.cellsize)!r}",
        f"NODATA_value {float(grid.nodata)!r}",
    ]
    for row in grid.values:
        out.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


def embed_defenses(dem: RasterGrid, defenses: DefenseSet) -> RasterGrid:
    """Raise each defended cell by the crest height; overlaps count once."""
    vals = np.array(dem.values)
    for cell in defenses.cells():
        if not dem.in_bounds(cell):
            raise IndexError(f"defense cell {cell} outside {dem.nrows}x{dem.ncols} grid")
        if vals[cell.row, cell.col] == dem.nodata:
            raise ValueError(f"defense cell {cell} sits on nodata")
        vals[cell.row, cell.col] += defenses.crest_height
    return dem.with_values(vals)


def check_compatible(a: RasterGrid, b: RasterGrid) -> None:
    """Raise unless the two grids share shape, cellsize, and origin."""
    if a.shape != b.shape:
        raise GridCompatibilityError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.cellsize != b.cellsize:
        raise GridCompatibilityError(f"cellsize mismatch: {a.cellsize} vs {b.cellsize}")
    if (a.xllcorner, a.yllcorner) != (b.xllcorner, b.yllcorner):
        raise GridCompatibilityError("origin mismatch")


def write_pgm(grid: RasterGrid, lo: float | None = None, hi: float | None = None) -> str:
    """Plain PGM (P2) rendering for quick visual inspection.

    Values are scaled linearly from [lo, hi] to [0, 255]; nodata renders as 0.
    The scaling interval is recorded in a header comment.
    """
    live = grid.values[grid.mask()]
    if lo is None:
        lo = float(live.min()) if live.size else 0.0
    if hi is None:
        hi = float(live.max()) if live.size else 1.0
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((grid.values - lo) / span, 0.0, 1.0)
    gray = np.rint(scaled * 255).astype(int)
    gray[~grid.mask()] = 0
    out = [f"P2", f"# linear scale: {lo} -> 0, {hi} -> 255", f"{grid.ncols} {grid.nrows}", "255"]
    out.extend(" ".join(str(v) for v in row) for row in gray)
    return "\n".join(out) + "\n"
