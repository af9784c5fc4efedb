"""Feature/target matrix construction from hydrographs and solver runs.

Features are lagged upstream discharges plus the observation time; targets
are thresholded, flattened depth snapshots with nodata cells dropped. Both
sides carry enough metadata (column names, cell map, normalisation) to be
self-describing on disk.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ManifestError, ModelIOError
from .hydrograph import BoundarySet
from .raster import RasterGrid
from .solver import ScenarioRun

_MATRIX_MAGIC = b"FEMX"
_MATRIX_VERSION = 1


@dataclass(frozen=True)
class FeatureSpec:
    lags: int = 8
    upstream_count: int = 3
    include_time: bool = True
    lag_padding: str = "repeat_first"  # or "drop_rows"

    def __post_init__(self):
        if self.lags < 0 or self.upstream_count < 1:
            raise ValueError("lags must be >= 0 and upstream_count >= 1")
        if self.lag_padding not in ("repeat_first", "drop_rows"):
            raise ValueError("lag_padding must be 'repeat_first' or 'drop_rows'")

    @property
    def width(self) -> int:
        return self.upstream_count * (self.lags + 1) + (1 if self.include_time else 0)


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray = field(repr=False)
    col_names: tuple[str, ...]
    scenario_ids: np.ndarray = field(repr=False)
    norm: np.ndarray | None = field(default=None, repr=False)  # (width, 2) min/max

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature matrix must be finite")
        if vals.shape[1] != len(self.col_names):
            raise ValueError("column name count mismatch")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "scenario_ids", np.asarray(self.scenario_ids, dtype=np.int64))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def take(self, idx) -> "FeatureMatrix":
        return replace(self, values=self.values[idx], scenario_ids=self.scenario_ids[idx])


@dataclass(frozen=True)
class TargetMatrix:
    values: np.ndarray = field(repr=False)   # (rows, live cell count), m
    threshold: float
    cell_map: np.ndarray = field(repr=False)  # flat row-major indices of live cells
    template: RasterGrid = field(repr=False)  # georeference for unflattening

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "cell_map", np.asarray(self.cell_map, dtype=np.int64))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def take(self, idx) -> "TargetMatrix":
        return replace(self, values=self.values[idx])


@dataclass(frozen=True)
class SplitSpec:
    val_fraction: float
    seed: int = 0
    mode: str = "by_row"  # or "by_scenario"

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.mode not in ("by_row", "by_scenario"):
            raise ValueError("mode must be 'by_row' or 'by_scenario'")


def threshold_depths(depths, tau: float = 0.3) -> np.ndarray:
    """Zero out depths at or below tau (strict > keeps a value)."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    depths = np.asarray(depths, dtype=np.float64)
    if not np.all(np.isfinite(depths)):
        raise ValueError("depths must be finite")
    return np.where(depths > tau, depths, 0.0)


def _lagged_rows(flows: np.ndarray, lags: int, padding: str) -> np.ndarray:
    n = flows.size
    if padding == "drop_rows" and n <= lags:
        raise AlignmentError(f"series of length {n} too short for {lags} lags with drop_rows")
    start = lags if padding == "drop_rows" else 0
    rows = np.empty((n - start, lags + 1))
    for i, t in enumerate(range(start, n)):
        idx = np.maximum(np.arange(t, t - lags - 1, -1), 0)
        rows[i] = flows[idx]
    return rows


def build_features(boundaries, spec: FeatureSpec) -> FeatureMatrix:
    """Stack lagged-discharge (+ time) rows for one or more boundary sets.

    Multi-scenario input preserves scenario order, then time order within
    each scenario.
    """
    sets = [boundaries] if isinstance(boundaries, BoundarySet) else list(boundaries)
    blocks, scen_ids = [], []
    for s_id, bset in enumerate(sets):
        if len(bset.entries) != spec.upstream_count:
            raise AlignmentError(
                f"boundary set has {len(bset.entries)} upstream points, spec wants {spec.upstream_count}")
        hydros = bset.hydrographs()
        cols = [_lagged_rows(h.flows, spec.lags, spec.lag_padding) for h in hydros]
        n_rows = cols[0].shape[0]
        start = len(hydros[0]) - n_rows
        parts = []
        if spec.include_time:
            t = hydros[0].dt * np.arange(start, len(hydros[0]))
            parts.append(t[:, None])
        parts.extend(cols)
        blocks.append(np.hstack(parts))
        scen_ids.append(np.full(n_rows, s_id))

    names = []
    if spec.include_time:
        names.append("time_s")
    for u in range(spec.upstream_count):
        names.extend(f"u{u + 1}_lag{k}" for k in range(spec.lags + 1))
    return FeatureMatrix(values=np.vstack(blocks), col_names=tuple(names),
                         scenario_ids=np.concatenate(scen_ids))


def build_targets(runs, tau: float = 0.3) -> TargetMatrix:
    """Threshold and flatten snapshots of one or more runs into a matrix."""
    run_list = [runs] if isinstance(runs, ScenarioRun) else list(runs)
    template = run_list[0].depths[0]
    live = template.mask()
    cell_map = np.flatnonzero(live.ravel())
    rows = []
    for run in run_list:
        for snap in run.depths:
            if snap.shape != template.shape:
                raise AlignmentError("snapshot grids differ in shape")
            rows.append(threshold_depths(snap.values.ravel()[cell_map], tau))
    return TargetMatrix(values=np.vstack(rows), threshold=tau,
                        cell_map=cell_map, template=template)


def unflatten(row: np.ndarray, targets: TargetMatrix) -> RasterGrid:
    """Render one target/prediction row back onto the reference grid."""
    tpl = targets.template
    flat = np.full(tpl.nrows * tpl.ncols, tpl.nodata)
    flat[targets.cell_map] = row
    return tpl.with_values(flat.reshape(tpl.shape))


def fit_normalizer(features: FeatureMatrix) -> FeatureMatrix:
    """Per-column min-max to [0, 1]; constant columns map to 0."""
    lo = features.values.min(axis=0)
    hi = features.values.max(axis=0)
    norm = np.stack([lo, hi], axis=1)
    return apply_normalizer(features, norm)


def apply_normalizer(features: FeatureMatrix, norm: np.ndarray) -> FeatureMatrix:
    span = norm[:, 1] - norm[:, 0]
    span = np.where(span > 0, span, 1.0)
    vals = (features.values - norm[:, 0]) / span
    return replace(features, values=vals, norm=np.asarray(norm, dtype=np.float64))


def split(features: FeatureMatrix, targets: TargetMatrix, spec: SplitSpec):
    """Deterministic train/validation split; returns ((Xtr, Ytr), (Xva, Yva))."""
    if features.rows != targets.rows:
        raise AlignmentError("feature and target row counts differ")
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "by_row":
        n_val = int(round(features.rows * spec.val_fraction))
        if n_val == 0 or n_val == features.rows:
            raise ValueError("val_fraction leaves one side empty")
        perm = rng.permutation(features.rows)
        val_idx = np.sort(perm[:n_val])
        train_idx = np.sort(perm[n_val:])
    else:
        scen = np.unique(features.scenario_ids)
        n_val = int(round(scen.size * spec.val_fraction))
        if n_val == 0 or n_val == scen.size:
            raise ValueError("val_fraction leaves one side empty")
        val_scen = set(rng.permutation(scen)[:n_val].tolist())
        is_val = np.isin(features.scenario_ids, list(val_scen))
        val_idx = np.flatnonzero(is_val)
        train_idx = np.flatnonzero(~is_val)
    return ((features.take(train_idx), targets.take(train_idx)),
            (features.take(val_idx), targets.take(val_idx)))


# --- flat binary + sidecar serialization -------------------------------

def save_matrix(path, values: np.ndarray, manifest: dict | None = None) -> None:
    values = np.ascontiguousarray(values, dtype=np.float64)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_MATRIX_MAGIC)
        f.write(struct.pack("<IQQ", _MATRIX_VERSION, values.shape[0], values.shape[1]))
        f.write(values.tobytes())
    if manifest is not None:
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1))


def load_matrix(path, with_manifest: bool = False):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MATRIX_MAGIC:
        raise ModelIOError(f"{path}: not a matrix file (bad magic)")
    version, rows, cols = struct.unpack("<IQQ", raw[4:24])
    if version != _MATRIX_VERSION:
        raise ModelIOError(f"{path}: unsupported matrix version {version}")
    data = np.frombuffer(raw[24:], dtype=np.float64)
    if data.size != rows * cols:
        raise ModelIOError(f"{path}: truncated payload ({data.size} of {rows * cols} values)")
    values = data.reshape(rows, cols)
    if not with_manifest:
        return values
    side = path.with_suffix(path.suffix + ".json")
    if not side.exists():
        raise ManifestError(f"missing sidecar manifest {side}")
    return values, json.loads(side.read_text())


def matrix_to_csv(values: np.ndarray, col_names=None) -> str:
    lines = []
    if col_names is not None:
        lines.append(",".join(col_names))
    lines.extend(",".join(repr(float(v)) for v in row) for row in np.atleast_2d(values))
    return "\n".join(lines) + "\n"
