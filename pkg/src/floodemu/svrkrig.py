"""Baseline surrogate: per-location epsilon-SVR plus regression kriging.

A separate SVR is trained at each sampled cell on the shared (normalized)
feature rows; point predictions per time row are then spread over the whole
grid by a regression-kriging interpolator (linear trend on bed elevation,
ordinary kriging of the residuals under an exponential variogram).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FeatureMatrix, TargetMatrix, threshold_depths
from .errors import ConvergenceError
from .raster import CellIndex, RasterGrid


@dataclass(frozen=True)
class SvrParams:
    cost: float = 25.296
    epsilon: float = 0.031
    gamma: float = 0.016
    kernel: str = "rbf"

    def __post_init__(self):
        if self.cost <= 0 or self.gamma <= 0 or self.epsilon < 0:
            raise ValueError("cost and gamma must be positive, epsilon non-negative")
        if self.kernel != "rbf":
            raise ValueError("only the radial-basis kernel is supported")


@dataclass(frozen=True)
class SvrModel:
    support_vectors: np.ndarray = field(repr=False)
    dual_coeffs: np.ndarray = field(repr=False)  # alpha_i - alpha_i*
    bias: float
    params: SvrParams
    location: CellIndex
    kkt_violation: float = 0.0


@dataclass(frozen=True)
class KrigingModel:
    intercept: float
    slope: float               # trend coefficient on elevation
    nugget: float
    sill: float
    range_m: float
    sample_cells: np.ndarray = field(repr=False)  # (n, 2) row/col
    residuals: np.ndarray = field(repr=False)
    trend_flagged: bool = False  # mean-only fallback used

    def __post_init__(self):
        if self.range_m <= 0 or self.sill < self.nugget or self.nugget < 0:
            raise ValueError("variogram parameters violate sill >= nugget >= 0, range > 0")

    @property
    def partial_sill(self) -> float:
        return self.sill - self.nugget

    def gamma_of(self, d):
        return self.nugget + self.partial_sill * (1.0 - np.exp(-np.asarray(d) / self.range_m))

    def cov_of(self, d):
        d = np.asarray(d, dtype=np.float64)
        c = self.partial_sill * np.exp(-d / self.range_m)
        return np.where(d == 0.0, self.sill, c)


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def sample_locations(dem: RasterGrid, wet_union_mask: np.ndarray | None,
                     n: int = 500, seed: int = 0, wet_bias: float = 0.9) -> list[CellIndex]:
    """Seeded sampling without replacement, biased toward ever-wet cells.

    Roughly wet_bias of the budget goes to cells wet in at least one training
    snapshot; the remainder is drawn uniformly from the rest of the domain.
    """
    live = dem.mask()
    candidates = np.flatnonzero(live.ravel())
    if n > candidates.size:
        raise ValueError(f"requested {n} locations but only {candidates.size} candidates")
    rng = np.random.default_rng(seed)
    if wet_union_mask is None:
        chosen = rng.choice(candidates, size=n, replace=False)
    else:
        wet = np.flatnonzero(live.ravel() & np.asarray(wet_union_mask).ravel())
        dry = np.setdiff1d(candidates, wet)
        n_wet = min(int(round(n * wet_bias)), wet.size)
        n_dry = min(n - n_wet, dry.size)
        n_wet = n - n_dry  # top up from wet cells if the dry pool is short
        parts = []
        if n_wet:
            parts.append(rng.choice(wet, size=n_wet, replace=False))
        if n_dry:
            parts.append(rng.choice(dry, size=n_dry, replace=False))
        chosen = np.concatenate(parts)
    return [CellIndex(int(f) // dem.ncols, int(f) % dem.ncols) for f in np.sort(chosen)]


def train_svr(features, depths_at_cell, params: SvrParams,
              location: CellIndex = CellIndex(0, 0), tol: float = 1e-3,
              max_iter: int = 1_000_000, gram: np.ndarray | None = None) -> SvrModel:
    """Solve the epsilon-SVR dual by pairwise (SMO-style) updates.

    Works on the net dual coefficients beta_i = alpha_i - alpha_i* in
    [-C, C] under sum(beta) = 0; converges when the maximum KKT violation
    drops to tol.
    """
    x = features.values if hasattr(features, "values") else np.asarray(features, dtype=np.float64)
    y = np.asarray(depths_at_cell, dtype=np.float64)
    n = y.size
    k = rbf_kernel(x, x, params.gamma) if gram is None else gram
    c = params.cost
    eps = params.epsilon

    beta = np.zeros(n)
    g = -y.copy()  # gradient of the smooth part, K beta - y
    violation = np.inf
    for _ in range(max_iter):
        d_up = g + np.where(beta >= 0, eps, -eps)
        d_dn = g + np.where(beta > 0, eps, -eps)
        up_ok = beta < c
        dn_ok = beta > -c
        i = int(np.argmin(np.where(up_ok, d_up, np.inf)))
        j = int(np.argmax(np.where(dn_ok, d_dn, -np.inf)))
        violation = d_dn[j] - d_up[i]
        if violation <= tol:
            break
        eta = max(k[i, i] + k[j, j] - 2.0 * k[i, j], 1e-12)
        delta = violation / eta
        caps = [c - beta[i], beta[j] + c]
        if beta[i] < 0:
            caps.append(-beta[i])
        if beta[j] > 0:
            caps.append(beta[j])
        delta = min(delta, *caps)
        beta[i] += delta
        beta[j] -= delta
        g += delta * (k[i] - k[j])
    else:
        raise ConvergenceError(
            f"SVR at {location} did not converge: KKT violation {violation:.3e} > {tol}")

    free = (np.abs(beta) > 1e-12) & (np.abs(beta) < c - 1e-12)
    if free.any():
        bias = float(np.mean(-g[free] - np.sign(beta[free]) * eps))
    else:
        d_up = g + np.where(beta >= 0, eps, -eps)
        d_dn = g + np.where(beta > 0, eps, -eps)
        lo = d_up[beta < c].min()
        hi = d_dn[beta > -c].max()
        bias = float(-(lo + hi) / 2.0)

    sv = np.abs(beta) > 1e-12
    return SvrModel(support_vectors=x[sv].copy(), dual_coeffs=beta[sv].copy(), bias=bias,
                    params=params, location=location, kkt_violation=float(max(violation, 0.0)))


def predict_svr(model: SvrModel, features) -> np.ndarray:
    x = features.values if hasattr(features, "values") else np.asarray(features, dtype=np.float64)
    if model.dual_coeffs.size == 0:
        return np.full(np.atleast_2d(x).shape[0], model.bias)
    k = rbf_kernel(np.atleast_2d(x), model.support_vectors, model.params.gamma)
    return k @ model.dual_coeffs + model.bias


# --- regression kriging ------------------------------------------------

def _cell_coords(dem: RasterGrid, cells: np.ndarray) -> np.ndarray:
    rows = cells[:, 0].astype(float)
    cols = cells[:, 1].astype(float)
    x = dem.xllcorner + (cols + 0.5) * dem.cellsize
    y = dem.yllcorner + (dem.nrows - 1 - rows + 0.5) * dem.cellsize
    return np.stack([x, y], axis=1)


def fit_variogram(coords: np.ndarray, residuals: np.ndarray, n_bins: int = 12):
    """Empirical semivariogram + weighted-least-squares exponential fit.

    Returns (nugget, sill, range). The range is the exponential scale
    parameter of gamma(d) = nugget + psill * (1 - exp(-d / range)).
    """
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    iu = np.triu_indices(len(residuals), k=1)
    dists = d[iu]
    semiv = 0.5 * (residuals[:, None] - residuals[None, :])[iu] ** 2
    d_max = dists.max() / 2.0
    edges = np.geomspace(max(dists[dists > 0].min(), 1e-6), d_max, n_bins + 1)
    centers, gammas, counts = [], [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (dists > lo) & (dists <= hi)
        if sel.sum() >= 2:
            centers.append(dists[sel].mean())
            gammas.append(semiv[sel].mean())
            counts.append(sel.sum())
    centers = np.array(centers)
    gammas = np.array(gammas)
    counts = np.array(counts, dtype=float)
    res_var = max(float(residuals.var()), 1e-12)
    if centers.size < 3:
        return 0.0, res_var, max(d_max, 1.0)

    best = None
    for rng_cand in np.geomspace(centers[0], centers[-1] * 2.0, 40):
        basis = np.stack([np.ones_like(centers), 1.0 - np.exp(-centers / rng_cand)], axis=1)
        w = np.sqrt(counts)
        coef, *_ = np.linalg.lstsq(basis * w[:, None], gammas * w, rcond=None)
        nugget, psill = coef
        if nugget < 0:
            nugget = 0.0
            denom = float(np.sum(w ** 2 * basis[:, 1] ** 2))
            psill = float(np.sum(w ** 2 * basis[:, 1] * gammas)) / max(denom, 1e-12)
        if psill <= 0:
            psill = res_var
        sse = float(np.sum(counts * (nugget + psill * basis[:, 1] - gammas) ** 2))
        if best is None or sse < best[0]:
            best = (sse, float(nugget), float(psill), float(rng_cand))
    _, nugget, psill, rng_best = best
    return nugget, nugget + psill, rng_best


def fit_rk(dem: RasterGrid, points) -> KrigingModel:
    """Fit the elevation trend and residual variogram at sampled points.

    points: sequence of (CellIndex, predicted depth).
    """
    if len(points) < 10:
        raise ValueError("regression kriging needs at least 10 points")
    cells = np.array([[c.row, c.col] for c, _ in points])
    if len({(r, c) for r, c in cells.tolist()}) != len(points):
        raise ValueError("sample locations must be distinct")
    depths = np.array([v for _, v in points], dtype=np.float64)
    elev = dem.values[cells[:, 0], cells[:, 1]]

    flagged = False
    if np.ptp(elev) < 1e-12:
        intercept, slope = float(depths.mean()), 0.0
        flagged = True
    else:
        a = np.stack([np.ones_like(elev), elev], axis=1)
        coef, *_ = np.linalg.lstsq(a, depths, rcond=None)
        intercept, slope = float(coef[0]), float(coef[1])
    residuals = depths - (intercept + slope * elev)

    coords = _cell_coords(dem, cells)
    if np.allclose(residuals, 0.0, atol=1e-12):
        nugget, sill, rng = 0.0, 1e-12, dem.cellsize
        residuals = np.zeros_like(residuals)
    else:
        nugget, sill, rng = fit_variogram(coords, residuals)
    return KrigingModel(intercept=intercept, slope=slope, nugget=nugget,
                        sill=max(sill, nugget + 1e-15), range_m=rng,
                        sample_cells=cells, residuals=residuals, trend_flagged=flagged)


def _kriging_weights(model: KrigingModel, dem: RasterGrid, targets: np.ndarray):
    """Ordinary-kriging weights for every target coordinate (columns)."""
    coords = _cell_coords(dem, model.sample_cells)
    n = coords.shape[0]
    d_ss = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    a = np.empty((n + 1, n + 1))
    a[:n, :n] = model.cov_of(d_ss)
    a[n, :n] = 1.0
    a[:n, n] = 1.0
    a[n, n] = 0.0
    d_st = np.sqrt(((coords[:, None, :] - targets[None, :, :]) ** 2).sum(-1))
    rhs = np.empty((n + 1, targets.shape[0]))
    rhs[:n] = model.cov_of(d_st)
    rhs[n] = 1.0
    try:
        w = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        a[:n, :n] += 1e-9 * np.eye(n)  # jitter-regularized fallback
        w = np.linalg.solve(a, rhs)
    return w[:n]


def interpolate_rk(model: KrigingModel, dem: RasterGrid, tau: float = 0.3) -> RasterGrid:
    """Trend plus kriged residual over every live cell, clamped and thresholded."""
    live = dem.mask()
    cells = np.argwhere(live)
    targets = _cell_coords(dem, cells)
    w = _kriging_weights(model, dem, targets)
    pred = model.intercept + model.slope * dem.values[live] + w.T @ model.residuals
    pred = threshold_depths(np.maximum(pred, 0.0), tau)
    vals = np.full(dem.shape, dem.nodata)
    vals[live] = pred
    return dem.with_values(vals)


# --- full pipeline -----------------------------------------------------

def train_svr_ensemble(features: FeatureMatrix, targets: TargetMatrix,
                       locations, params: SvrParams) -> list[SvrModel]:
    """One SVR per sampled location on the shared feature rows.

    Order-independent: each location's problem is self-contained.
    """
    x = features.values
    gram = rbf_kernel(x, x, params.gamma)
    col_of = {int(f): i for i, f in enumerate(targets.cell_map)}
    ncols = targets.template.ncols
    models = []
    for cell in locations:
        flat = cell.row * ncols + cell.col
        if flat not in col_of:
            raise ValueError(f"location {cell} is not a live cell of the target matrix")
        y = targets.values[:, col_of[flat]]
        models.append(train_svr(x, y, params, location=cell, gram=gram))
    return models


def run_svr_pipeline(train_features: FeatureMatrix, train_targets: TargetMatrix,
                     test_features: FeatureMatrix, dem: RasterGrid,
                     n_locations: int = 500, params: SvrParams = SvrParams(),
                     seed: int = 0, tau: float = 0.3):
    """Train per-location SVRs, predict each test row, interpolate with RK.

    Returns (depth rasters aligned with the test rows, trained models).
    """
    wet_union = np.zeros(dem.shape, dtype=bool)
    flat = train_targets.cell_map
    wet_cols = (train_targets.values > tau).any(axis=0)
    wet_union.ravel()[flat[wet_cols]] = True

    locations = sample_locations(dem, wet_union, n=n_locations, seed=seed)
    models = train_svr_ensemble(train_features, train_targets, locations, params)

    point_preds = np.stack([predict_svr(m, test_features.values) for m in models], axis=1)
    rasters = []
    for t_idx in range(test_features.rows):
        pts = [(m.location, float(point_preds[t_idx, i])) for i, m in enumerate(models)]
        rk = fit_rk(dem, pts)
        rasters.append(interpolate_rk(rk, dem, tau))
    return rasters, models


# --- ensemble persistence ---------------------------------------------

def save_svr_ensemble(models: list[SvrModel], path) -> None:
    arrays = {"n_models": np.array([len(models)])}
    for i, m in enumerate(models):
        arrays[f"sv_{i}"] = m.support_vectors
        arrays[f"dual_{i}"] = m.dual_coeffs
        arrays[f"meta_{i}"] = np.array([m.bias, m.params.cost, m.params.epsilon,
                                        m.params.gamma, m.location.row, m.location.col,
                                        m.kkt_violation])
    np.savez_compressed(path, **arrays)


def load_svr_ensemble(path) -> list[SvrModel]:
    data = np.load(Path(path))
    models = []
    for i in range(int(data["n_models"][0])):
        meta = data[f"meta_{i}"]
        models.append(SvrModel(
            support_vectors=data[f"sv_{i}"], dual_coeffs=data[f"dual_{i}"],
            bias=float(meta[0]),
            params=SvrParams(cost=float(meta[1]), epsilon=float(meta[2]), gamma=float(meta[3])),
            location=CellIndex(int(meta[4]), int(meta[5])),
            kkt_violation=float(meta[6])))
    return models
