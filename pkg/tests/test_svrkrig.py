import numpy as np
import pytest

from floodemu import svrkrig
from floodemu.dataset import FeatureMatrix, TargetMatrix
from floodemu.raster import CellIndex
from floodemu.solver import ScenarioRun
from floodemu.svrkrig import (KrigingModel, SvrModel, SvrParams, fit_rk,
                              fit_variogram, interpolate_rk, predict_svr,
                              rbf_kernel, run_svr_pipeline, sample_locations,
                              train_svr, train_svr_ensemble)

from _grids import make_grid


def svr_primal_objective(x, y, beta, bias, params):
    """Primal epsilon-SVR objective at the (w, b) implied by the dual point."""
    k = rbf_kernel(x, x, params.gamma)
    pred = k @ beta + bias
    slack = np.maximum(np.abs(y - pred) - params.epsilon, 0.0)
    return 0.5 * beta @ k @ beta + params.cost * slack.sum()


def svr_dual_objective(x, y, beta, params):
    k = rbf_kernel(x, x, params.gamma)
    return -0.5 * beta @ k @ beta - params.epsilon * np.abs(beta).sum() + y @ beta


class TestRbfKernel:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))
        k = rbf_kernel(x, x, gamma=0.7)
        np.testing.assert_allclose(np.diag(k), 1.0, atol=1e-15)

    def test_matches_direct_formula(self):
        a = np.array([[1.0, 2.0]])
        b = np.array([[3.0, 1.0]])
        assert rbf_kernel(a, b, 0.5)[0, 0] == pytest.approx(np.exp(-0.5 * 5.0))


class TestSampleLocations:
    def dem(self):
        return make_grid(np.zeros((10, 10)))

    def test_all_candidates_when_n_equals_count(self):
        cells = sample_locations(self.dem(), None, n=100, seed=0)
        assert len(set(cells)) == 100

    def test_determinism(self):
        a = sample_locations(self.dem(), None, n=20, seed=4)
        b = sample_locations(self.dem(), None, n=20, seed=4)
        assert a == b

    def test_too_many_rejected(self):
        with pytest.raises(ValueError):
            sample_locations(self.dem(), None, n=101, seed=0)

    def test_wet_bias(self):
        wet = np.zeros((10, 10), dtype=bool)
        wet[:5, :] = True
        cells = sample_locations(self.dem(), wet, n=20, seed=1, wet_bias=0.9)
        n_wet = sum(1 for c in cells if wet[c.row, c.col])
        assert n_wet == 18

    def test_spatial_spread(self):
        # mean nearest-neighbor distance within 3x of the uniform expectation
        expectation = 0.5 / np.sqrt(20 / 100.0)  # cells, unit spacing
        for seed in range(20):
            cells = sample_locations(self.dem(), None, n=20, seed=seed)
            pts = np.array([[c.row, c.col] for c in cells], dtype=float)
            d = np.sqrt(((pts[:, None] - pts[None, :]) ** 2).sum(-1))
            np.fill_diagonal(d, np.inf)
            mean_nn = d.min(axis=1).mean()
            assert mean_nn < 3 * expectation


class TestTrainSvr:
    def problem(self, n=30, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, size=(n, 3))
        y = np.sin(3 * x[:, 0]) + 0.5 * x[:, 1]
        return x, y

    def test_constant_target_within_epsilon(self):
        x = np.random.default_rng(1).uniform(size=(20, 2))
        y = np.full(20, 3.0)
        params = SvrParams(cost=10.0, epsilon=0.1, gamma=1.0)
        model = train_svr(x, y, params)
        pred = predict_svr(model, x)
        assert np.abs(pred - 3.0).max() <= params.epsilon + 1e-3
        assert model.dual_coeffs.size <= 2  # flat target needs almost no SVs

    def test_kkt_conditions(self):
        x, y = self.problem()
        params = SvrParams(cost=5.0, epsilon=0.05, gamma=2.0)
        model = train_svr(x, y, params)
        assert model.kkt_violation <= 1e-3
        pred = predict_svr(model, x)
        # reconstruct full beta at training points
        beta = np.zeros(len(y))
        used = {tuple(sv): d for sv, d in zip(model.support_vectors,
                                              model.dual_coeffs)}
        for i, xi in enumerate(x):
            beta[i] = used.get(tuple(xi), 0.0)
        at_bound = np.abs(np.abs(beta) - params.cost) <= 1e-9
        inside = np.abs(y - pred) <= params.epsilon + 1e-3
        assert np.all(inside | at_bound)

    def test_dual_coeffs_within_box_and_sum_zero(self):
        x, y = self.problem(seed=2)
        params = SvrParams(cost=3.0, epsilon=0.02, gamma=1.5)
        model = train_svr(x, y, params)
        assert np.abs(model.dual_coeffs).max() <= params.cost + 1e-12
        assert abs(model.dual_coeffs.sum()) <= 1e-9

    def test_weak_duality(self):
        x, y = self.problem(seed=3, n=20)
        params = SvrParams(cost=2.0, epsilon=0.05, gamma=1.0)
        model = train_svr(x, y, params)
        beta = np.zeros(len(y))
        used = {tuple(sv): d for sv, d in zip(model.support_vectors,
                                              model.dual_coeffs)}
        for i, xi in enumerate(x):
            beta[i] = used.get(tuple(xi), 0.0)
        primal = svr_primal_objective(x, y, beta, model.bias, params)
        rng = np.random.default_rng(4)
        for _ in range(100):
            rand = rng.uniform(-params.cost, params.cost, size=len(y))
            rand -= rand.mean()  # project onto sum-zero
            assert primal >= svr_dual_objective(x, y, rand, params) - 1e-9

    def test_prediction_matches_kernel_expansion(self):
        x, y = self.problem(seed=5, n=15)
        model = train_svr(x, y, SvrParams(cost=4.0, epsilon=0.05, gamma=0.8))
        probe = np.random.default_rng(6).uniform(size=(7, 3))
        manual = np.array([
            sum(d * np.exp(-0.8 * np.sum((sv - p) ** 2))
                for sv, d in zip(model.support_vectors, model.dual_coeffs))
            + model.bias for p in probe])
        np.testing.assert_allclose(predict_svr(model, probe), manual, atol=1e-12)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            SvrParams(cost=0.0)
        with pytest.raises(ValueError):
            SvrParams(epsilon=-0.1)
        with pytest.raises(ValueError):
            SvrParams(kernel="linear")


class TestVariogramAndRk:
    def grid_dem(self, n=20, slope=0.0):
        rows = np.arange(n)[:, None]
        return make_grid(slope * rows * np.ones((n, n)), cellsize=5.0)

    def random_points(self, dem, n, seed):
        rng = np.random.default_rng(seed)
        flat = rng.choice(dem.nrows * dem.ncols, size=n, replace=False)
        return [CellIndex(int(f) // dem.ncols, int(f) % dem.ncols) for f in flat]

    def test_exact_linear_trend_recovered(self):
        dem = self.grid_dem(slope=0.1)
        cells = self.random_points(dem, 30, seed=0)
        pts = [(c, 2.0 + 3.0 * dem.values[c.row, c.col]) for c in cells]
        model = fit_rk(dem, pts)
        assert model.intercept == pytest.approx(2.0, abs=1e-9)
        assert model.slope == pytest.approx(3.0, abs=1e-9)
        assert not model.trend_flagged
        np.testing.assert_allclose(model.residuals, 0.0, atol=1e-9)

    def test_zero_residuals_give_pure_trend_surface(self):
        dem = self.grid_dem(slope=0.1)
        cells = self.random_points(dem, 15, seed=1)
        pts = [(c, 1.0 + 0.5 * dem.values[c.row, c.col]) for c in cells]
        model = fit_rk(dem, pts)
        out = interpolate_rk(model, dem, tau=0.0)
        expected = np.maximum(1.0 + 0.5 * dem.values, 0.0)
        np.testing.assert_allclose(out.values, expected, atol=1e-6)

    def test_constant_elevation_falls_back_to_mean(self):
        dem = self.grid_dem(slope=0.0)
        cells = self.random_points(dem, 12, seed=2)
        pts = [(c, 1.5) for c in cells]
        model = fit_rk(dem, pts)
        assert model.trend_flagged
        assert model.intercept == pytest.approx(1.5)

    def test_too_few_or_duplicate_points(self):
        dem = self.grid_dem()
        with pytest.raises(ValueError, match="10"):
            fit_rk(dem, [(CellIndex(0, i), 1.0) for i in range(5)])
        pts = [(CellIndex(0, i), 1.0) for i in range(10)]
        pts[9] = pts[0]
        with pytest.raises(ValueError, match="distinct"):
            fit_rk(dem, pts)

    def test_kriging_exactness_at_samples_with_zero_nugget(self):
        dem = self.grid_dem(slope=0.05)
        cells = self.random_points(dem, 25, seed=3)
        rng = np.random.default_rng(3)
        pts = [(c, 1.0 + 0.2 * dem.values[c.row, c.col] + rng.normal(0, 0.3))
               for c in cells]
        model = fit_rk(dem, pts)
        exact = KrigingModel(intercept=model.intercept, slope=model.slope,
                             nugget=0.0, sill=max(model.sill, 1e-6),
                             range_m=model.range_m, sample_cells=model.sample_cells,
                             residuals=model.residuals,
                             trend_flagged=model.trend_flagged)
        out = interpolate_rk(exact, dem, tau=0.0)
        for (c, v) in pts:
            if v > 0:  # clamping is allowed to truncate negative samples
                assert out.values[c.row, c.col] == pytest.approx(v, abs=1e-6)

    def test_variogram_recovers_known_exponential_field(self):
        # Gaussian field with exponential covariance: range 50 m, sill 1
        true_range, true_sill = 50.0, 1.0
        ranges, sills = [], []
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            coords = rng.uniform(0, 500, size=(200, 2))
            d = np.sqrt(((coords[:, None] - coords[None, :]) ** 2).sum(-1))
            cov = true_sill * np.exp(-d / true_range)
            field = np.linalg.cholesky(cov + 1e-10 * np.eye(200)) @ rng.normal(size=200)
            nugget, sill, rng_fit = fit_variogram(coords, field)
            ranges.append(rng_fit)
            sills.append(sill)
        # single-realization range estimates scatter widely; the mean over
        # the 10 realizations must land in the stated bands
        assert abs(np.mean(ranges) - true_range) <= 0.3 * true_range
        assert abs(np.mean(sills) - true_sill) <= 0.2 * true_sill

    def test_loo_beats_trend_only(self):
        dem = self.grid_dem(slope=0.02)
        rng = np.random.default_rng(7)
        cells = self.random_points(dem, 40, seed=7)
        coords = np.array([[c.col * 5.0, (dem.nrows - 1 - c.row) * 5.0]
                           for c in cells])
        d = np.sqrt(((coords[:, None] - coords[None, :]) ** 2).sum(-1))
        cov = np.exp(-d / 40.0)
        spatial = np.linalg.cholesky(cov + 1e-10 * np.eye(40)) @ rng.normal(size=40)
        depths = 1.0 + 0.1 * np.array([dem.values[c.row, c.col] for c in cells]) + spatial
        err_rk, err_trend = [], []
        for i in range(40):
            rest = [(c, v) for j, (c, v) in enumerate(zip(cells, depths)) if j != i]
            model = fit_rk(dem, rest)
            out = interpolate_rk(model, dem, tau=0.0)
            c = cells[i]
            err_rk.append(abs(out.values[c.row, c.col] - max(depths[i], 0.0)))
            trend = model.intercept + model.slope * dem.values[c.row, c.col]
            err_trend.append(abs(max(trend, 0.0) - max(depths[i], 0.0)))
        assert np.mean(err_rk) < np.mean(err_trend)


class TestEnsembleAndPipeline:
    def setup_data(self, seed=0):
        rng = np.random.default_rng(seed)
        dem = make_grid(0.01 * np.arange(6)[:, None] * np.ones((6, 6)), cellsize=5.0)
        n_rows = 12
        feats = FeatureMatrix(values=rng.uniform(size=(n_rows, 3)),
                              col_names=("a", "b", "c"),
                              scenario_ids=np.zeros(n_rows))
        depths = rng.uniform(0, 1.2, size=(n_rows, 36))
        cell_map = np.arange(36)
        targs = TargetMatrix(values=np.where(depths > 0.3, depths, 0.0),
                             threshold=0.3, cell_map=cell_map, template=dem)
        return dem, feats, targs

    def test_ensemble_order_independence(self):
        dem, feats, targs = self.setup_data()
        params = SvrParams(cost=2.0, epsilon=0.05, gamma=1.0)
        locs = [CellIndex(1, 1), CellIndex(3, 4), CellIndex(5, 0)]
        fwd = train_svr_ensemble(feats, targs, locs, params)
        rev = train_svr_ensemble(feats, targs, list(reversed(locs)), params)
        for m in fwd:
            twin = next(r for r in rev if r.location == m.location)
            np.testing.assert_array_equal(m.dual_coeffs, twin.dual_coeffs)
            assert m.bias == twin.bias

    def test_non_live_location_rejected(self):
        dem, feats, targs = self.setup_data()
        targs2 = TargetMatrix(values=targs.values[:, 1:], threshold=0.3,
                              cell_map=targs.cell_map[1:], template=dem)
        with pytest.raises(ValueError, match="live cell"):
            train_svr_ensemble(feats, targs2, [CellIndex(0, 0)],
                               SvrParams(cost=1.0, epsilon=0.1, gamma=1.0))

    def test_dry_scenario_gives_dry_rasters(self):
        dem, feats, targs = self.setup_data()
        dry = TargetMatrix(values=np.zeros_like(targs.values), threshold=0.3,
                           cell_map=targs.cell_map, template=dem)
        rasters, models = run_svr_pipeline(feats, dry, feats, dem,
                                           n_locations=12,
                                           params=SvrParams(cost=1.0, epsilon=0.05,
                                                            gamma=1.0), seed=0)
        for r in rasters:
            assert r.values[r.mask()].max() == 0.0

    def test_pipeline_determinism(self):
        dem, feats, targs = self.setup_data()
        kw = dict(n_locations=15, params=SvrParams(cost=2.0, epsilon=0.05, gamma=1.0),
                  seed=3)
        a, _ = run_svr_pipeline(feats, targs, feats, dem, **kw)
        b, _ = run_svr_pipeline(feats, targs, feats, dem, **kw)
        for ga, gb in zip(a, b):
            np.testing.assert_array_equal(ga.values, gb.values)

    def test_save_load_roundtrip(self, tmp_path):
        dem, feats, targs = self.setup_data()
        params = SvrParams(cost=2.0, epsilon=0.05, gamma=1.0)
        models = train_svr_ensemble(feats, targs,
                                    [CellIndex(2, 2), CellIndex(4, 1)], params)
        path = tmp_path / "svr.npz"
        svrkrig.save_svr_ensemble(models, path)
        back = svrkrig.load_svr_ensemble(path)
        assert len(back) == 2
        probe = np.random.default_rng(0).uniform(size=(5, 3))
        for m, b in zip(models, back):
            assert b.location == m.location
            np.testing.assert_allclose(predict_svr(b, probe), predict_svr(m, probe),
                                       atol=1e-12)
