import math

import numpy as np
import pytest

from floodemu.metrics import (ControlPoint, confusion_scores, control_point_series,
                              descriptive_stats, error_map, nse, percentile_error,
                              rmse, report_csv_row, MetricsReport)
from floodemu.raster import CellIndex

from _grids import make_grid


def brute_rmse(o, p):
    total = 0.0
    for a, b in zip(o, p):
        total += (a - b) ** 2
    return math.sqrt(total / len(o))


def brute_nse(o, p):
    mean = sum(o) / len(o)
    num = sum((a - b) ** 2 for a, b in zip(o, p))
    den = sum((a - mean) ** 2 for a in o)
    return 1.0 - num / den


def brute_confusion(ref_vals, pred_vals, tau):
    tp = fp = fn = tn = 0
    for r, q in zip(ref_vals, pred_vals):
        rw, pw = r > tau, q > tau
        if rw and pw:
            tp += 1
        elif not rw and pw:
            fp += 1
        elif rw and not pw:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_percentile(values, p):
    s = sorted(values)
    rank = math.ceil(p / 100.0 * len(s))
    return s[rank - 1]


class TestRmse:
    def test_perfect_fit(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_direct_formula(self):
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5))

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            o = rng.normal(size=20)
            p = rng.normal(size=20)
            assert rmse(o, p) == pytest.approx(brute_rmse(o, p), abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            rmse([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            rmse([], [])


class TestNse:
    def test_perfect_fit(self):
        assert nse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0

    def test_mean_predictor_is_zero(self):
        o = [1.0, 2.0, 3.0]
        assert nse(o, [2.0, 2.0, 2.0]) == pytest.approx(0.0)

    def test_can_be_negative(self):
        assert nse([1.0, 2.0], [5.0, -5.0]) < 0

    def test_constant_observed_raises(self):
        with pytest.raises(ValueError, match="constant"):
            nse([2.0, 2.0], [1.0, 3.0])

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            o = rng.normal(size=15)
            p = rng.normal(size=15)
            assert nse(o, p) == pytest.approx(brute_nse(o, p), abs=1e-12)


class TestConfusionScores:
    def test_direct_formula(self):
        # tp=3, fp=1, fn=1, tn=1 on a 6-cell strip
        ref = make_grid([[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]])
        pred = make_grid([[1.0, 1.0, 1.0, 0.0, 1.0, 0.0]])
        rep = confusion_scores(ref, pred, tau=0.3)
        assert rep.confusion == (3, 1, 1, 1)
        assert rep.precision == pytest.approx(0.75)
        assert rep.recall == pytest.approx(0.75)
        assert rep.f1 == pytest.approx(0.75)

    def test_self_comparison_is_perfect(self):
        g = make_grid([[0.0, 0.5], [1.2, 0.1]])
        rep = confusion_scores(g, g)
        assert rep.precision == rep.recall == rep.f1 == 1.0

    def test_undefined_marked_not_zero(self):
        ref = make_grid([[0.0, 0.0]])
        pred = make_grid([[0.0, 0.0]])
        rep = confusion_scores(ref, pred)
        assert rep.precision is None and rep.recall is None and rep.f1 is None
        assert "undefined" in rep.notes

    def test_f1_harmonic_identity_and_counts(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            ref = make_grid(rng.uniform(0, 0.6, size=(5, 5)))
            pred = make_grid(rng.uniform(0, 0.6, size=(5, 5)))
            rep = confusion_scores(ref, pred)
            tp, fp, fn, tn = rep.confusion
            assert (tp, fp, fn, tn) == brute_confusion(ref.values.ravel(),
                                                       pred.values.ravel(), 0.3)
            assert tp + fp + fn + tn == rep.n == 25
            if rep.precision is not None and rep.recall is not None and rep.f1 is not None:
                hm = 2 * rep.precision * rep.recall / (rep.precision + rep.recall)
                assert abs(rep.f1 - hm) <= 1e-12

    def test_nodata_excluded(self):
        ref = make_grid([[1.0, -9999.0]])
        pred = make_grid([[1.0, 1.0]])
        rep = confusion_scores(ref, pred)
        assert rep.n == 1 and rep.confusion == (1, 0, 0, 0)


class TestErrorMap:
    def test_identical_gives_zero_map(self):
        g = make_grid([[1.0, 2.0]])
        np.testing.assert_array_equal(error_map(g, g).values, [[0.0, 0.0]])

    def test_direct_value(self):
        out = error_map(make_grid([[1.0]]), make_grid([[0.2]]))
        assert out.values[0, 0] == pytest.approx(0.8)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a = make_grid(rng.normal(size=(4, 4)))
        b = make_grid(rng.normal(size=(4, 4)))
        np.testing.assert_array_equal(error_map(a, b).values, error_map(b, a).values)

    def test_nodata_propagates(self):
        ref = make_grid([[1.0, -9999.0]])
        out = error_map(ref, make_grid([[1.0, 5.0]]))
        assert out.values[0, 1] == -9999.0


class TestPercentileError:
    def test_uniform_error(self):
        g = make_grid(np.full((3, 3), 0.5))
        for p in (1.0, 50.0, 99.0, 100.0):
            assert percentile_error(g, p) == 0.5

    def test_nearest_rank_excludes_single_outlier(self):
        vals = np.zeros(100)
        vals[37] = 9.9
        assert percentile_error(make_grid(vals.reshape(10, 10)), 99.0) == 0.0

    def test_p100_is_max(self):
        rng = np.random.default_rng(4)
        vals = rng.uniform(size=(6, 6))
        assert percentile_error(make_grid(vals), 100.0) == vals.max()

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            vals = rng.uniform(size=17)
            p = float(rng.uniform(1, 100))
            got = percentile_error(make_grid(vals.reshape(1, 17)), p)
            assert got == brute_percentile(vals, p)

    def test_bad_p(self):
        g = make_grid([[1.0]])
        with pytest.raises(ValueError):
            percentile_error(g, 0.0)
        with pytest.raises(ValueError):
            percentile_error(g, 101.0)


class TestDescriptiveStats:
    def test_all_zero(self):
        assert descriptive_stats(make_grid(np.zeros((2, 2)))) == (0.0, 0.0, 0.0)

    def test_direct_two_cell(self):
        mx, mean, std = descriptive_stats(make_grid([[0.0, 2.0]]))
        assert (mx, mean, std) == (2.0, 1.0, 1.0)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(6)
        vals = rng.uniform(size=(5, 5))
        mx, mean, std = descriptive_stats(make_grid(vals))
        flat = vals.ravel()
        m = sum(flat) / flat.size
        var = sum((v - m) ** 2 for v in flat) / flat.size
        assert mx == pytest.approx(flat.max(), abs=1e-12)
        assert mean == pytest.approx(m, abs=1e-12)
        assert std == pytest.approx(math.sqrt(var), abs=1e-12)


class TestControlPointSeries:
    def test_never_wet_cell_gives_zero_series(self):
        maps = [make_grid([[0.1, 0.5]]), make_grid([[0.2, 0.6]])]
        series = control_point_series(maps, [ControlPoint("dry", CellIndex(0, 0))])
        np.testing.assert_array_equal(series["dry"], [0.0, 0.0])

    def test_extraction_roundtrip_with_screening(self):
        maps = [make_grid([[0.1, 0.5]]), make_grid([[0.9, 0.2]])]
        series = control_point_series(maps, [ControlPoint("a", CellIndex(0, 0)),
                                             ControlPoint("b", CellIndex(0, 1))])
        np.testing.assert_array_equal(series["a"], [0.0, 0.9])
        np.testing.assert_array_equal(series["b"], [0.5, 0.0])

    def test_out_of_bounds_point(self):
        with pytest.raises(IndexError):
            control_point_series([make_grid([[1.0]])],
                                 [ControlPoint("x", CellIndex(2, 2))])

    def test_perfect_emulator_mean_nse(self):
        rng = np.random.default_rng(7)
        maps = [make_grid(rng.uniform(0.4, 2.0, size=(3, 3))) for _ in range(5)]
        pts = [ControlPoint(f"p{i}", CellIndex(i, i)) for i in range(3)]
        obs = control_point_series(maps, pts)
        pred = control_point_series(maps, pts)
        scores = [nse(obs[k], pred[k]) for k in obs]
        assert np.mean(scores) == 1.0


class TestReportCsvRow:
    def test_undefined_renders_as_text(self):
        rep = MetricsReport(precision=None, recall=0.5, f1=None,
                            confusion=(0, 0, 2, 3), n=5)
        row = report_csv_row(900.0, rep)
        cells = row.split(",")
        assert cells[0] == "900.0"
        assert cells[3] == "undefined"  # precision
        assert cells[4] == "0.5"
        assert cells[6:10] == ["0", "0", "2", "3"]
