import numpy as np
import pytest
import scipy.stats

from opsdlab.evalproto import GapRecord
from opsdlab.lawfit import (DegenerateInputError, LawFit, LawPoint, fit_law,
                            loocv, ols_fit, pearson, points_from_records,
                            predict, read_fit_report, spearman,
                            write_fit_report, write_plot_data)
from opsdlab.numcore import ContractError


def line_points(slope, intercept, xs):
    return [LawPoint(x, slope * x + intercept, label=str(i))
            for i, x in enumerate(xs)]


XS6 = [0.02, 0.05, 0.09, 0.12, 0.16, 0.20]


class TestOls:
    def test_reference_fit_a(self):
        # six synthetic points exactly on the first reported line
        slope, intercept, r2 = ols_fit(line_points(1.492, -0.003, XS6))
        assert abs(slope - 1.492) < 1e-9
        assert abs(intercept + 0.003) < 1e-9
        assert abs(r2 - 1.0) < 1e-9

    def test_reference_fit_b(self):
        slope, intercept, r2 = ols_fit(line_points(0.663, 0.004, XS6))
        assert abs(slope - 0.663) < 1e-9
        assert abs(intercept - 0.004) < 1e-9
        assert abs(r2 - 1.0) < 1e-9

    def test_flat_y(self):
        pts = [LawPoint(x, 3.0) for x in (1.0, 2.0, 4.0)]
        slope, intercept, r2 = ols_fit(pts)
        assert slope == 0.0 and intercept == 3.0 and r2 == 1.0

    def test_matches_polyfit(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=10)
        y = 2.0 * x + rng.normal(size=10)
        pts = [LawPoint(a, b) for a, b in zip(x, y)]
        slope, intercept, _ = ols_fit(pts)
        ref = np.polyfit(x, y, 1)
        assert abs(slope - ref[0]) < 1e-10 and abs(intercept - ref[1]) < 1e-10

    def test_residual_orthogonality(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=9)
        y = 0.5 * x + rng.normal(size=9)
        slope, intercept, _ = ols_fit([LawPoint(a, b) for a, b in zip(x, y)])
        resid = y - (slope * x + intercept)
        assert abs(resid.sum()) < 1e-9
        assert abs((resid * x).sum()) < 1e-9

    def test_degenerate_x(self):
        with pytest.raises(DegenerateInputError):
            ols_fit([LawPoint(1.0, y) for y in (1.0, 2.0, 3.0)])

    def test_too_few_points(self):
        with pytest.raises(ContractError):
            ols_fit([LawPoint(0, 0), LawPoint(1, 1)])


class TestPearson:
    def test_perfect_line(self):
        r, p = pearson(line_points(2.0, 1.0, [0, 1, 2, 3]))
        assert abs(r - 1.0) < 1e-12
        assert p == 1e-12  # reported at the floor

    def test_hand_formula_oracle(self):
        r, _ = pearson([LawPoint(1, 2), LawPoint(2, 1), LawPoint(3, 4)])
        assert abs(r - 0.6546537) < 1e-6

    def test_p_matches_scipy(self):
        rng = np.random.default_rng(2)
        for n in (5, 6, 12, 30):
            x = rng.normal(size=n)
            y = 0.8 * x + rng.normal(size=n) * 0.7
            r, p = pearson([LawPoint(a, b) for a, b in zip(x, y)])
            ref = scipy.stats.pearsonr(x, y)
            assert abs(r - ref.statistic) < 1e-12
            assert abs(p - ref.pvalue) < 1e-10

    def test_paper_scale_p(self):
        # n=6 with r ~ 0.974 gives p near 1e-3 (checked within a factor of 2)
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = np.asarray(XS6)
            y = 1.5 * x + rng.normal(size=6) * 0.012
            r, p = pearson([LawPoint(a, b) for a, b in zip(x, y)])
            if abs(r - 0.974) < 0.004:
                assert 0.0005 < p < 0.002
                break

    def test_zero_variance(self):
        with pytest.raises(DegenerateInputError):
            pearson([LawPoint(1, 2), LawPoint(2, 2), LawPoint(3, 2)])

    def test_affine_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=8)
        y = rng.normal(size=8)
        r1, _ = pearson([LawPoint(a, b) for a, b in zip(x, y)])
        r2, _ = pearson([LawPoint(3 * a + 5, 0.1 * b - 2) for a, b in zip(x, y)])
        assert abs(r1 - r2) < 1e-12


class TestSpearman:
    def test_monotone_rho_one(self):
        rho, _ = spearman([LawPoint(x, np.exp(x)) for x in (0.1, 0.5, 1, 2)])
        assert rho == pytest.approx(1.0, abs=1e-12)

    def test_exact_p_n3(self):
        rho, p = spearman([LawPoint(1, 1), LawPoint(2, 4), LawPoint(3, 9)])
        assert rho == pytest.approx(1.0, abs=1e-12)
        assert p == pytest.approx(2 / 6, abs=1e-12)

    def test_exact_p_n6(self):
        rho, p = spearman(line_points(1.0, 0.0, XS6))
        assert rho == pytest.approx(1.0, abs=1e-12)
        assert p == pytest.approx(2 / 720, abs=1e-12)

    def test_matches_scipy_large_n(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=20)
        y = x + rng.normal(size=20) * 0.8
        rho, p = spearman([LawPoint(a, b) for a, b in zip(x, y)])
        ref = scipy.stats.spearmanr(x, y)
        assert abs(rho - ref.statistic) < 1e-12
        assert abs(p - ref.pvalue) < 1e-9

    def test_monotone_invariance(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=9)
        y = rng.normal(size=9)
        r1, _ = spearman([LawPoint(a, b) for a, b in zip(x, y)])
        r2, _ = spearman([LawPoint(np.exp(a), b ** 3) for a, b in zip(x, y)])
        assert abs(r1 - r2) < 1e-12

    def test_ties_average_ranks(self):
        pts = [LawPoint(1, 1), LawPoint(1, 2), LawPoint(2, 3), LawPoint(3, 3)]
        rho, _ = spearman(pts)
        ref = scipy.stats.spearmanr([1, 1, 2, 3], [1, 2, 3, 3])
        assert abs(rho - ref.statistic) < 1e-12


class TestLoocv:
    def test_collinear_zero_rmse(self):
        rmse, r2 = loocv(line_points(1.492, -0.003, XS6))
        assert rmse < 1e-9 and abs(r2 - 1.0) < 1e-9

    def test_hand_fit_offset_point(self):
        # 3 collinear points + 1 offset by delta: fold residual by hand
        pts = [LawPoint(0, 0), LawPoint(1, 1), LawPoint(2, 2),
               LawPoint(3, 3 + 0.5)]
        rmse, _ = loocv(pts)
        residuals = []
        x = np.array([p.x for p in pts])
        y = np.array([p.y for p in pts])
        for i in range(4):
            keep = np.arange(4) != i
            coef = np.polyfit(x[keep], y[keep], 1)
            residuals.append(y[i] - np.polyval(coef, x[i]))
        assert rmse == pytest.approx(float(np.sqrt(np.mean(
            np.square(residuals)))), abs=1e-12)

    def test_needs_four_points(self):
        with pytest.raises(ContractError):
            loocv(line_points(1, 0, [0, 1, 2]))

    def test_rmse_nonnegative_random(self):
        rng = np.random.default_rng(7)
        pts = [LawPoint(a, b) for a, b in
               zip(rng.normal(size=8), rng.normal(size=8))]
        rmse, r2 = loocv(pts)
        assert rmse >= 0.0 and r2 <= 1.0


class TestPredictAndReport:
    def test_gap_zero_gives_intercept(self):
        fit = fit_law(line_points(1.492, -0.003, XS6))
        assert predict(fit, 0.0) == pytest.approx(-0.003, abs=1e-9)

    def test_reference_predictions(self):
        fit_a = fit_law(line_points(1.492, -0.003, XS6))
        assert predict(fit_a, 0.10) == pytest.approx(0.1462, abs=1e-9)
        fit_b = fit_law(line_points(0.663, 0.004, XS6))
        assert predict(fit_b, 0.10) == pytest.approx(0.0703, abs=1e-9)

    def test_mean_residual_zero(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=10)
        y = 0.3 * x + rng.normal(size=10)
        pts = [LawPoint(a, b) for a, b in zip(x, y)]
        fit = fit_law(pts)
        resid = [p.y - predict(fit, p.x) for p in pts]
        assert abs(np.mean(resid)) < 1e-9

    def test_report_roundtrip(self, tmp_path):
        fit = fit_law(line_points(1.492, -0.003, XS6))
        path = tmp_path / "fit_report.txt"
        write_fit_report(path, fit, {"config_hash": "abc123"})
        assert "# config_hash=abc123" in path.read_text()
        loaded = read_fit_report(path)
        assert loaded == fit

    def test_plot_data(self, tmp_path):
        pts = line_points(1.0, 0.0, [0.1, 0.2, 0.3, 0.4])
        fit = fit_law(pts)
        path = tmp_path / "plot.csv"
        write_plot_data(path, pts, fit, {"config_hash": "x"})
        lines = [l for l in path.read_text().splitlines()
                 if not l.startswith("#")]
        assert lines[0] == "x,y,y_err,label,fitted_y"
        assert len(lines) == 5


class TestAggregation:
    def test_per_label_means(self):
        records = [
            GapRecord("feedback", "", 1, 0, 0, 0.10, 0.05),
            GapRecord("feedback", "", 2, 0, 0, 0.14, 0.07),
            GapRecord("none", "", 1, 0, 0, 0.00, 0.01),
            GapRecord("none", "", 2, 0, 0, 0.02, -0.01),
        ]
        points = points_from_records(records)
        assert len(points) == 2
        by_label = {p.label: p for p in points}
        assert by_label["feedback"].x == pytest.approx(0.12)
        assert by_label["feedback"].y == pytest.approx(0.06)
        assert by_label["none"].y_std == pytest.approx(np.std([0.01, -0.01],
                                                              ddof=1))

    def test_model_label_wins(self):
        records = [GapRecord("peer_solution_feedback", "xs", 1, 0, 0, 0.1, 0.1),
                   GapRecord("peer_solution_feedback", "s", 1, 0, 0, 0.2, 0.2)]
        points = points_from_records(records)
        assert {p.label for p in points} == {"xs", "s"}

    def test_unfilled_improvements_skipped(self):
        records = [GapRecord("none", "", 1, 0, 0, 0.1, None)]
        assert points_from_records(records) == []
