"""Fitting and validating the linear gap-to-improvement rule.

Ordinary least squares (unweighted; per-point standard deviations are carried
for display only), Pearson and Spearman correlations with two-sided p-values,
leave-one-out cross-validation and prediction.

p-value procedures: Pearson uses the t statistic r*sqrt((n-2)/(1-r^2))
against a Student-t distribution whose CDF is evaluated through the
regularized incomplete beta function. Spearman uses the exact permutation
distribution of the rank correlation for n <= 8 and the same t approximation
above that. Reported p-values are floored at 1e-12 so a continuous statistic
is never printed as zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from typing import Optional

import numpy as np
from scipy.special import betainc

from .numcore import ContractError

P_FLOOR = 1e-12


class DegenerateInputError(ValueError):
    """Inputs carry no usable variation (e.g. all x equal)."""


@dataclass(frozen=True)
class LawPoint:
    x: float          # initial gap
    y: float          # improvement
    label: str = ""   # context kind or model size
    y_std: Optional[float] = None


@dataclass(frozen=True)
class LawFit:
    slope: float
    intercept: float
    r_squared: float
    pearson_r: float
    pearson_p: float
    spearman_rho: float
    spearman_p: float
    loocv_rmse: float
    loocv_r_squared: float
    n_points: int


def _xy(points: list[LawPoint]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray([p.x for p in points], dtype=np.float64)
    y = np.asarray([p.y for p in points], dtype=np.float64)
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ContractError("points must be finite")
    return x, y


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    sxx = float(np.sum((x - x.mean()) ** 2))
    if sxx == 0.0:
        raise DegenerateInputError("all x values equal")
    slope = float(np.sum((x - x.mean()) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        if ss_res == 0.0:
            return slope, intercept, 1.0
        raise DegenerateInputError("flat y with nonzero residuals")
    return slope, intercept, 1.0 - ss_res / ss_tot


def ols_fit(points: list[LawPoint]) -> tuple[float, float, float]:
    """(slope, intercept, R^2) minimizing the sum of squared residuals."""
    if len(points) < 3:
        raise ContractError("need at least 3 points")
    return _ols(*_xy(points))


def _t_sf_two_sided(t: float, dof: int) -> float:
    """Two-sided tail of Student-t via the regularized incomplete beta."""
    if not np.isfinite(t):
        return 0.0
    x = dof / (dof + t * t)
    return float(betainc(dof / 2.0, 0.5, x))


def _pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    vx, vy = x - x.mean(), y - y.mean()
    sx = float(np.sqrt(np.sum(vx ** 2)))
    sy = float(np.sqrt(np.sum(vy ** 2)))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("zero variance")
    return float(np.clip(np.sum(vx * vy) / (sx * sy), -1.0, 1.0))


def pearson(points: list[LawPoint]) -> tuple[float, float]:
    """Sample correlation and two-sided p from the t statistic."""
    if len(points) < 3:
        raise ContractError("need at least 3 points")
    x, y = _xy(points)
    r = _pearson_r(x, y)
    n = len(points)
    if abs(r) >= 1.0:
        return r, P_FLOOR
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return r, max(_t_sf_two_sided(float(t), n - 2), P_FLOOR)


def _ranks(v: np.ndarray) -> np.ndarray:
    """Average ranks, ties get the mean of their rank range."""
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(points: list[LawPoint]) -> tuple[float, float]:
    """Rank correlation; exact permutation p for n <= 8, else t approximation."""
    if len(points) < 3:
        raise ContractError("need at least 3 points")
    x, y = _xy(points)
    rx, ry = _ranks(x), _ranks(y)
    rho = _pearson_r(rx, ry)
    n = len(points)
    if n <= 8:
        threshold = abs(rho) - 1e-12
        hits = 0
        total = 0
        for perm in permutations(range(n)):
            total += 1
            r_perm = _pearson_r(rx, ry[list(perm)])
            if abs(r_perm) >= threshold:
                hits += 1
        return rho, max(hits / total, P_FLOOR)
    if abs(rho) >= 1.0:
        return rho, P_FLOOR
    t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, max(_t_sf_two_sided(float(t), n - 2), P_FLOOR)


def loocv(points: list[LawPoint]) -> tuple[float, float]:
    """Out-of-fold RMSE and R^2 of the linear rule."""
    if len(points) < 4:
        raise ContractError("need at least 4 points for leave-one-out")
    x, y = _xy(points)
    n = len(points)
    residuals = np.empty(n)
    for i in range(n):
        keep = np.arange(n) != i
        slope, intercept, _ = _ols(x[keep], y[keep])
        residuals[i] = y[i] - (slope * x[i] + intercept)
    rmse = float(np.sqrt(np.mean(residuals ** 2)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        if float(np.sum(residuals ** 2)) == 0.0:
            return rmse, 1.0
        raise DegenerateInputError("flat y with nonzero residuals")
    return rmse, 1.0 - float(np.sum(residuals ** 2)) / ss_tot


def fit_law(points: list[LawPoint]) -> LawFit:
    slope, intercept, r2 = ols_fit(points)
    r, rp = pearson(points)
    rho, rhop = spearman(points)
    rmse, loo_r2 = loocv(points)
    return LawFit(slope=slope, intercept=intercept, r_squared=r2,
                  pearson_r=r, pearson_p=rp, spearman_rho=rho,
                  spearman_p=rhop, loocv_rmse=rmse, loocv_r_squared=loo_r2,
                  n_points=len(points))


def predict(fit, gap: float) -> float:
    """Predicted improvement at the given initial gap."""
    return fit.slope * gap + fit.intercept


# ---------------------------------------------------------------------------
# Aggregation and report/plot-data files
# ---------------------------------------------------------------------------


def points_from_records(records) -> list[LawPoint]:
    """One point per label: mean gap and mean improvement over seeds, with
    the improvement standard deviation carried as the error bar."""
    by_label: dict[str, list] = {}
    for rec in records:
        if rec.improvement is None:
            continue
        key = rec.context_kind if rec.model in ("", None) else rec.model
        by_label.setdefault(key, []).append(rec)
    points = []
    for label in sorted(by_label):
        rows = by_label[label]
        xs = [r.initial_gap for r in rows]
        ys = [r.improvement for r in rows]
        points.append(LawPoint(
            x=float(np.mean(xs)), y=float(np.mean(ys)), label=label,
            y_std=float(np.std(ys, ddof=1)) if len(ys) > 1 else 0.0))
    return points


def write_fit_report(path, fit: LawFit, provenance: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key, val in sorted(provenance.items()):
            f.write(f"# {key}={val}\n")
        for name in ("slope", "intercept", "r_squared", "pearson_r",
                     "pearson_p", "spearman_rho", "spearman_p", "loocv_rmse",
                     "loocv_r_squared", "n_points"):
            f.write(f"{name}: {getattr(fit, name)!r}\n")


def read_fit_report(path) -> LawFit:
    fields: dict[str, float] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith("#") or ":" not in line:
                continue
            name, val = line.split(":", 1)
            fields[name.strip()] = float(val)
    fields["n_points"] = int(fields["n_points"])
    return LawFit(**fields)


def write_plot_data(path, points: list[LawPoint], fit: LawFit,
                    provenance: dict) -> None:
    """(x, y, y_err, label, fitted_y) rows for external plotting."""
    with open(path, "w", encoding="utf-8") as f:
        for key, val in sorted(provenance.items()):
            f.write(f"# {key}={val}\n")
        f.write("x,y,y_err,label,fitted_y\n")
        for p in points:
            err = p.y_std if p.y_std is not None else ""
            f.write(f"{p.x!r},{p.y!r},{err!r},{p.label},"
                    f"{predict(fit, p.x)!r}\n")
