"""Correlation inference, multiple-testing control, and supporting special
functions (regularized incomplete beta via continued fraction, normal tails).
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "betainc_reg",
    "student_t_p_value",
    "normal_sf",
    "pearson_with_ci",
    "fisher_z_compare",
    "bh_fdr",
    "ridge_cv_predict",
    "ols_residuals",
]

_BETA_EPS = 1e-15
_BETA_MAX_ITER = 500


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < 1e-300:
        d = 1e-300
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-300:
            d = 1e-300
        c = 1.0 + aa / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-300:
            d = 1e-300
        c = 1.0 + aa / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise RuntimeError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def student_t_p_value(t: float, df: float) -> float:
    """Two-sided p-value of a t statistic with df degrees of freedom."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def normal_sf(z: float) -> float:
    """Upper-tail probability of the standard normal."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def pearson_with_ci(x, y, z_crit: float = 1.96):
    """Pearson r with its t-test p-value and Fisher-Z 95% confidence interval.

    Returns (r, p, (ci_low, ci_high)).  The CI needs n >= 4; below that the
    bounds are NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n != y.size:
        raise ValueError(f"length mismatch: {n} vs {y.size}")
    if n < 2:
        raise ValueError(f"need at least 2 pairs, got {n}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in correlation input")
    xc = x - x.mean()
    yc = y - y.mean()
    ssx = float(xc @ xc)
    ssy = float(yc @ yc)
    if ssx == 0.0 or ssy == 0.0:
        raise ValueError("correlation undefined for zero-variance input")
    r = float(xc @ yc) / math.sqrt(ssx * ssy)
    r = max(-1.0, min(1.0, r))

    if n > 2 and abs(r) < 1.0:
        t = r * math.sqrt((n - 2) / (1.0 - r * r))
        p = student_t_p_value(t, n - 2)
    else:
        p = 0.0 if abs(r) == 1.0 else math.nan

    if n > 3:
        if abs(r) < 1.0:
            z = math.atanh(r)
            se = 1.0 / math.sqrt(n - 3)
            ci = (math.tanh(z - z_crit * se), math.tanh(z + z_crit * se))
        else:
            ci = (r, r)
    else:
        ci = (math.nan, math.nan)
    return r, p, ci


def fisher_z_compare(r1: float, r2: float, n: int):
    """Z test for the difference of two correlations measured on n subjects."""
    if n < 4:
        raise ValueError(f"need n >= 4, got {n}")
    if abs(r1) >= 1.0 or abs(r2) >= 1.0:
        raise ValueError("correlations must be strictly inside (-1, 1)")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(2.0 / (n - 3))
    p = 2.0 * normal_sf(abs(z))
    return z, min(p, 1.0)


def bh_fdr(pvalues, q: float = 0.05) -> np.ndarray:
    """Benjamini-Hochberg step-up: reject all p <= p_(k*), k* the largest k
    with p_(k) <= k*q/m."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    below = np.flatnonzero(ranked <= (np.arange(1, m + 1) * q / m))
    if below.size == 0:
        return np.zeros(m, dtype=bool)
    cutoff = ranked[below[-1]]
    return p <= cutoff


def _ridge_fit(x: np.ndarray, y: np.ndarray, alpha: float):
    """Ridge with unpenalized intercept via centering."""
    xm = x.mean(axis=0)
    ym = y.mean()
    xc = x - xm
    yc = y - ym
    d = x.shape[1]
    beta = np.linalg.solve(xc.T @ xc + alpha * np.eye(d), xc.T @ yc)
    intercept = ym - xm @ beta
    return beta, intercept


def ridge_cv_predict(x, y, alpha: float = 1000.0, folds: int = 5) -> np.ndarray:
    """Out-of-fold ridge predictions with deterministic interleaved folds."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    preds = np.empty(n)
    for f in range(folds):
        test = np.arange(f, n, folds)
        train = np.setdiff1d(np.arange(n), test)
        beta, intercept = _ridge_fit(x[train], y[train], alpha)
        preds[test] = x[test] @ beta + intercept
    return preds


def ols_residuals(y, x) -> np.ndarray:
    """Residuals of a univariate OLS of y on x (with intercept)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    design = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return y - design @ coef
