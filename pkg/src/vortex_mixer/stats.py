"""Small estimation helpers shared by the Monte Carlo harnesses."""

from dataclasses import dataclass

import numpy as np

Z95 = 1.96


def mean_ci(x: np.ndarray) -> tuple[float, float]:
    """Sample mean and 95% half-width."""
    x = np.asarray(x, dtype=np.float64)
    return float(x.mean()), Z95 * float(x.std(ddof=1)) / np.sqrt(x.size)


def exp_mean_ci(logx: np.ndarray) -> tuple[float, float, float]:
    """Mean, 95% half-width, and effective sample size of exp(logx).

    Aggregation is stabilized around the sample maximum so that moderately
    large exponents never overflow.
    """
    logx = np.asarray(logx, dtype=np.float64)
    m = float(np.max(logx))
    y = np.exp(logx - m)
    scale = np.exp(m)
    mean = float(np.mean(y)) * scale
    hw = Z95 * float(np.std(y, ddof=1)) / np.sqrt(y.size) * scale
    ess = float(np.sum(y) ** 2 / np.sum(y * y))
    return mean, hw, ess


def linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, float]:
    """Least-squares (slope, intercept, R^2, slope standard error)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    slope = float(np.sum((x - xm) * (y - ym))) / sxx
    inter = ym - slope * xm
    resid = y - (inter + slope * x)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - ym) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    se = np.sqrt(ss_res / max(n - 2, 1) / sxx)
    return slope, float(inter), r2, float(se)


def wilson_lower(p_hat: float, n: int, z: float = Z95) -> float:
    """Lower 95% Wilson bound for a binomial proportion."""
    if n == 0:
        return 0.0
    denom = 1.0 + z * z / n
    center = p_hat + z * z / (2 * n)
    spread = z * np.sqrt(p_hat * (1 - p_hat) / n + z * z / (4 * n * n))
    return max(0.0, (center - spread) / denom)


@dataclass
class MomentReport:
    """Outcome of one Monte Carlo moment check against a theoretical ceiling."""

    statistic: str
    estimate: float
    ci: float
    bound: float
    passed: bool
    n_traj: int
    T: float
    dt: float
    ess: float = np.nan
    details: dict | None = None
