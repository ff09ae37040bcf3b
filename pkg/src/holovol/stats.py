"""Population statistics for decay rates and particle sizes."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special
from scipy.optimize import OptimizeWarning, curve_fit

from .errors import DegenerateTestError, InsufficientDataError, InvalidInputError


@dataclass(frozen=True)
class VolatilitySummary:
    mu_K: float
    sigma_K: float
    n: int
    histogram: tuple[np.ndarray, np.ndarray]  # (edges, counts)
    trim: float = 0.0
    n_trimmed: int = 0


@dataclass(frozen=True)
class SizeDistribution:
    edges: np.ndarray  # um, log-spaced
    dN_dlogDp: np.ndarray
    counts: np.ndarray
    overflow: dict = field(default_factory=lambda: {"below": 0, "above": 0})
    mode_diameter: float | None = None

    @property
    def log_widths(self) -> np.ndarray:
        return np.diff(np.log10(self.edges))


def _histogram(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        half = max(abs(lo) * 1e-3, 1e-12)
        edges = np.array([lo - half, lo + half])
    else:
        q75, q25 = np.percentile(values, [75, 25])
        width = 2 * (q75 - q25) * values.size ** (-1 / 3)
        # a near-zero IQR with a wide range would ask for absurd bin counts
        cap = max(10, values.size)
        nbins = 1 if width <= 0 else min(cap, max(1, int(math.ceil((hi - lo) / width))))
        edges = np.linspace(lo, hi, nbins + 1)
    counts, _ = np.histogram(values, edges)
    return edges, counts


def fit_gaussian(samples: Sequence[float], outlier_trim: float = 0.01) -> VolatilitySummary:
    """Trimmed maximum-likelihood normal fit (mean and population std).

    ``outlier_trim`` is removed from each tail before fitting; the
    Freedman-Diaconis histogram of the kept samples is attached.
    """
    x = np.sort(np.asarray(samples, float))
    if x.size < 2:
        raise InsufficientDataError("need at least 2 samples")
    if not 0 <= outlier_trim < 0.5:
        raise InvalidInputError("outlier_trim must be in [0, 0.5)")
    k = int(math.floor(outlier_trim * x.size))
    kept = x[k: x.size - k] if k else x
    if kept.size < 2:
        raise InsufficientDataError("trimming left fewer than 2 samples")
    mu = float(kept.mean())
    sigma = float(kept.std())
    return VolatilitySummary(mu, sigma, int(kept.size), _histogram(kept), outlier_trim, 2 * k)


def size_bins(size_range: tuple[float, float] = (0.5, 19.8), bins_per_decade: int = 16) -> np.ndarray:
    """Log-spaced edges of width 1/bins_per_decade decades; the last bin is cut at the range end."""
    lo, hi = size_range
    if not 0 < lo < hi:
        raise InvalidInputError("size range must satisfy 0 < lo < hi")
    n = int(math.ceil(round(math.log10(hi / lo) * bins_per_decade, 9)))
    edges = lo * 10.0 ** (np.arange(n + 1) / bins_per_decade)
    edges[-1] = hi
    return edges


def size_distribution(
    diameters: Sequence[float],
    size_range: tuple[float, float] = (0.5, 19.8),
    bins_per_decade: int = 16,
) -> SizeDistribution:
    d = np.asarray(diameters, float)
    if d.size and not (d > 0).all():
        raise InvalidInputError("diameters must be positive")
    edges = size_bins(size_range, bins_per_decade)
    inside = (d >= edges[0]) & (d <= edges[-1])
    counts, _ = np.histogram(d[inside], edges)
    widths = np.diff(np.log10(edges))
    overflow = {"below": int((d < edges[0]).sum()), "above": int((d > edges[-1]).sum())}
    return SizeDistribution(edges, counts / widths, counts, overflow)


def _gauss(x, amp, mu, sigma):
    return amp * np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def fit_lognormal(dist: SizeDistribution) -> float:
    """Mode diameter (um): peak of a Gaussian fitted to dN/dlogDp in log10 Dp.

    Counts are normalised by their maximum before fitting, which makes the
    result independent of the overall count scale.
    """
    y = np.asarray(dist.dN_dlogDp, float)
    if np.count_nonzero(y > 0) < 3:
        raise InsufficientDataError("need at least 3 non-empty bins")
    logs = np.log10(dist.edges)
    x = (logs[:-1] + logs[1:]) / 2
    y = y / y.max()
    w = y / y.sum()
    mu0 = float(w @ x)
    sd0 = max(math.sqrt(float(w @ (x - mu0) ** 2)), 1e-3)
    with warnings.catch_warnings():
        # an exact fit has no covariance estimate; only the centre is used
        warnings.simplefilter("ignore", OptimizeWarning)
        (amp, mu, sigma), _ = curve_fit(_gauss, x, y, p0=(1.0, mu0, sd0), maxfev=10000)
    return float(10.0**mu)


def t_test(a: Sequence[float], b: Sequence[float], mode: str = "welch") -> tuple[float, float]:
    """Two-sided t-test; returns (t, p).

    ``paired`` tests the mean of a - b; ``welch`` compares independent
    samples without assuming equal variances.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if mode == "paired":
        if a.size != b.size:
            raise InvalidInputError("paired test needs equal-length samples")
        if a.size < 2:
            raise InsufficientDataError("paired test needs at least 2 pairs")
        d = a - b
        var = float(d.var(ddof=1))
        if var == 0:
            raise DegenerateTestError("differences have zero variance")
        t = float(d.mean()) / math.sqrt(var / d.size)
        df = d.size - 1.0
    elif mode == "welch":
        if a.size < 2 or b.size < 2:
            raise InsufficientDataError("welch test needs at least 2 samples per group")
        va = float(a.var(ddof=1)) / a.size
        vb = float(b.var(ddof=1)) / b.size
        if va + vb == 0:
            raise DegenerateTestError("both samples have zero variance")
        t = (float(a.mean()) - float(b.mean())) / math.sqrt(va + vb)
        df = (va + vb) ** 2 / (va * va / (a.size - 1) + vb * vb / (b.size - 1))
    else:
        raise InvalidInputError(f"unknown t-test mode {mode!r}")
    # two-sided tail of Student's t via the regularised incomplete beta
    p = float(special.betainc(df / 2, 0.5, df / (df + t * t)))
    return t, min(1.0, max(0.0, p))
