"""
Statistical primitives used by the criticality and safety-margin pipeline.

Everything here is a pure function.  The Student-t quantile is computed by
bisection on a self-contained regularized incomplete beta function so the
stopping rule in :mod:`critmargin.truecrit` has no hidden dependency on a
particular SciPy build.
"""
from __future__ import annotations

import math
from functools import lru_cache
from statistics import NormalDist
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "regularized_incomplete_beta",
    "t_two_sided_mass",
    "t_quantile_two_sided",
    "z_quantile_one_sided",
    "sample_stdev_bessel",
    "scott_bandwidth",
    "PercentileErrorBound",
    "percentile_error_bounds",
    "percentile_error_bound",
    "effective_sample_size",
]

_CF_MAX_ITER = 200_000
_CF_EPS = 1e-16
_TINY = 1e-300


def _check_confidence(name: str, value: float) -> None:
    if not (0.0 < value < 1.0):
        raise ValueError(f"{name} must lie in the open interval (0, 1), got {value!r}")


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    # Modified Lentz evaluation of the incomplete beta continued fraction.
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function ``I_x(a, b)`` for ``a, b > 0``."""
    if a <= 0.0 or b <= 0.0:
        raise ValueError("shape parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def t_two_sided_mass(t: float, dof: float) -> float:
    """Probability mass of the Student-t distribution inside ``[-t, t]``."""
    if t <= 0.0:
        return 0.0
    x = dof / (dof + t * t)
    return 1.0 - regularized_incomplete_beta(0.5 * dof, 0.5, x)


@lru_cache(maxsize=65536)
def t_quantile_two_sided(alpha: float, dof: int) -> float:
    """Half-width ``t`` of the central ``alpha`` interval of Student's t.

    Bisection on :func:`t_two_sided_mass`; the bracket is shrunk until the
    enclosed probability is pinned to 1e-8 and the abscissa to ~1e-12.
    """
    _check_confidence("alpha", alpha)
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof!r}")
    lo, hi = 0.0, 2.0
    while t_two_sided_mass(hi, dof) < alpha:
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        mass = t_two_sided_mass(mid, dof)
        if mass < alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi) and abs(mass - alpha) <= 1e-8:
            break
    return 0.5 * (lo + hi)


def z_quantile_one_sided(alpha: float) -> float:
    """z such that a standard normal exceeds it with probability ``1 - alpha``."""
    _check_confidence("alpha", alpha)
    return NormalDist().inv_cdf(alpha)


def sample_stdev_bessel(values: Sequence[float]) -> float:
    x = np.asarray(values, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("sample standard deviation needs at least two values")
    return float(np.std(x, ddof=1))


def scott_bandwidth(stdev: float, m: int) -> float:
    """Scott's rule for a 2-D plot: ``stdev * m**(-1/6)``."""
    if m < 1:
        raise ValueError("m must be a positive integer")
    return stdev * m ** (-1.0 / 6.0)


class PercentileErrorBound(NamedTuple):
    tight: float
    loose: float
    normal_approx_ok: bool


def percentile_error_bounds(d: float, beta: float, alpha: float) -> PercentileErrorBound:
    """Both percentile-error bounds for an effective sample size ``d``.

    The tight bound is the positive root of
    ``eps = z * sqrt((beta - eps) * (1 - beta + eps) / d)``, i.e. the
    estimated percentile sits at population level ``beta - eps``.  The loose
    bound replaces ``sqrt(beta*(1-beta))`` by its maximum 0.5.
    """
    if d <= 0:
        raise ValueError("effective sample size must be positive")
    _check_confidence("beta", beta)
    z = z_quantile_one_sided(alpha)
    k2 = z * z / d
    # (1 + k2) eps^2 - k2 (2 beta - 1) eps - k2 beta (1 - beta) = 0
    qa = 1.0 + k2
    qb = -k2 * (2.0 * beta - 1.0)
    qc = -k2 * beta * (1.0 - beta)
    disc = qb * qb - 4.0 * qa * qc
    tight = (-qb + math.sqrt(disc)) / (2.0 * qa)
    loose = 0.5 * z / math.sqrt(d)
    return PercentileErrorBound(max(tight, 0.0), loose, d * (1.0 - beta) >= 5.0)


def percentile_error_bound(d: float, beta: float, alpha: float) -> float:
    return percentile_error_bounds(d, beta, alpha).tight


def effective_sample_size(
    m: int,
    bandwidth: float,
    proxy_range: float,
    kernel: str = "gaussian",
    boundary_halving: bool = False,
) -> float:
    """Typical number of tuples supporting one proxy column of the KDE.

    The box-kernel count ``m * bandwidth / proxy_range`` is scaled by
    ``sqrt(2*pi)`` for Gaussian kernels and halved near the axis ends.
    """
    if proxy_range <= 0:
        raise ValueError("proxy_range must be positive")
    if m < 1 or bandwidth <= 0:
        raise ValueError("m and bandwidth must be positive")
    d = m * bandwidth / proxy_range
    if kernel == "gaussian":
        d *= math.sqrt(2.0 * math.pi)
    elif kernel != "box":
        raise ValueError(f"unknown kernel {kernel!r}; expected 'box' or 'gaussian'")
    if boundary_halving:
        d /= 2.0
    return d
