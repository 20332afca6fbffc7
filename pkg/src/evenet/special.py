"""Digamma, trigamma and log-gamma on the positive reals.

Arguments below ``SHIFT`` are pushed up with the recurrences
``psi(x) = psi(x + 1) - 1/x`` etc. and then evaluated with the Stirling-type
asymptotic expansions, which reach double precision for x >= 6.  The scalar
kernels are compiled as numba ufuncs; the public wrappers check the domain
and accept a float or an array.
"""
from __future__ import annotations

import math

import numba as nb
import numpy as np

SHIFT = 6.0


class DomainError(ValueError):
    """Argument outside the supported domain x > 0."""


@nb.vectorize(["float64(float64)"], cache=True)
def _digamma(x):
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    r = inv * inv
    # B_2k / (2k), k = 10 .. 1
    poly = -174611.0 / 6600.0
    poly = poly * r + 43867.0 / 14364.0
    poly = poly * r - 3617.0 / 8160.0
    poly = poly * r + 1.0 / 12.0
    poly = poly * r - 691.0 / 32760.0
    poly = poly * r + 1.0 / 132.0
    poly = poly * r - 1.0 / 240.0
    poly = poly * r + 1.0 / 252.0
    poly = poly * r - 1.0 / 120.0
    poly = poly * r + 1.0 / 12.0
    return acc + math.log(x) - 0.5 * inv - r * poly


@nb.vectorize(["float64(float64)"], cache=True)
def _trigamma(x):
    acc = 0.0
    while x < 6.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    r = inv * inv
    # B_2k, k = 10 .. 1
    poly = -174611.0 / 330.0
    poly = poly * r + 43867.0 / 798.0
    poly = poly * r - 3617.0 / 510.0
    poly = poly * r + 7.0 / 6.0
    poly = poly * r - 691.0 / 2730.0
    poly = poly * r + 5.0 / 66.0
    poly = poly * r - 1.0 / 30.0
    poly = poly * r + 1.0 / 42.0
    poly = poly * r - 1.0 / 30.0
    poly = poly * r + 1.0 / 6.0
    return acc + inv + 0.5 * r + inv * r * poly


@nb.vectorize(["float64(float64)"], cache=True)
def _log_gamma(x):
    if x == 1.0 or x == 2.0:
        return 0.0
    prod = 1.0
    while x < 6.0:
        prod *= x
        x += 1.0
    inv = 1.0 / x
    r = inv * inv
    # B_2k / (2k (2k - 1)), k = 10 .. 1
    poly = -174611.0 / 125400.0
    poly = poly * r + 43867.0 / 244188.0
    poly = poly * r - 3617.0 / 122400.0
    poly = poly * r + 1.0 / 156.0
    poly = poly * r - 691.0 / 360360.0
    poly = poly * r + 1.0 / 1188.0
    poly = poly * r - 1.0 / 1680.0
    poly = poly * r + 1.0 / 1260.0
    poly = poly * r - 1.0 / 360.0
    poly = poly * r + 1.0 / 12.0
    # 0.5 * ln(2 pi)
    val = (x - 0.5) * math.log(x) - x + 0.9189385332046728 + inv * poly
    return val - math.log(prod)


def _apply(kernel, x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not (arr > 0).all() or not np.isfinite(arr).all():
        raise DomainError(f"{name} requires finite x > 0")
    out = kernel(arr)
    if arr.ndim == 0 and not isinstance(x, np.ndarray):
        return float(out)
    return out


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0."""
    return _apply(_digamma, x, "digamma")


def trigamma(x):
    """psi'(x) for x > 0."""
    return _apply(_trigamma, x, "trigamma")


def log_gamma(x):
    """ln Gamma(x) for x > 0."""
    return _apply(_log_gamma, x, "log_gamma")
