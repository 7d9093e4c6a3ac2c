"""Compactly supported symmetric kernels and their moments."""

from __future__ import annotations

import enum
from functools import lru_cache

import numpy as np
from scipy import integrate


class BandwidthError(ValueError):
    pass


class Kernel(str, enum.Enum):
    """Second-order kernels supported on [-1, 1]."""

    EPANECHNIKOV = "epanechnikov"
    BIWEIGHT = "biweight"
    TRIANGULAR = "triangular"

    def __call__(self, t):
        return evaluate(self, t)


def get_kernel(kernel: "Kernel | str") -> Kernel:
    if isinstance(kernel, Kernel):
        return kernel
    try:
        return Kernel(str(kernel).lower())
    except ValueError:
        names = ", ".join(k.value for k in Kernel)
        raise ValueError(f"unknown kernel {kernel!r}; choose one of {names}") from None


def evaluate(kernel: Kernel | str, t):
    """Kernel density at ``t``; zero outside [-1, 1]."""
    kernel = get_kernel(kernel)
    t = np.asarray(t, dtype=float)
    a = np.abs(t)
    inside = a <= 1.0
    if kernel is Kernel.EPANECHNIKOV:
        v = 0.75 * (1.0 - t * t)
    elif kernel is Kernel.BIWEIGHT:
        v = (15.0 / 16.0) * (1.0 - t * t) ** 2
    else:
        v = 1.0 - a
    out = np.where(inside, v, 0.0)
    return float(out) if out.ndim == 0 else out


def evaluate_scaled(kernel: Kernel | str, h: float, t):
    """Rescaled kernel ``K(t / h) / h``."""
    if not h > 0:
        raise BandwidthError(f"bandwidth must be positive, got {h}")
    return evaluate(kernel, np.asarray(t, dtype=float) / h) / h


@lru_cache(maxsize=None)
def _moment(kernel: Kernel, r: int, power: int) -> float:
    val, _ = integrate.quad(lambda t: t**r * evaluate(kernel, t) ** power, -1.0, 1.0,
                            epsabs=1e-14, epsrel=1e-13)
    return val


def moment_u(kernel: Kernel | str, r: int) -> float:
    """``int t^r K(t) dt``."""
    return _moment(get_kernel(kernel), int(r), 1)


def moment_v(kernel: Kernel | str, r: int) -> float:
    """``int t^r K(t)^2 dt``."""
    return _moment(get_kernel(kernel), int(r), 2)


@lru_cache(maxsize=4096)
def _convolution(kernel: Kernel, u: float) -> float:
    if abs(u) >= 2.0:
        return 0.0
    lo, hi = max(-1.0, -1.0 - u), min(1.0, 1.0 - u)
    # triangular kernel has a kink at 0 and at -u
    points = [p for p in (0.0, -u) if lo < p < hi] or None
    val, _ = integrate.quad(lambda t: evaluate(kernel, t) * evaluate(kernel, t + u), lo, hi,
                            points=points, epsabs=1e-14, epsrel=1e-13)
    return val


def self_convolution(kernel: Kernel | str, u):
    """``K*(u) = int K(t) K(t + u) dt``; vanishes for ``|u| >= 2``."""
    kernel = get_kernel(kernel)
    u = np.asarray(u, dtype=float)
    out = np.vectorize(lambda v: _convolution(kernel, float(v)), otypes=[float])(u)
    return float(out) if out.ndim == 0 else out
