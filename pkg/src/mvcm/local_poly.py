"""Local polynomial weighted least squares on a fixed grid.

Every fit here is linear in the responses, so the work is done by the
equivalent-kernel weights: for each target location ``s`` the matrix
``L(s)`` with ``coef(s) = L(s) @ values``. The local basis is the scaled
``(1, (s_m - s)/h, ..., ((s_m - s)/h)^d)``; coefficient ``k`` therefore
estimates ``h^k f^(k)(s) / k!``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .kernels import BandwidthError, Kernel, evaluate, get_kernel

# Gram matrices with condition number above this get the ridge.
COND_LIMIT = 1e10
# Widened windows reach this multiple of the (degree+1)-th neighbour distance.
WIDEN_FACTOR = 1.1


class DegenerateWindowError(ValueError):
    """Too few grid points with positive kernel weight for the requested degree."""


class LocalFitError(ArithmeticError):
    """Local Gram matrix singular even after ridging."""


@dataclass(frozen=True)
class LocalFitConfig:
    degree: int = 1
    bandwidth: float = 0.1
    kernel: Kernel = Kernel.EPANECHNIKOV
    ridge: float = 1e-10
    widen: bool = True

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise BandwidthError(f"bandwidth must be positive, got {self.bandwidth}")
        if int(self.degree) < 0:
            raise ValueError("degree must be nonnegative")
        object.__setattr__(self, "kernel", get_kernel(self.kernel))


@dataclass(frozen=True)
class SmootherRow:
    weights: NDArray[np.float64]
    bandwidth: float


@dataclass(frozen=True)
class LocalFit:
    coef: NDArray[np.float64]
    derivatives: NDArray[np.float64]
    bandwidth: float


@dataclass(frozen=True)
class EquivalentKernel:
    """Weights ``weights[e, k, m]`` mapping grid values to coefficient ``k`` at ``points[e]``."""

    points: NDArray[np.float64]
    weights: NDArray[np.float64]
    bandwidths: NDArray[np.float64]
    widened: NDArray[np.bool_] = field(repr=False)
    ridged: NDArray[np.bool_] = field(repr=False)

    def derivative_weights(self, order: int) -> NDArray[np.float64]:
        """Rows mapping values to the ``order``-th derivative estimate."""
        scale = math.factorial(order) / self.bandwidths**order
        return self.weights[:, order, :] * scale[:, None]

    @property
    def value_weights(self) -> NDArray[np.float64]:
        return self.weights[:, 0, :]


def effective_bandwidths(grid: NDArray, points: NDArray, h: float, degree: int,
                         widen: bool = True) -> tuple[NDArray, NDArray]:
    """Bandwidth per point, widened where fewer than ``degree + 1`` points fall inside."""
    dist = np.abs(grid[None, :] - points[:, None])
    if grid.size < degree + 1:
        raise DegenerateWindowError(f"grid has {grid.size} points, degree {degree} needs {degree + 1}")
    kth = np.partition(dist, degree, axis=1)[:, degree]
    short = kth >= h
    if short.any() and not widen:
        s = points[np.argmax(short)]
        raise DegenerateWindowError(
            f"fewer than {degree + 1} grid points within bandwidth {h:g} of s={s:g}")
    return np.where(short, kth * WIDEN_FACTOR, h), short


def equivalent_kernel(config: LocalFitConfig, grid: ArrayLike, points: ArrayLike) -> EquivalentKernel:
    """Equivalent-kernel weights of the local polynomial fit at each of ``points``."""
    grid = np.asarray(grid, dtype=float)
    points = np.atleast_1d(np.asarray(points, dtype=float))
    d = int(config.degree)
    h, widened = effective_bandwidths(grid, points, config.bandwidth, d, config.widen)

    u = (grid[None, :] - points[:, None]) / h[:, None]
    k = evaluate(config.kernel, u) / h[:, None]
    z = u[:, :, None] ** np.arange(d + 1)                      # (E, M, d+1)
    kz = z * k[:, :, None]
    gram = np.einsum("emk,eml->ekl", kz, z)                     # (E, d+1, d+1)

    cond = np.linalg.cond(gram)
    ridged = ~(cond < COND_LIMIT)
    if ridged.any():
        scale = np.trace(gram[ridged], axis1=1, axis2=2) / (d + 1)
        gram = gram.copy()
        gram[ridged] += config.ridge * scale[:, None, None] * np.eye(d + 1)
    try:
        weights = np.linalg.solve(gram, kz.transpose(0, 2, 1))  # (E, d+1, M)
    except np.linalg.LinAlgError as exc:
        raise LocalFitError("local Gram matrix is singular after ridging") from exc
    if not np.all(np.isfinite(weights)):
        raise LocalFitError("local Gram matrix is singular after ridging")
    return EquivalentKernel(points, weights, h, widened, ridged)


def smoother_matrix(config: LocalFitConfig, grid: ArrayLike, points: ArrayLike | None = None,
                    order: int = 0) -> NDArray[np.float64]:
    """Rows of weights for the ``order``-th derivative; the fitted-value matrix when ``order=0``."""
    grid = np.asarray(grid, dtype=float)
    points = grid if points is None else points
    return equivalent_kernel(config, grid, points).derivative_weights(order)


def smoother_row(config: LocalFitConfig, grid: ArrayLike, s: float) -> SmootherRow:
    ek = equivalent_kernel(config, grid, [s])
    return SmootherRow(ek.value_weights[0], float(ek.bandwidths[0]))


def local_fit(config: LocalFitConfig, grid: ArrayLike, values: ArrayLike, s: float) -> LocalFit:
    """Fit a degree-``config.degree`` polynomial around ``s``.

    Returns the scaled coefficients and the derivative estimates
    ``k! coef_k / h^k`` for ``k = 0..degree``.
    """
    ek = equivalent_kernel(config, grid, [s])
    coef = ek.weights[0] @ np.asarray(values, dtype=float)
    h = float(ek.bandwidths[0])
    ks = np.arange(config.degree + 1)
    fact = np.array([math.factorial(i) for i in ks], dtype=float)
    return LocalFit(coef, coef * fact / h**ks, h)
