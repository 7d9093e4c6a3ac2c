"""Pooled local linear estimation of the coefficient functions.

The covariates do not depend on location, so the pooled normal equations
factor as ``Sigma(s, h) = Omega_X kron sum_m K_h(s_m - s) z z^T`` and
``B_j(s)`` is the univariate local linear smoother applied to the
pointwise least-squares coefficients ``Omega_X^{-1} X^T y_j(s_m)``. This is
algebraically identical to solving the full ``2p x 2p`` system at every
``s``, and is what makes leave-one-curve-out CV a rank-one downdate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from .data import FunctionalDataset, check_points
from .kernels import BandwidthError, Kernel, get_kernel
from .local_poly import (DegenerateWindowError, LocalFitConfig, LocalFitError,
                         equivalent_kernel)

logger = logging.getLogger(__name__)

PILOT_FACTOR = 2.0
N_CV_CANDIDATES = 20


class EstimationError(ArithmeticError):
    pass


class BandwidthSelectionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SelectionTable:
    """Criterion values over a bandwidth grid; ``nan`` marks skipped candidates."""

    candidates: NDArray[np.float64]
    scores: NDArray[np.float64]

    def as_dict(self) -> dict:
        return {"candidates": self.candidates.tolist(),
                "scores": [None if not np.isfinite(v) else float(v) for v in self.scores]}


@dataclass(frozen=True, eq=False)
class DerivativePilot:
    d2: NDArray[np.float64]            # (J, p, E)
    d3: NDArray[np.float64]            # (J, p, E)
    bandwidths: NDArray[np.float64]    # (J,)


@dataclass(frozen=True, eq=False)
class CoefficientFit:
    """Estimated coefficient functions and their by-products.

    Arrays are indexed ``b_hat[j, l, e]`` (response, covariate, evaluation
    point). ``a_hat[j, e]`` is the row-major vec of the local linear solution
    ``[B_j(s), h B_j'(s)]``, i.e. ``(b_j1, h b_j1', b_j2, h b_j2', ...)``.
    """

    eval_points: NDArray[np.float64]
    b_hat: NDArray[np.float64]
    a_hat: NDArray[np.float64]
    bias_hat: NDArray[np.float64]
    bandwidths: NDArray[np.float64]
    residuals: NDArray[np.float64]
    b_hat_grid: NDArray[np.float64]
    kernel: Kernel = Kernel.EPANECHNIKOV
    pilot_factor: float = PILOT_FACTOR
    cv_tables: dict = field(default_factory=dict)
    pilot: DerivativePilot | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def corrected(self) -> NDArray[np.float64]:
        """Bias-corrected estimate ``b_hat - bias_hat``."""
        return self.b_hat - self.bias_hat


def pointwise_ols(data: FunctionalDataset) -> NDArray[np.float64]:
    """Least-squares coefficients at every grid point, shape (J, p, M)."""
    omega = data.x.T @ data.x
    xty = np.einsum("ip,ijm->jpm", data.x, data.y)
    cho = linalg.cho_factor(omega)
    J, p, M = xty.shape
    sol = linalg.cho_solve(cho, xty.transpose(1, 0, 2).reshape(p, J * M))
    return sol.reshape(p, J, M).transpose(1, 0, 2)


def _per_response(h, J: int) -> NDArray[np.float64]:
    h = np.broadcast_to(np.asarray(h, dtype=float), (J,)).copy()
    if not np.all(h > 0):
        raise BandwidthError(f"bandwidths must be positive, got {h}")
    return h


def _linear_kernel(grid, points, h, kernel):
    try:
        return equivalent_kernel(LocalFitConfig(1, h, kernel), grid, points)
    except LocalFitError as exc:
        raise EstimationError(str(exc)) from exc


def estimate_coefficients(data: FunctionalDataset, h, eval_points: ArrayLike | None = None,
                          kernel: Kernel | str = Kernel.EPANECHNIKOV, with_bias: bool = True,
                          pilot_factor: float = PILOT_FACTOR) -> CoefficientFit:
    """Local linear estimates of every ``B_j`` at ``eval_points`` (default: the data grid).

    Parameters
    ----------
    h : float or sequence of float
        Bandwidth per response.
    with_bias : bool
        Also compute the plug-in bias from local cubic pilots.
    """
    kernel = get_kernel(kernel)
    grid = data.grid
    pts = grid if eval_points is None else check_points(eval_points)
    h = _per_response(h, data.J)
    beta = pointwise_ols(data)
    J, p, M = beta.shape

    b_hat = np.empty((J, p, pts.size))
    a_hat = np.empty((J, pts.size, 2 * p))
    b_grid = np.empty((J, p, M))
    widened = {}
    for j in range(J):
        ek = _linear_kernel(grid, pts, h[j], kernel)
        b_hat[j] = beta[j] @ ek.weights[:, 0, :].T
        a_hat[j, :, 0::2] = b_hat[j].T
        a_hat[j, :, 1::2] = (beta[j] @ ek.weights[:, 1, :].T).T
        if eval_points is None:
            b_grid[j] = b_hat[j]
        else:
            b_grid[j] = beta[j] @ _linear_kernel(grid, grid, h[j], kernel).value_weights.T
        if ek.widened.any():
            widened[j] = int(ek.widened.sum())

    residuals = data.y - np.einsum("il,jlm->ijm", data.x, b_grid)
    fit = CoefficientFit(pts, b_hat, a_hat, np.zeros_like(b_hat), h, residuals, b_grid,
                         kernel, pilot_factor, diagnostics={"widened_windows": widened})
    if with_bias:
        bias, pilot = estimate_bias(data, fit, pilot_factor=pilot_factor, beta=beta)
        fit = replace(fit, bias_hat=bias, pilot=pilot)
    return fit


def estimate_bias(data: FunctionalDataset, fit: CoefficientFit, eval_points: ArrayLike | None = None,
                  pilot_factor: float = PILOT_FACTOR, beta: NDArray | None = None):
    """Plug-in bias of the local linear estimate.

    The remainder ``B_j(s_m) - A_j(s) z(s_m - s)`` is replaced by
    ``B''(s) (s_m - s)^2 / 2 + B'''(s) (s_m - s)^3 / 6`` with derivatives from
    a local cubic pilot at ``pilot_factor`` times the fit bandwidth. Because
    the covariate factor cancels, the bias reduces to the local linear
    weights' second and third moments about ``s``.

    Returns
    -------
    bias : ndarray (J, p, E)
    pilot : DerivativePilot
    """
    grid = data.grid
    pts = fit.eval_points if eval_points is None else check_points(eval_points)
    beta = pointwise_ols(data) if beta is None else beta
    J, p, _ = beta.shape
    bias = np.zeros((J, p, pts.size))
    d2 = np.zeros_like(bias)
    d3 = np.zeros_like(bias)
    hp = np.asarray(fit.bandwidths, dtype=float) * pilot_factor
    fallback = []
    for j in range(J):
        try:
            ops = bias_operators(grid, pts, fit.bandwidths[j], fit.kernel, pilot_factor)
        except (DegenerateWindowError, LocalFitError) as exc:
            logger.warning("local cubic pilot failed for response %d (%s); bias set to zero", j, exc)
            fallback.append(j)
            continue
        d2[j] = beta[j] @ ops.second.T
        d3[j] = beta[j] @ ops.third.T
        bias[j] = beta[j] @ ops.bias.T
    if fallback:
        fit.diagnostics["bias_fallback"] = fallback
    return bias, DerivativePilot(d2, d3, hp)


@dataclass(frozen=True, eq=False)
class BiasOperators:
    """Linear maps from grid values to the pilot derivatives and the plug-in bias at each point."""

    second: NDArray[np.float64]
    third: NDArray[np.float64]
    bias: NDArray[np.float64]


def bias_operators(grid: NDArray, points: NDArray, h: float, kernel: Kernel | str,
                   pilot_factor: float = PILOT_FACTOR) -> BiasOperators:
    cubic = equivalent_kernel(LocalFitConfig(3, h * pilot_factor, kernel), grid, points)
    w = _linear_kernel(grid, points, h, kernel).value_weights
    diff = grid[None, :] - points[:, None]
    m2 = np.sum(w * diff**2, axis=1)
    m3 = np.sum(w * diff**3, axis=1)
    second = cubic.derivative_weights(2)
    third = cubic.derivative_weights(3)
    return BiasOperators(second, third, 0.5 * m2[:, None] * second + m3[:, None] * third / 6.0)


def corrected_smoother(grid: NDArray, points: NDArray, h: float, kernel: Kernel | str,
                       pilot_factor: float = PILOT_FACTOR) -> NDArray[np.float64]:
    """Rows mapping grid values to the bias-corrected local linear estimate."""
    w = _linear_kernel(grid, points, h, kernel).value_weights
    return w - bias_operators(grid, points, h, kernel, pilot_factor).bias


def default_cv_candidates(grid: ArrayLike, num: int = N_CV_CANDIDATES) -> NDArray[np.float64]:
    """Log-spaced grid from twice the largest grid gap to half the grid range."""
    grid = np.asarray(grid, dtype=float)
    lo = 2.0 * np.max(np.diff(grid))
    hi = max(0.5 * (grid[-1] - grid[0]), 2.0 * lo)
    return np.geomspace(lo, hi, num)


def pick_minimum(candidates: NDArray, scores: NDArray, scale: float) -> float:
    """Argmin of ``scores``; near-ties go to the largest candidate."""
    ok = np.isfinite(scores)
    best = np.min(scores[ok])
    tied = ok & np.isclose(scores, best, rtol=1e-8, atol=1e-12 * scale)
    return float(np.max(candidates[tied]))


def leave_one_curve_out_predictions(data: FunctionalDataset, j: int, h: float,
                                    kernel: Kernel | str = Kernel.EPANECHNIKOV) -> NDArray[np.float64]:
    """``x_i^T B_j(s_m)^(-i)`` for all subjects, shape (n, M)."""
    q = _loo_projections(data, j)
    w = equivalent_kernel(LocalFitConfig(1, h, kernel), data.grid, data.grid).value_weights
    return q @ w.T


def _loo_projections(data: FunctionalDataset, j: int) -> NDArray[np.float64]:
    # q[i, m] = x_i^T (Omega - x_i x_i^T)^{-1} (X^T y_j(s_m) - x_i y_ij(s_m))
    x, y = data.x, data.y[:, j, :]
    if data.n - 1 < data.p:
        raise BandwidthSelectionError("leave-one-curve-out needs n - 1 >= p")
    omega = x.T @ x
    u = x.T @ y
    omega_minus = omega[None] - x[:, :, None] * x[:, None, :]
    rhs = u[None] - x[:, :, None] * y[:, None, :]
    try:
        beta_minus = np.linalg.solve(omega_minus, rhs)
    except np.linalg.LinAlgError as exc:
        raise BandwidthSelectionError("covariates singular after dropping one subject") from exc
    return np.einsum("ip,ipm->im", x, beta_minus)


def cross_validate_bandwidth(data: FunctionalDataset, j: int, candidates: ArrayLike | None = None,
                             kernel: Kernel | str = Kernel.EPANECHNIKOV):
    """Leave-one-curve-out CV bandwidth for response ``j``.

    Returns ``(h, table)``. Candidates whose windows are degenerate are
    skipped; windows too narrow for a local line are not widened here.
    """
    kernel = get_kernel(kernel)
    cands = default_cv_candidates(data.grid) if candidates is None else np.asarray(candidates, float)
    if cands.size == 0 or np.any(cands <= 0):
        raise BandwidthSelectionError("candidate bandwidths must be nonempty and positive")
    q = _loo_projections(data, j)
    y = data.y[:, j, :]
    scores = np.full(cands.size, np.nan)
    for k, h in enumerate(cands):
        try:
            w = equivalent_kernel(LocalFitConfig(1, h, kernel, widen=False),
                                  data.grid, data.grid).value_weights
        except (DegenerateWindowError, LocalFitError):
            continue
        scores[k] = np.mean((y - q @ w.T) ** 2)
    if not np.any(np.isfinite(scores)):
        raise BandwidthSelectionError(f"every candidate bandwidth is degenerate for response {j}")
    h = pick_minimum(cands, scores, float(np.mean(y**2)))
    return h, SelectionTable(cands, scores)


def select_bandwidths(data: FunctionalDataset, candidates=None,
                      kernel: Kernel | str = Kernel.EPANECHNIKOV):
    """CV bandwidth for every response; returns ``(h, {j: table})``."""
    out = [cross_validate_bandwidth(data, j, candidates, kernel) for j in range(data.J)]
    return np.array([h for h, _ in out]), {j: t for j, (_, t) in enumerate(out)}


def fit_auto(data: FunctionalDataset, eval_points=None, kernel: Kernel | str = Kernel.EPANECHNIKOV,
             candidates=None) -> CoefficientFit:
    """CV-selected bandwidths followed by :func:`estimate_coefficients`."""
    h, tables = select_bandwidths(data, candidates, kernel)
    fit = estimate_coefficients(data, h, eval_points, kernel)
    return replace(fit, cv_tables=tables)
