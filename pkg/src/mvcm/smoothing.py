"""Local linear reconstruction of the individual deviation curves."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .coefficients import BandwidthSelectionError, CoefficientFit, SelectionTable, pick_minimum
from .data import FunctionalDataset
from .kernels import BandwidthError, Kernel
from .local_poly import LocalFitConfig, smoother_matrix

logger = logging.getLogger(__name__)

N_GCV_CANDIDATES = 15
GCV_SPAN = 8.0
# Smoothers this close to interpolation leave a 0/0 GCV ratio and are skipped.
TRACE_LIMIT = 1.0 - 1e-8


@dataclass(frozen=True, eq=False)
class IndividualCurves:
    """Smoothed curves ``eta_hat[i, j, m]`` and the leftover noise ``eps_hat = R - eta_hat``."""

    eta_hat: NDArray[np.float64]
    eps_hat: NDArray[np.float64]
    bandwidths: NDArray[np.float64]
    trace_s: NDArray[np.float64]          # M^{-1} tr(S_j), one per response
    grid: NDArray[np.float64]
    gcv_tables: dict = field(default_factory=dict)

    @property
    def residuals(self) -> NDArray[np.float64]:
        return self.eta_hat + self.eps_hat


def default_bandwidth(M: int, scale: float = 1.0) -> float:
    """Rate-optimal order ``scale * M**(-1/5)`` for reconstructing individual curves."""
    if M < 3:
        raise ValueError("M must be at least 3")
    return scale * float(M) ** -0.2


def default_gcv_candidates(M: int, num: int = N_GCV_CANDIDATES, span: float = GCV_SPAN) -> NDArray:
    c = default_bandwidth(M)
    return np.geomspace(c / span, c * span, num)


def curve_smoother(grid: ArrayLike, h: float, kernel: Kernel | str = Kernel.EPANECHNIKOV) -> NDArray:
    """The ``M x M`` smoother matrix shared by all subjects for one response."""
    return smoother_matrix(LocalFitConfig(1, h, kernel), grid)


def smooth_residuals(residuals: NDArray, grid: ArrayLike, h, kernel=Kernel.EPANECHNIKOV):
    """Apply per-response smoothers to residual curves ``(n, J, M)``; returns ``(eta, trace)``."""
    J = residuals.shape[1]
    h = np.broadcast_to(np.asarray(h, dtype=float), (J,))
    if not np.all(h > 0):
        raise BandwidthError(f"bandwidths must be positive, got {h}")
    eta = np.empty_like(residuals)
    trace = np.empty(J)
    for j in range(J):
        s = curve_smoother(grid, h[j], kernel)
        eta[:, j, :] = residuals[:, j, :] @ s.T
        trace[j] = np.trace(s) / s.shape[0]
    return eta, trace


def smooth_individuals(data: FunctionalDataset, fit: CoefficientFit, h2,
                       kernel: Kernel | str | None = None) -> IndividualCurves:
    kernel = fit.kernel if kernel is None else kernel
    r = fit.residuals
    eta, trace = smooth_residuals(r, data.grid, h2, kernel)
    h2 = np.broadcast_to(np.asarray(h2, dtype=float), (data.J,)).copy()
    return IndividualCurves(eta, r - eta, h2, trace, data.grid)


def gcv_score(residuals: NDArray, s: NDArray) -> float:
    """Pooled GCV criterion for residual curves ``(n, M)`` under smoother ``s``."""
    M = s.shape[0]
    denom = (1.0 - np.trace(s) / M) ** 2
    resid = residuals - residuals @ s.T
    return float(np.sum(resid**2) / denom)


def gcv_bandwidth(data: FunctionalDataset, fit: CoefficientFit, j: int,
                  candidates: ArrayLike | None = None, kernel: Kernel | str | None = None):
    """GCV bandwidth for smoothing the residual curves of response ``j``.

    Returns ``(h, table)``. Candidates whose smoother has ``tr(S)/M`` at or
    numerically indistinguishable from 1 are skipped.
    """
    kernel = fit.kernel if kernel is None else kernel
    cands = default_gcv_candidates(data.M) if candidates is None else np.asarray(candidates, float)
    if cands.size == 0 or np.any(cands <= 0):
        raise BandwidthSelectionError("candidate bandwidths must be nonempty and positive")
    r = fit.residuals[:, j, :]
    scores = np.full(cands.size, np.nan)
    for k, h in enumerate(cands):
        s = curve_smoother(data.grid, h, kernel)
        if np.trace(s) / data.M >= TRACE_LIMIT:
            logger.debug("skipping h=%g for response %d: tr(S)/M >= 1", h, j)
            continue
        scores[k] = gcv_score(r, s)
    if not np.any(np.isfinite(scores)):
        raise BandwidthSelectionError(f"every GCV candidate was skipped for response {j}")
    return pick_minimum(cands, scores, float(np.sum(r**2))), SelectionTable(cands, scores)


def smooth_auto(data: FunctionalDataset, fit: CoefficientFit, candidates=None) -> IndividualCurves:
    """GCV bandwidth per response, then :func:`smooth_individuals`."""
    picks = [gcv_bandwidth(data, fit, j, candidates) for j in range(data.J)]
    curves = smooth_individuals(data, fit, [h for h, _ in picks])
    curves.gcv_tables.update({j: t for j, (_, t) in enumerate(picks)})
    return curves
