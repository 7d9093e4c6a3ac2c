"""Covariance of the smoothed curves and its functional principal components."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .smoothing import IndividualCurves

logger = logging.getLogger(__name__)

ENERGY_THRESHOLD = 0.99
SIGN_TOL = 1e-6


class DegreesOfFreedomError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    """Blocks ``sigma_eta[j, k]`` holding the ``M x M`` matrices ``Sigma_jk(s_m, s_m')``."""

    sigma_eta: NDArray[np.float64]
    grid: NDArray[np.float64]
    n: int
    p: int

    @property
    def J(self) -> int:
        return self.sigma_eta.shape[0]

    def block(self, j: int, k: int | None = None) -> NDArray[np.float64]:
        return self.sigma_eta[j, j if k is None else k]

    def pointwise(self, points: ArrayLike | None = None) -> NDArray[np.float64]:
        """``Sigma_eta(s, s)`` as ``(E, J, J)``, linearly interpolated off the grid."""
        idx = np.arange(self.grid.size)
        diag = self.sigma_eta[:, :, idx, idx].transpose(2, 0, 1)      # (M, J, J)
        if points is None:
            return diag
        points = np.asarray(points, dtype=float)
        if points.shape == self.grid.shape and np.array_equal(points, self.grid):
            return diag
        flat = diag.reshape(self.grid.size, -1)
        out = np.stack([np.interp(points, self.grid, flat[:, c]) for c in range(flat.shape[1])], axis=1)
        return out.reshape(points.size, self.J, self.J)


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Full spectrum of one diagonal block; the first ``n_components`` are retained.

    ``eigenfunctions[l]`` is the l-th function on the grid, orthonormal with
    respect to ``weights``.
    """

    response: int
    eigenvalues: NDArray[np.float64]
    eigenfunctions: NDArray[np.float64]
    weights: NDArray[np.float64]
    n_components: int
    n_clipped: int = 0

    @property
    def energy(self) -> NDArray[np.float64]:
        total = self.eigenvalues.sum()
        if total <= 0:
            return np.zeros_like(self.eigenvalues)
        return np.cumsum(self.eigenvalues) / total

    @property
    def retained_values(self) -> NDArray[np.float64]:
        return self.eigenvalues[: self.n_components]

    @property
    def retained_functions(self) -> NDArray[np.float64]:
        return self.eigenfunctions[: self.n_components]


@dataclass(frozen=True, eq=False)
class FunctionalPCA:
    covariance: CovarianceEstimate
    systems: list
    scores: list = field(default_factory=list)   # per response, (n, L_j)


def quadrature_weights(grid: ArrayLike) -> NDArray[np.float64]:
    """Trapezoid weights on the grid, with the end cells stretched to reach 0 and 1."""
    s = np.asarray(grid, dtype=float)
    w = np.empty_like(s)
    gaps = np.diff(s)
    w[1:-1] = 0.5 * (gaps[:-1] + gaps[1:])
    w[0] = s[0] + 0.5 * gaps[0]
    w[-1] = (1.0 - s[-1]) + 0.5 * gaps[-1]
    return w


def riemann_weights(grid: ArrayLike) -> NDArray[np.float64]:
    """Left differences ``s_m - s_{m-1}`` with ``s_0 = 0``."""
    s = np.asarray(grid, dtype=float)
    return np.diff(s, prepend=0.0)


def empirical_covariance(curves: IndividualCurves | NDArray, p: int,
                         grid: ArrayLike | None = None) -> CovarianceEstimate:
    """``(n - p)^{-1} sum_i eta_i(s) eta_i(t)^T`` on the grid."""
    if isinstance(curves, IndividualCurves):
        eta, grid = curves.eta_hat, curves.grid
    else:
        eta = np.asarray(curves, dtype=float)
    n = eta.shape[0]
    if n <= p:
        raise DegreesOfFreedomError(f"need n > p, got n={n}, p={p}")
    blocks = np.einsum("ijm,ikt->jkmt", eta, eta) / (n - p)
    blocks = 0.5 * (blocks + blocks.transpose(1, 0, 3, 2))
    return CovarianceEstimate(blocks, np.asarray(grid, dtype=float), n, p)


def _orient(psi: NDArray, w: NDArray) -> NDArray:
    for row in psi:
        c = np.dot(w, row)
        if abs(c) > SIGN_TOL:
            flip = c < 0
        else:
            flip = row[np.argmax(np.abs(row))] < 0
        if flip:
            row *= -1.0
    return psi


def spectral_decompose(cov: CovarianceEstimate, j: int, n_components: int | None = None,
                       energy: float = ENERGY_THRESHOLD) -> EigenSystem:
    """Eigen-decompose ``Sigma_jj`` as an integral operator on [0, 1].

    Solves the symmetric problem for ``W^{1/2} Sigma W^{1/2}`` and maps back
    with ``W^{-1/2}``. Retains ``n_components`` if given, else the smallest
    number reaching the cumulative ``energy`` fraction.
    """
    w = quadrature_weights(cov.grid)
    root = np.sqrt(w)
    op = root[:, None] * cov.block(j) * root[None, :]
    vals, vecs = np.linalg.eigh(0.5 * (op + op.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    negative = vals < 0
    if negative.any():
        logger.debug("clipping %d negative eigenvalues (min %.3g)", negative.sum(), vals.min())
        vals = np.where(negative, 0.0, vals)
    psi = _orient((vecs / root[:, None]).T.copy(), w)

    if n_components is None:
        total = vals.sum()
        if total <= 0:
            L = 0
        else:
            cum = np.cumsum(vals) / total
            L = int(np.searchsorted(cum, energy - 1e-12) + 1)
    else:
        L = int(n_components)
    L = min(L, vals.size)
    return EigenSystem(j, vals, psi, w, L, int(negative.sum()))


def compute_scores(curves: IndividualCurves | NDArray, eig: EigenSystem, rule: str = "riemann",
                   grid: ArrayLike | None = None) -> NDArray[np.float64]:
    """Principal component scores ``(n, L)`` for response ``eig.response``.

    ``rule="riemann"`` uses left differences ``s_m - s_{m-1}`` (``s_0 = 0``);
    ``rule="trapezoid"`` uses the eigenproblem's own quadrature, which makes
    the full-spectrum reconstruction exact.
    """
    if isinstance(curves, IndividualCurves):
        eta, grid = curves.eta_hat[:, eig.response, :], curves.grid
    else:
        eta = np.asarray(curves, dtype=float)
    if rule == "riemann":
        w = riemann_weights(grid)
    elif rule == "trapezoid":
        w = eig.weights
    else:
        raise ValueError(f"unknown quadrature rule {rule!r}")
    return (eta * w) @ eig.retained_functions.T


def cross_covariance_from_scores(scores_j: NDArray, eig_j: EigenSystem, scores_k: NDArray,
                                 eig_k: EigenSystem, dof: int) -> NDArray[np.float64]:
    """Truncated ``Sigma_jk(s, t) = sum_{l,l'} E(xi_jl xi_kl') psi_jl(s) psi_kl'(t)``."""
    moments = scores_j.T @ scores_k / dof
    return eig_j.retained_functions.T @ moments @ eig_k.retained_functions


def run_fpca(curves: IndividualCurves, p: int, n_components: int | None = None,
             energy: float = ENERGY_THRESHOLD, rule: str = "riemann") -> FunctionalPCA:
    cov = empirical_covariance(curves, p)
    systems = [spectral_decompose(cov, j, n_components, energy) for j in range(cov.J)]
    scores = [compute_scores(curves, eig, rule) for eig in systems]
    return FunctionalPCA(cov, systems, scores)
