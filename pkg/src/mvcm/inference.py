"""Global test of linear hypotheses and simultaneous confidence bands.

Coefficients are stacked response-major: ``vec(B(s))[j * p + l] = b_jl(s)``,
the ordering under which ``Cov(vec B_hat(s)) = Sigma_eta(s, s) kron Omega_X^{-1}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .coefficients import CoefficientFit, corrected_smoother
from .data import FunctionalDataset
from .fpca import CovarianceEstimate
from .local_poly import LocalFitConfig, equivalent_kernel
from .smoothing import IndividualCurves, smooth_residuals

COND_LIMIT = 1e12
PINV_CUTOFF = 1e-10
MAX_ABORT_FRACTION = 0.01
CHUNK = 50

# stream tags keep bootstrap-test and band draws independent for the same seed
STREAM_TEST = 0
STREAM_BAND = 1

MULTIPLIERS = ("split", "curve")


class HypothesisError(ValueError):
    pass


class BootstrapError(RuntimeError):
    pass


def replicate_rng(seed: int, stream: int, g: int) -> np.random.Generator:
    """Generator for replicate ``g``; independent of how replicates are scheduled."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream, int(g))))


@dataclass(frozen=True, eq=False)
class LinearHypothesis:
    """``C vec(B(s)) = b0(s)`` for all ``s``.

    ``b0`` is ``None`` for the zero function, or an ``(r, K)`` table on
    ``b0_points`` (linearly interpolated elsewhere).
    """

    C: NDArray[np.float64]
    b0: NDArray[np.float64] | None = None
    b0_points: NDArray[np.float64] | None = None

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        object.__setattr__(self, "C", C)
        if not np.all(np.isfinite(C)):
            raise HypothesisError("C contains non-finite entries")
        if np.linalg.matrix_rank(C) < C.shape[0]:
            raise HypothesisError(f"C must have full row rank {C.shape[0]}")
        if self.b0 is not None:
            b0 = np.atleast_2d(np.asarray(self.b0, dtype=float))
            if b0.shape[0] != C.shape[0]:
                raise HypothesisError(f"b0 has {b0.shape[0]} rows, C has {C.shape[0]}")
            if not np.all(np.isfinite(b0)):
                raise HypothesisError("b0 contains non-finite entries")
            if self.b0_points is None or np.size(self.b0_points) != b0.shape[1]:
                raise HypothesisError("b0 must be tabulated on b0_points")
            object.__setattr__(self, "b0", b0)
            object.__setattr__(self, "b0_points", np.asarray(self.b0_points, dtype=float))

    @property
    def r(self) -> int:
        return self.C.shape[0]

    def b0_at(self, points: ArrayLike) -> NDArray[np.float64]:
        points = np.asarray(points, dtype=float)
        if self.b0 is None:
            return np.zeros((self.r, points.size))
        if np.array_equal(points, self.b0_points):
            return self.b0
        return np.stack([np.interp(points, self.b0_points, row) for row in self.b0])

    def transformed(self, T: ArrayLike) -> "LinearHypothesis":
        T = np.asarray(T, dtype=float)
        b0 = None if self.b0 is None else T @ self.b0
        return LinearHypothesis(T @ self.C, b0, self.b0_points)


def zero_effect_hypothesis(J: int, p: int, coefficients) -> LinearHypothesis:
    """``b_jl = 0`` for every ``(j, l)`` in ``coefficients`` (zero-based)."""
    C = np.zeros((len(coefficients), J * p))
    for row, (j, l) in enumerate(coefficients):
        C[row, j * p + l] = 1.0
    return LinearHypothesis(C)


@dataclass(frozen=True, eq=False)
class GlobalTestResult:
    statistic: float
    p_value: float
    G: int
    seed: int
    draws: NDArray[np.float64]
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, include_draws: bool = True) -> dict:
        out = {"statistic": self.statistic, "p_value": self.p_value, "G": self.G, "seed": self.seed,
               "diagnostics": self.diagnostics}
        if include_draws:
            out["draws"] = self.draws.tolist()
        return out


@dataclass(frozen=True, eq=False)
class BandResult:
    j: int
    l: int
    alpha: float
    critical_value: float
    points: NDArray[np.float64]
    estimate: NDArray[np.float64]
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]
    G: int | None = None
    seed: int | None = None

    def covers(self, truth: ArrayLike, atol: float = 1e-12) -> bool:
        truth = np.asarray(truth, dtype=float)
        return bool(np.all((self.lower - atol <= truth) & (truth <= self.upper + atol)))


def stack_coefficients(b: NDArray) -> NDArray[np.float64]:
    """``(J, p, E)`` coefficients to ``(E, J*p)`` response-major vecs."""
    J, p, E = b.shape
    return b.transpose(2, 0, 1).reshape(E, J * p)


def unstack_coefficients(v: NDArray, J: int, p: int) -> NDArray[np.float64]:
    return v.reshape(-1, J, p).transpose(1, 2, 0)


def _metric(sigma_pts: NDArray, omega_inv: NDArray) -> NDArray:
    # (E, J, J) x (p, p) -> (E, Jp, Jp), Sigma(s, s) kron Omega^{-1}
    E, J, _ = sigma_pts.shape
    p = omega_inv.shape[0]
    return np.einsum("ejk,lm->ejlkm", sigma_pts, omega_inv).reshape(E, J * p, J * p)


def _robust_inverse(mats: NDArray) -> tuple[NDArray, int]:
    """Batched symmetric inverse; spectral pseudo-inverse where conditioning fails."""
    vals, vecs = np.linalg.eigh(0.5 * (mats + mats.transpose(0, 2, 1)))
    top = np.max(np.abs(vals), axis=1, keepdims=True)
    bad = (vals[:, :1] <= 0) | (vals[:, :1] * COND_LIMIT < top)
    keep = np.where(bad, vals > PINV_CUTOFF * top, True)
    inv_vals = np.where(keep, 1.0 / np.where(keep, vals, 1.0), 0.0)
    inv = np.einsum("eik,ek,ejk->eij", vecs, inv_vals, vecs)
    return inv, int(np.any(bad, axis=1).sum())


def middle_inverse(C: NDArray, sigma_pts: NDArray, omega_inv: NDArray) -> tuple[NDArray, int]:
    """``[C (Sigma(s, s) kron Omega^{-1}) C^T]^{-1}`` at each point; second value counts pinv fallbacks."""
    mid = np.einsum("ra,eab,qb->erq", C, _metric(sigma_pts, omega_inv), C)
    return _robust_inverse(mid)


def integrate(values: NDArray, points: NDArray) -> NDArray:
    """Trapezoid rule along the last axis."""
    if points.size < 2:
        return np.zeros(values.shape[:-1])
    return np.trapezoid(values, points, axis=-1) if hasattr(np, "trapezoid") else np.trapz(values, points, axis=-1)


def _quadratic_integral(d: NDArray, minv: NDArray, points: NDArray, n: int) -> NDArray:
    # d: (..., r, E); minv: (E, r, r)
    q = np.einsum("...re,erq,...qe->...e", d, minv, d)
    return n * integrate(q, points)


def global_statistic(data: FunctionalDataset, fit: CoefficientFit, cov: CovarianceEstimate,
                     hyp: LinearHypothesis, with_bias: bool = True, diagnostics: dict | None = None) -> float:
    """``S_n = n int d(s)^T [C (Sigma(s,s) kron Omega_X^{-1}) C^T]^{-1} d(s) ds``.

    ``d(s) = C vec(B_hat(s) - bias(s)) - b0(s)``, integrated by the trapezoid
    rule over the fit's evaluation points.
    """
    if hyp.C.shape[1] != data.J * data.p:
        raise HypothesisError(f"C has {hyp.C.shape[1]} columns, expected J*p = {data.J * data.p}")
    pts = fit.eval_points
    b = fit.corrected if with_bias else fit.b_hat
    d = hyp.C @ stack_coefficients(b).T - hyp.b0_at(pts)
    omega_inv = np.linalg.inv(data.x.T @ data.x)
    minv, fallbacks = middle_inverse(hyp.C, cov.pointwise(pts), omega_inv)
    if diagnostics is not None:
        diagnostics["pinv_fallbacks"] = fallbacks
        diagnostics["max_abs_bias"] = float(np.max(np.abs(fit.bias_hat))) if fit.bias_hat.size else 0.0
    return float(max(_quadratic_integral(d, minv, pts, data.n), 0.0))


def null_fit(data: FunctionalDataset, fit: CoefficientFit, curves: IndividualCurves,
             cov: CovarianceEstimate, hyp: LinearHypothesis):
    """Project ``B_hat(s_m)`` onto the null set and re-split the residuals.

    Returns ``(B_star, eta_star, eps_star)`` on the data grid. The projection
    uses the metric ``Sigma_eta(s, s) kron Omega_X^{-1}``.
    """
    grid = data.grid
    omega_inv = np.linalg.inv(data.x.T @ data.x)
    metric = _metric(cov.pointwise(grid), omega_inv)                        # (M, Jp, Jp)
    C = hyp.C
    vec = stack_coefficients(fit.b_hat_grid)                                 # (M, Jp)
    gap = vec @ C.T - hyp.b0_at(grid).T                                      # (M, r)
    mid_inv, _ = _robust_inverse(np.einsum("ra,mab,qb->mrq", C, metric, C))
    step = np.einsum("mab,qb,mqr,mr->ma", metric, C, mid_inv, gap)
    b_star = unstack_coefficients(vec - step, data.J, data.p)
    r_star = data.y - np.einsum("il,jlm->ijm", data.x, b_star)
    eta, _ = smooth_residuals(r_star, grid, curves.bandwidths, fit.kernel)
    return b_star, eta, r_star - eta


def _eval_smoothers(data: FunctionalDataset, fit: CoefficientFit, corrected: bool = False) -> list:
    if corrected:
        return [corrected_smoother(data.grid, fit.eval_points, h, fit.kernel, fit.pilot_factor)
                for h in fit.bandwidths]
    return [equivalent_kernel(LocalFitConfig(1, h, fit.kernel), data.grid, fit.eval_points).value_weights
            for h in fit.bandwidths]


def wild_bootstrap_test(data: FunctionalDataset, fit: CoefficientFit, curves: IndividualCurves,
                        cov: CovarianceEstimate, hyp: LinearHypothesis, G: int = 500,
                        seed: int = 0, replicate_bias: bool = True,
                        multipliers: str = "curve") -> GlobalTestResult:
    """Wild bootstrap p-value for ``S_n``.

    Replicate ``g`` rebuilds responses from the null fit and recomputes
    ``S_n``. With the default ``multipliers="curve"`` the responses are
    ``x_i^T B*(s_m) + tau_i (eta*_i(s_m) + eps*_i(s_m))``. With
    ``multipliers="split"`` they are
    ``x_i^T B*(s_m) + tau_i eta*_i(s_m) + tau_im eps*_i(s_m)``. All
    multipliers are standard normal. The split form loses the part of
    ``eta`` that the curve smoother shrinks away and so runs anti-conservative.

    The bias-corrected estimate is linear in the responses, so by default
    each replicate is bias-corrected exactly like the observed statistic;
    with ``replicate_bias=False`` the replicates use the uncorrected estimate.
    """
    if G < 1:
        raise ValueError("G must be positive")
    if multipliers not in MULTIPLIERS:
        raise ValueError(f"multipliers must be one of {MULTIPLIERS}, got {multipliers!r}")
    diagnostics: dict = {}
    s_n = global_statistic(data, fit, cov, hyp, diagnostics=diagnostics)

    b_star, eta_star, eps_star = null_fit(data, fit, curves, cov, hyp)
    pts = fit.eval_points
    omega_inv = np.linalg.inv(data.x.T @ data.x)
    a = omega_inv @ data.x.T                                                 # (p, n)
    smoothers = _eval_smoothers(data, fit, corrected=replicate_bias)
    base = np.stack([b_star[j] @ smoothers[j].T for j in range(data.J)])     # (J, p, E)
    b0 = hyp.b0_at(pts)
    minv, _ = middle_inverse(hyp.C, cov.pointwise(pts), omega_inv)

    draws = np.empty(G)
    n, M = data.n, data.M
    split = multipliers == "split"
    for start in range(0, G, CHUNK):
        gs = range(start, min(start + CHUNK, G))
        tau = np.empty((len(gs), n))
        tau_m = np.empty((len(gs), n, M)) if split else None
        for k, g in enumerate(gs):
            rng = replicate_rng(seed, STREAM_TEST, g)
            tau[k] = rng.standard_normal(n)
            if split:
                tau_m[k] = rng.standard_normal((n, M))
        b_g = np.empty((len(gs), data.J, data.p, pts.size))
        for j in range(data.J):
            if split:
                noise = tau[:, :, None] * eta_star[None, :, j, :] + tau_m * eps_star[None, :, j, :]
            else:
                noise = tau[:, :, None] * (eta_star + eps_star)[None, :, j, :]
            beta = np.einsum("pn,cnm->cpm", a, noise)
            b_g[:, j] = base[j][None] + beta @ smoothers[j].T
        vec = b_g.transpose(0, 3, 1, 2).reshape(len(gs), pts.size, -1)      # (c, E, Jp)
        d = np.einsum("ra,cea->cre", hyp.C, vec) - b0[None]
        draws[start:start + len(gs)] = _quadratic_integral(d, minv, pts, n)

    bad = ~np.isfinite(draws)
    if bad.sum() > MAX_ABORT_FRACTION * G:
        raise BootstrapError(f"{bad.sum()} of {G} bootstrap replicates failed")
    diagnostics["aborted"] = int(bad.sum())
    diagnostics["replicate_bias"] = bool(replicate_bias)
    diagnostics["multipliers"] = multipliers
    valid = draws[~bad]
    p_value = float(np.count_nonzero(valid >= s_n)) / G
    return GlobalTestResult(s_n, p_value, G, int(seed), draws, diagnostics)


def order_statistic_quantile(values: NDArray, alpha) -> NDArray | float:
    """The ``ceil((1 - alpha) G)``-th smallest value."""
    srt = np.sort(np.asarray(values, dtype=float))
    G = srt.size
    alphas = np.atleast_1d(np.asarray(alpha, dtype=float))
    k = np.array([max(1, math.ceil((1.0 - a) * G - 1e-9)) for a in alphas])
    out = srt[np.minimum(k, G) - 1]
    return float(out[0]) if np.ndim(alpha) == 0 else out


def scb_suprema(data: FunctionalDataset, fit: CoefficientFit, G: int = 1000, seed: int = 0,
                residuals: NDArray | None = None, corrected: bool = True) -> NDArray[np.float64]:
    """``sup_s |e_l^T G_j(s)^(g)|`` for every replicate, shape ``(G, J, p)``.

    The multiplier process is ``sqrt(n)`` times the estimator applied to
    ``tau_i^(g) r_ij(s_m)``; the same draws serve every ``(j, l)``. With
    ``corrected=True`` the estimator is the bias-corrected one the band is
    centred on, otherwise the plain local linear fit.
    """
    r = fit.residuals if residuals is None else residuals
    n = data.n
    tau = np.stack([replicate_rng(seed, STREAM_BAND, g).standard_normal(n) for g in range(G)])
    a = np.linalg.solve(data.x.T @ data.x, data.x.T)                        # (p, n)
    out = np.empty((G, data.J, data.p))
    for j, w in enumerate(_eval_smoothers(data, fit, corrected)):
        proc = np.einsum("gn,ln,nm->glm", tau, a, r[:, j, :])
        out[:, j, :] = np.sqrt(n) * np.max(np.abs(proc @ w.T), axis=2)
    return out


def scb_critical_value(data: FunctionalDataset, fit: CoefficientFit, j: int, l: int, alpha,
                       G: int = 1000, seed: int = 0, corrected: bool = True):
    """Empirical ``1 - alpha`` percentile of the multiplier-process suprema."""
    sup = scb_suprema(data, fit, G, seed, corrected=corrected)[:, j, l]
    return order_statistic_quantile(sup, alpha)


def build_band(fit: CoefficientFit, j: int, l: int, alpha: float, c: float, n: int,
               G: int | None = None, seed: int | None = None) -> BandResult:
    """``b_jl(s) - bias(s) +/- c / sqrt(n)`` on the fit's evaluation points."""
    est = fit.corrected[j, l]
    half = c / np.sqrt(n)
    return BandResult(j, l, float(alpha), float(c), fit.eval_points, est, est - half, est + half, G, seed)


def all_bands(data: FunctionalDataset, fit: CoefficientFit, alphas, G: int = 1000, seed: int = 0,
              corrected: bool = True) -> list:
    """Bands for every coefficient and level from one set of draws."""
    alphas = np.atleast_1d(alphas)
    sup = scb_suprema(data, fit, G, seed, corrected=corrected)
    bands = []
    for j in range(data.J):
        for l in range(data.p):
            crit = order_statistic_quantile(sup[:, j, l], alphas)
            bands += [build_band(fit, j, l, a, c, data.n, G, seed) for a, c in zip(alphas, crit)]
    return bands
