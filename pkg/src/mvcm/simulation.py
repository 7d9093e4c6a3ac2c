"""Synthetic bivariate designs and Monte Carlo studies of the test and the bands."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .coefficients import fit_auto
from .data import FunctionalDataset, validate_dataset
from .fpca import empirical_covariance
from .inference import order_statistic_quantile, scb_suprema, wild_bootstrap_test, zero_effect_hypothesis
from .smoothing import smooth_auto

logger = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)
# absorbs roundoff when a noiseless design gives a zero-width band
COVER_ATOL = 1e-9
HALF_ROOT = 2.0 ** -0.5


def example_coefficients(s: NDArray, c: float = 1.0) -> NDArray:
    """``B(s)`` of the bivariate example as ``(J=2, p=3, len(s))``; ``c`` scales ``b13`` and ``b23``."""
    s = np.asarray(s, dtype=float)
    bump = 4.0 * s * (1.0 - s) - 0.4
    return np.stack([
        np.stack([s**2, (1.0 - s) ** 2, c * bump]),
        np.stack([5.0 * (s - 0.5) ** 2, np.sqrt(s), c * bump]),
    ])


def example_eigenfunctions(s: NDArray) -> NDArray:
    """``psi_jl(s)`` as ``(J=2, L=2, len(s))``."""
    s = np.asarray(s, dtype=float)
    sin, cos = SQRT2 * np.sin(2 * np.pi * s), SQRT2 * np.cos(2 * np.pi * s)
    return np.stack([np.stack([sin, cos]), np.stack([cos, sin])])


@dataclass(frozen=True)
class SimulationDesign:
    """Bivariate design with three covariates ``(1, x1, x2)``.

    ``coefficients(s, c)`` and ``eigenfunctions(s)`` may be replaced; the
    defaults are the closed forms in :func:`example_coefficients` and
    :func:`example_eigenfunctions`.
    """

    n: int = 200
    M: int = 50
    c: float = 0.0
    eigenvalues: tuple = ((1.2, 0.6), (1.0, 0.5))
    noise_variances: tuple = (0.2, 0.1)
    correlation: float = HALF_ROOT
    grid: str = "uniform"
    coefficients: Callable = example_coefficients
    eigenfunctions: Callable = example_eigenfunctions

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if np.any(lam < 0) or np.any(np.diff(lam, axis=1) > 0):
            raise ValueError("eigenvalues must be nonnegative and descending per response")
        if np.any(np.asarray(self.noise_variances) < 0):
            raise ValueError("noise variances must be nonnegative")
        if self.c < 0:
            raise ValueError("effect scale c must be nonnegative")
        if self.grid not in ("uniform", "equispaced"):
            raise ValueError("grid must be 'uniform' or 'equispaced'")
        if self.M < 3 or self.n < 4:
            raise ValueError("need M >= 3 and n >= 4")

    def truth(self, s: NDArray) -> NDArray:
        return self.coefficients(np.asarray(s, dtype=float), self.c)

    def replace(self, **kw) -> "SimulationDesign":
        from dataclasses import replace
        return replace(self, **kw)


def generate_dataset(design: SimulationDesign, seed, return_latent: bool = False):
    """Draw one dataset; ``seed`` is anything :func:`numpy.random.default_rng` accepts.

    With ``return_latent`` the result is ``(data, eta, eps)`` with the
    curve deviations and measurement errors that went into ``y``.
    """
    rng = np.random.default_rng(seed)
    n, M = design.n, design.M
    if design.grid == "uniform":
        grid = np.sort(rng.uniform(0.0, 1.0, M))
    else:
        grid = np.linspace(0.0, 1.0, M)
    rho = design.correlation
    z = rng.multivariate_normal([0.0, 0.0], [[1.0, rho], [rho, 1.0]], size=n)
    x = np.column_stack([np.ones(n), z])

    lam = np.asarray(design.eigenvalues, dtype=float)                 # (J, L)
    xi = rng.standard_normal((n,) + lam.shape) * np.sqrt(lam)         # (n, J, L)
    psi = design.eigenfunctions(grid)                                 # (J, L, M)
    eta = np.einsum("ijl,jlm->ijm", xi, psi)
    sd = np.sqrt(np.asarray(design.noise_variances, dtype=float))
    eps = rng.standard_normal((n, lam.shape[0], M)) * sd[None, :, None]
    mean = np.einsum("ip,jpm->ijm", x, design.truth(grid))
    data = validate_dataset(grid, mean + eta + eps, x)
    return (data, eta, eps) if return_latent else data


def replicate_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class StudyResult:
    """One row per condition; ``rate`` is a rejection rate or a coverage proportion."""

    kind: str
    rows: list
    reps: int
    seed: int
    aborted: int = 0
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def columns(self) -> list:
        return list(self.rows[0].keys()) if self.rows else []

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(v) for k, v in row.items()})

    def lookup(self, **conditions) -> list:
        return [r for r in self.rows if all(r[k] == v for k, v in conditions.items())]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _binomial_row(hits: int, total: int) -> dict:
    rate = hits / total if total else float("nan")
    se = float(np.sqrt(rate * (1.0 - rate) / total)) if total else float("nan")
    return {"rate": rate, "se": se, "count": hits, "completed": total}


def _map(fn, jobs, n_jobs: int) -> list:
    if n_jobs <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, jobs))


# -- global test power -------------------------------------------------------

TEST_COEFFICIENTS = ((0, 2), (1, 2))


def pipeline_p_value(data: FunctionalDataset, G: int, seed: int, coefficients=TEST_COEFFICIENTS) -> float:
    """Fit, smooth, estimate the covariance and bootstrap ``H0: b_jl = 0`` for the listed coefficients."""
    fit = fit_auto(data)
    curves = smooth_auto(data, fit)
    cov = empirical_covariance(curves, data.p)
    hyp = zero_effect_hypothesis(data.J, data.p, coefficients)
    return wild_bootstrap_test(data, fit, curves, cov, hyp, G=G, seed=seed).p_value


def _power_unit(job) -> list:
    design, c_values, rep, G, seed = job
    ss = replicate_seed(seed, design.n, rep)
    data_seed, boot_seed = ss.spawn(2)
    out = []
    for c in c_values:
        data = generate_dataset(design.replace(c=c), data_seed)
        try:
            out.append(pipeline_p_value(data, G, _int_seed(boot_seed)))
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            logger.warning("power replicate %d (n=%d, c=%g) aborted: %s", rep, design.n, c, exc)
            out.append(None)
    return out


def run_power_study(design: SimulationDesign, c_values: Sequence[float], n_values: Sequence[int],
                    alpha_values: Sequence[float], reps: int, G: int = 500, seed: int = 0,
                    n_jobs: int = 1) -> StudyResult:
    """Rejection rates of the bootstrap test of ``b13 = b23 = 0``.

    Every ``c`` reuses the same random draws within a replicate, so the
    rates across ``c`` are paired. A replicate rejects at level ``alpha``
    when its p-value is below ``alpha``.
    """
    t0 = time.perf_counter()
    c_values = [float(c) for c in c_values]
    rows, aborted = [], 0
    for n in n_values:
        d = design.replace(n=int(n))
        jobs = [(d, c_values, rep, G, seed) for rep in range(reps)]
        pvals = np.array(_map(_power_unit, jobs, n_jobs), dtype=object)       # (reps, len(c))
        for k, c in enumerate(c_values):
            col = [v for v in pvals[:, k] if v is not None]
            aborted += reps - len(col)
            for alpha in alpha_values:
                hits = sum(1 for v in col if v < alpha)
                rows.append({"c": c, "n": int(n), "alpha": float(alpha), **_binomial_row(hits, len(col))})
    return StudyResult("power", rows, reps, seed, aborted, time.perf_counter() - t0)


def power_long_format(result: StudyResult) -> list:
    """Rows ``(series, n, alpha, c, rejection_rate, se)`` for plotting rate against ``c``."""
    return [{"series": f"n={r['n']}, alpha={r['alpha']:g}", "n": r["n"], "alpha": r["alpha"],
             "c": r["c"], "rejection_rate": r["rate"], "se": r["se"]} for r in result.rows]


# -- band coverage -----------------------------------------------------------

def _coverage_unit(job):
    design, alphas, rep, G, seed = job
    ss = replicate_seed(seed, design.M, rep)
    data_seed, boot_seed = ss.spawn(2)
    data = generate_dataset(design, data_seed)
    try:
        fit = fit_auto(data)
        sup = scb_suprema(data, fit, G, _int_seed(boot_seed))
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        logger.warning("coverage replicate %d (M=%d) aborted: %s", rep, design.M, exc)
        return None
    truth = design.truth(fit.eval_points)
    err = np.sqrt(data.n) * np.max(np.abs(fit.corrected - truth), axis=2)   # (J, p)
    covered = np.empty((len(alphas), data.J, data.p), dtype=bool)
    for j in range(data.J):
        for l in range(data.p):
            crit = order_statistic_quantile(sup[:, j, l], alphas)
            covered[:, j, l] = err[j, l] <= crit + COVER_ATOL
    return covered


def run_coverage_study(design: SimulationDesign, n: int, M_values: Sequence[int],
                       alpha_values: Sequence[float], reps: int, G: int = 1000, seed: int = 0,
                       n_jobs: int = 1) -> StudyResult:
    """Simultaneous coverage of the bands for all six coefficients, per ``(M, alpha)``."""
    t0 = time.perf_counter()
    alphas = [float(a) for a in alpha_values]
    rows, aborted = [], 0
    for M in M_values:
        d = design.replace(n=int(n), M=int(M))
        jobs = [(d, alphas, rep, G, seed) for rep in range(reps)]
        done = [r for r in _map(_coverage_unit, jobs, n_jobs) if r is not None]
        aborted += reps - len(done)
        stack = np.array(done) if done else np.zeros((0, len(alphas), 2, 3), dtype=bool)
        for a, alpha in enumerate(alphas):
            for j in range(stack.shape[2]):
                for l in range(stack.shape[3]):
                    hits = int(stack[:, a, j, l].sum())
                    rows.append({"M": int(M), "alpha": alpha, "coefficient": f"b{j + 1}{l + 1}",
                                 **_binomial_row(hits, len(done))})
    return StudyResult("coverage", rows, reps, seed, aborted, time.perf_counter() - t0)
