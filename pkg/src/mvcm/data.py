"""Functional responses on a shared grid, plus the small linear-algebra helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray


class DatasetError(ValueError):
    """Raised when a candidate dataset violates an invariant."""


@dataclass(frozen=True, eq=False)
class FunctionalDataset:
    """Curves ``y[i, j, m]`` observed at ``grid[m]`` for subject ``i`` and response ``j``.

    Parameters
    ----------
    grid : ndarray, shape (M,)
        Strictly increasing locations in [0, 1], shared by every subject.
    y : ndarray, shape (n, J, M)
        Response values.
    x : ndarray, shape (n, p)
        Covariates. Include a column of ones for an intercept.
    """

    grid: NDArray[np.float64]
    y: NDArray[np.float64]
    x: NDArray[np.float64]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def J(self) -> int:
        return self.y.shape[1]

    @property
    def M(self) -> int:
        return self.y.shape[2]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, subjects) -> "FunctionalDataset":
        subjects = np.asarray(subjects)
        return FunctionalDataset(self.grid, self.y[subjects], self.x[subjects])

    def with_responses(self, y: NDArray[np.float64]) -> "FunctionalDataset":
        return FunctionalDataset(self.grid, np.asarray(y, dtype=float), self.x)


def _check_grid(grid: NDArray[np.float64], name: str = "grid") -> None:
    if grid.ndim != 1:
        raise DatasetError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(grid)):
        raise DatasetError(f"{name} contains non-finite values")
    if np.any(grid < 0.0) or np.any(grid > 1.0):
        raise DatasetError(f"{name} outside [0, 1]")


def validate_dataset(grid: ArrayLike | FunctionalDataset, y: ArrayLike | None = None,
                     x: ArrayLike | None = None) -> FunctionalDataset:
    """Check a candidate dataset and return it as a :class:`FunctionalDataset`.

    Accepts either an existing dataset (validation is idempotent) or the three
    raw arrays. The first violated invariant is reported as a
    :class:`DatasetError`.
    """
    if isinstance(grid, FunctionalDataset):
        ds = grid
        grid, y, x = ds.grid, ds.y, ds.x
    grid = np.asarray(grid, dtype=float)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)

    _check_grid(grid)
    if grid.size < 3:
        raise DatasetError(f"grid needs at least 3 points, got {grid.size}")
    if np.any(np.diff(grid) <= 0):
        raise DatasetError("grid not increasing")
    if y.ndim != 3:
        raise DatasetError(f"y must have shape (n, J, M), got {y.shape}")
    if x.ndim != 2:
        raise DatasetError(f"x must have shape (n, p), got {x.shape}")
    n, _, M = y.shape
    if M != grid.size:
        raise DatasetError(f"y has {M} grid columns but grid has {grid.size} points")
    if x.shape[0] != n:
        raise DatasetError(f"x has {x.shape[0]} rows but y has {n} subjects")
    bad = np.argwhere(~np.isfinite(y))
    if bad.size:
        i, j, m = bad[0]
        raise DatasetError(f"non-finite value at subject {i}, response {j}, grid point {m}")
    if not np.all(np.isfinite(x)):
        raise DatasetError("non-finite covariate value")
    p = x.shape[1]
    if p > n or np.linalg.matrix_rank(x) < p:
        raise DatasetError("rank-deficient covariates")
    return FunctionalDataset(grid, y, x)


def check_points(points: ArrayLike) -> NDArray[np.float64]:
    """Validate an evaluation grid: nonempty, sorted, inside [0, 1]."""
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise DatasetError("evaluation grid is empty")
    _check_grid(pts, "evaluation grid")
    if np.any(np.diff(pts) < 0):
        raise DatasetError("evaluation grid not sorted")
    return pts


def vec_row_major(c: ArrayLike) -> NDArray:
    """Stack the rows of ``c``: (c11, ..., c1M2, c21, ..., cM1M2)."""
    return np.asarray(c).reshape(-1)


def kronecker(c: ArrayLike, d: ArrayLike) -> NDArray:
    return np.kron(np.atleast_2d(c), np.atleast_2d(d))


def outer_square(a: ArrayLike) -> NDArray:
    a = np.asarray(a).reshape(-1)
    return np.outer(a, a)
