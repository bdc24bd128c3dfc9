"""Time grids and sampled paths."""

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import InputError, UsageError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < t_1 < ... < t_n = T."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 0:
            raise UsageError(f"n_steps must be non-negative, got {self.n_steps}")
        if self.n_steps > 0 and not self.horizon > 0:
            raise UsageError(f"horizon must be positive, got {self.horizon}")

    @property
    def step(self) -> float:
        if self.n_steps == 0:
            return 0.0
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        if self.n_steps == 0:
            return np.zeros(1)
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * factor)


@dataclass
class SamplePath:
    """Values of one process on a grid."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_steps + 1,):
            raise UsageError(
                f"path has {self.values.shape} values, grid needs {self.grid.n_steps + 1}"
            )

    @property
    def supremum(self) -> float:
        return float(self.values.max())

    @property
    def terminal(self) -> float:
        return float(self.values[-1])


@dataclass
class PathBatch:
    """A chunk of paths sharing one grid; rows are paths.

    ``flags`` marks paths whose values were capped or otherwise altered.
    ``sup`` holds the supremum of each continuous path over the horizon when
    the sampler draws it between nodes; grid maxima only bound it from below.
    """

    grid: TimeGrid
    values: np.ndarray
    flags: np.ndarray = field(default=None)  # type: ignore[assignment]
    sup: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != self.grid.n_steps + 1:
            raise UsageError(
                f"batch has {self.values.shape[1]} columns, grid needs {self.grid.n_steps + 1}"
            )
        if self.flags is None:
            self.flags = np.zeros(self.values.shape[0], dtype=bool)
        if self.sup is not None:
            self.sup = np.asarray(self.sup, dtype=float).ravel()
            if self.sup.size != self.values.shape[0]:
                raise UsageError(
                    f"{self.sup.size} suprema for {self.values.shape[0]} paths"
                )

    def __len__(self) -> int:
        return self.values.shape[0]

    def __iter__(self) -> Iterator[SamplePath]:
        for row in self.values:
            yield SamplePath(self.grid, row)

    @classmethod
    def from_paths(cls, paths) -> "PathBatch":
        paths = list(paths)
        if not paths:
            raise UsageError("cannot build a batch from zero paths")
        return cls(paths[0].grid, np.vstack([p.values for p in paths]))


def iter_batches(paths) -> Iterator[PathBatch]:
    """Normalize a path source to a stream of batches.

    Accepts a ``PathBatch``, a ``SamplePath``, a 2-D array (rows are paths on an
    implicit unit grid), or any iterable mixing batches and single paths.
    """
    if isinstance(paths, PathBatch):
        yield paths
        return
    if isinstance(paths, SamplePath):
        yield PathBatch(paths.grid, paths.values[None, :])
        return
    if isinstance(paths, np.ndarray):
        arr = np.atleast_2d(paths)
        yield PathBatch(TimeGrid(1.0, arr.shape[1] - 1), arr)
        return
    for item in paths:
        yield from iter_batches(item)


def require_finite(values: np.ndarray, what: str) -> None:
    if np.isnan(values).any():
        raise InputError(f"{what} contains NaN")
