"""Design matrix over a position grid: stacked real/imaginary parts of the
step and impulse responses at every candidate position, plus the stacked
observation vector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fibermodel import (
    DEFAULT_CONSTANTS,
    FrequencyProfile,
    PhysicalConstants,
    fault_response,
    reflection_response,
)

__all__ = [
    "PositionGrid",
    "Dictionary",
    "position_grid",
    "build_dictionary",
    "build_observation",
]


@dataclass(frozen=True)
class PositionGrid:
    """Uniform candidate positions X_1..X_q."""

    positions: np.ndarray
    step: float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 1 or pos.size < 1:
            raise ValueError("grid needs at least one position")
        d = np.diff(pos)
        if pos.size > 1 and not (np.all(d > 0) and np.allclose(d, self.step, rtol=1e-9, atol=1e-9)):
            raise ValueError("grid must be strictly increasing with uniform spacing == step")
        if self.step <= 0:
            raise ValueError("step must be positive")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.positions.size


def position_grid(length: float, step: float = 10.0, margin: float = 1500.0) -> PositionGrid:
    """Grid from one step up to ``length + margin``.

    Starting one step in avoids the identically-zero column a step at z=0
    would produce. The margin keeps positions past the nominal fiber end in
    the candidate set: a reflective end event displaces the best-fitting
    step beyond the end, and those candidates must exist to be selected
    (and later corrected).
    """
    if length <= 0 or step <= 0 or margin < 0:
        raise ValueError("length and step must be positive, margin >= 0")
    n = int(math.floor((length + margin) / step))
    if n < 1:
        raise ValueError("grid would be empty; reduce step")
    return PositionGrid(step * np.arange(1, n + 1), step)


@dataclass(frozen=True)
class Dictionary:
    """Real design matrix ``(1/L) [steps | impulses | intercept?]``.

    Rows stack Re over the frequency grid, then Im. The first ``q`` columns
    are step atoms, the next ``q`` impulse atoms when present, and an
    unpenalized all-ones intercept column may sit last.
    """

    matrix: np.ndarray
    grid: PositionGrid
    frequencies: np.ndarray
    normalization: float
    has_reflections: bool
    has_intercept: bool
    constants: PhysicalConstants

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if not np.all(np.isfinite(m)):
            raise ValueError("dictionary entries must be finite")
        expected = len(self.grid) * (2 if self.has_reflections else 1) + int(self.has_intercept)
        if m.shape != (2 * self.frequencies.size, expected):
            raise ValueError(f"matrix shape {m.shape} does not match metadata")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def q(self) -> int:
        return len(self.grid)

    @property
    def n_penalized(self) -> int:
        return self.matrix.shape[1] - int(self.has_intercept)

    def fault_slice(self) -> slice:
        return slice(0, self.q)

    def reflection_slice(self) -> slice:
        if not self.has_reflections:
            return slice(self.q, self.q)
        return slice(self.q, 2 * self.q)

    def column_position(self, j: int) -> float:
        """Grid position represented by penalized column j."""
        if j >= self.n_penalized:
            raise IndexError("intercept column has no position")
        return float(self.grid.positions[j % self.q])


def build_dictionary(
    grid: PositionGrid,
    frequencies: np.ndarray,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    include_reflections: bool = True,
    include_intercept: bool = False,
) -> Dictionary:
    """Evaluate the step and impulse responses at every grid position."""
    f = np.asarray(frequencies, dtype=float)
    if f.size == 0:
        raise ValueError("frequency grid must not be empty")
    length = float(grid.positions[-1])
    blocks = [fault_response(f, grid.positions, constants)]
    if include_reflections:
        blocks.append(reflection_response(f, grid.positions, constants))
    complex_cols = np.concatenate(blocks, axis=1) / length
    matrix = np.vstack([complex_cols.real, complex_cols.imag])
    if include_intercept:
        matrix = np.hstack([matrix, np.ones((matrix.shape[0], 1))])
    return Dictionary(
        matrix=np.asfortranarray(matrix),
        grid=grid,
        frequencies=f,
        normalization=1.0 / length,
        has_reflections=include_reflections,
        has_intercept=include_intercept,
        constants=constants,
    )


def build_observation(profile: FrequencyProfile) -> np.ndarray:
    """Stack Re over the frequency grid, then Im."""
    return np.concatenate([profile.samples.real, profile.samples.imag])
