"""Index arithmetic for product state/action spaces.

Provides mixed-radix flattening of multi-variable discrete states, uniform
binning of continuous variables, and the layout rule that places the flat
(state, action) domain into either the classic states-by-actions matrix or a
padded near-square matrix whose row and column counts are both close to the
square root of the total cell count.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._accel import jit_kernel

CLASSIC = "classic"
FLAT_NEAR_SQUARE = "flat_near_square"
PLAN_MODES = (CLASSIC, FLAT_NEAR_SQUARE)


@dataclass(frozen=True)
class ProductSpace:
    """Cartesian product of per-variable index ranges for states and actions."""

    state_dims: tuple[int, ...]
    action_dims: tuple[int, ...]

    def __post_init__(self) -> None:
        for dims, label in ((self.state_dims, "state"), (self.action_dims, "action")):
            if len(dims) == 0:
                raise ValueError(f"{label}_dims must not be empty")
            if any(int(d) < 1 for d in dims):
                raise ValueError(f"{label}_dims must all be >= 1, got {dims}")

    @property
    def n_states(self) -> int:
        return math.prod(self.state_dims)

    @property
    def n_actions(self) -> int:
        return math.prod(self.action_dims)


@dataclass(frozen=True)
class GridSpec:
    """Uniform binning of one continuous variable over [lower, upper]."""

    lower: float
    upper: float
    bins: int

    def __post_init__(self) -> None:
        if not (self.lower < self.upper):
            raise ValueError(f"need lower < upper, got [{self.lower}, {self.upper}]")
        if self.bins < 1:
            raise ValueError(f"bins must be >= 1, got {self.bins}")

    @property
    def width(self) -> float:
        return (self.upper - self.lower) / self.bins


@dataclass(frozen=True)
class ReshapePlan:
    """Matrix layout for a flat (state, action) domain.

    ``n_rows * n_cols >= total_cells``; the excess cells are padding that no
    (state, action) pair ever maps to.
    """

    mode: str
    n_rows: int
    n_cols: int
    total_cells: int
    action_count: int

    @property
    def n_states(self) -> int:
        return self.total_cells // self.action_count

    @property
    def padding(self) -> int:
        return self.n_rows * self.n_cols - self.total_cells


def flatten(dims: tuple[int, ...], index: tuple[int, ...]) -> int:
    """Row-major flat position of a multi-index, last variable fastest."""
    if len(index) != len(dims):
        raise IndexError(f"index has {len(index)} components, dims has {len(dims)}")
    flat = 0
    for d, i in zip(dims, index):
        if not 0 <= i < d:
            raise IndexError(f"component {i} out of range for dimension {d}")
        flat = flat * d + i
    return flat


def unflatten(dims: tuple[int, ...], flat: int) -> tuple[int, ...]:
    """Inverse of :func:`flatten`."""
    total = math.prod(dims)
    if not 0 <= flat < total:
        raise IndexError(f"flat index {flat} out of range for {total} cells")
    out = []
    for d in reversed(dims):
        out.append(flat % d)
        flat //= d
    return tuple(reversed(out))


def plan(space: ProductSpace, mode: str = CLASSIC) -> ReshapePlan:
    """Choose the Q-matrix layout for a product space.

    ``classic`` keeps the states-by-actions rectangle.  ``flat_near_square``
    flattens every (state, action) pair to a single index and folds that
    range into ceil(sqrt(total)) rows, which keeps the row and column counts
    within one of each other and minimizes rank-times-perimeter parameter
    counts for factorized models.
    """
    if mode not in PLAN_MODES:
        raise ValueError(f"unknown plan mode {mode!r}, expected one of {PLAN_MODES}")
    d_s = space.n_states
    d_a = space.n_actions
    total = d_s * d_a
    if mode == CLASSIC:
        return ReshapePlan(CLASSIC, d_s, d_a, total, d_a)
    n_rows = math.isqrt(total)
    if n_rows * n_rows < total:
        n_rows += 1
    n_cols = -(-total // n_rows)
    return ReshapePlan(FLAT_NEAR_SQUARE, n_rows, n_cols, total, d_a)


def cell_of(p: ReshapePlan, state: int, action: int) -> tuple[int, int]:
    """Matrix cell addressed by a (state, action) pair under a plan."""
    if not 0 <= action < p.action_count:
        raise IndexError(f"action {action} out of range for {p.action_count}")
    if not 0 <= state < p.n_states:
        raise IndexError(f"state {state} out of range for {p.n_states}")
    if p.mode == CLASSIC:
        return state, action
    flat = state * p.action_count + action
    return flat // p.n_cols, flat % p.n_cols


def action_cells(p: ReshapePlan, state: int) -> list[tuple[int, int]]:
    """Cells holding all action values of one state, in action order."""
    return [cell_of(p, state, a) for a in range(p.action_count)]


def low_rank_parameters(p: ReshapePlan, rank: int) -> int:
    """Free parameters of a rank-``rank`` factorization of the planned matrix."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    return rank * (p.n_rows + p.n_cols)


def table_parameters(p: ReshapePlan) -> int:
    """Free parameters of a dense table over the planned matrix."""
    return p.n_rows * p.n_cols


def discretize(grid: GridSpec, x: float) -> int:
    """Bin index of ``x``; values outside the range clamp to the edge bins."""
    if x <= grid.lower:
        return 0
    if x >= grid.upper:
        return grid.bins - 1
    i = int(grid.bins * (x - grid.lower) / (grid.upper - grid.lower))
    # Float rounding at the top edge can land one past the last bin.
    return min(i, grid.bins - 1)


def bin_center(grid: GridSpec, i: int) -> float:
    """Midpoint of bin ``i``."""
    if not 0 <= i < grid.bins:
        raise IndexError(f"bin {i} out of range for {grid.bins}")
    return grid.lower + (i + 0.5) * grid.width


@jit_kernel
def _discretize_flat(obs, lows, highs, bins):
    """Flat row-major bin index of a continuous observation vector."""
    flat = 0
    for d in range(obs.shape[0]):
        x = obs[d]
        lo = lows[d]
        hi = highs[d]
        n = bins[d]
        i = 0
        if x > lo:
            if x >= hi:
                i = n - 1
            else:
                i = int(n * (x - lo) / (hi - lo))
                if i > n - 1:
                    i = n - 1
        flat = flat * n + i
    return flat
