"""Low-rank matrix factorization of a Q-matrix.

A Q-matrix estimate is the product ``left @ right`` of a tall and a wide
factor.  Single cells are trained online by stochastic gradient steps on the
squared cell error (optionally ridge-regularized or gradient-normalized),
or in closed form by alternating least squares against a target matrix.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._accel import jit_kernel

# An entry magnitude past this is treated as divergence of the online
# optimization, not a valid value.  NaN fails the comparison too.
OVERFLOW_GUARD = 1e12

# Gradient norms below this floor skip normalization to avoid amplifying
# noise; the raw gradient is applied instead.
NORM_FLOOR = 1e-8


class NumericalDivergenceError(RuntimeError):
    """Raised when an online update pushes a factor entry past the guard."""

    def __init__(self, message: str, cell: tuple[int, int] | None = None):
        super().__init__(message)
        self.cell = cell


@dataclass
class FactorPair:
    """Rank-``rank`` factorization: ``left`` is (n_rows, rank), ``right`` is (rank, n_cols)."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self) -> None:
        if self.left.ndim != 2 or self.right.ndim != 2:
            raise ValueError("factors must be 2-d arrays")
        if self.left.shape[1] != self.right.shape[0]:
            raise ValueError(
                f"inner dimensions differ: left {self.left.shape}, right {self.right.shape}"
            )

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    @property
    def n_rows(self) -> int:
        return self.left.shape[0]

    @property
    def n_cols(self) -> int:
        return self.right.shape[1]

    def copy(self) -> "FactorPair":
        return FactorPair(self.left.copy(), self.right.copy())


@dataclass
class AlsSweepResult:
    """Factors after an alternating least-squares sweep.

    ``ridge_events`` counts Gram solves that needed ridge damping because the
    plain solve failed or produced non-finite values.
    """

    factors: FactorPair
    ridge_events: int


@dataclass(frozen=True)
class SvdSummary:
    """Singular values and their cumulative squared-energy fractions.

    ``energy_prefix[k]`` is the fraction of total squared Frobenius norm
    carried by the ``k`` largest singular values; entry 0 is 0 and the last
    entry is 1.  For an all-zero matrix the fractions are undefined and
    ``energy_prefix`` is None.
    """

    singular_values: np.ndarray
    energy_prefix: np.ndarray | None
    k: int

    @property
    def is_zero(self) -> bool:
        return self.energy_prefix is None

    @property
    def energy(self) -> float:
        if self.energy_prefix is None:
            raise ValueError("energy fraction undefined for a zero matrix")
        return float(self.energy_prefix[self.k])


def init_factors(
    n_rows: int,
    n_cols: int,
    rank: int,
    scale: float = 0.1,
    rng: np.random.Generator | int | None = None,
) -> FactorPair:
    """Random positive factors with entries uniform on [scale/2, 1.5*scale].

    ``left`` is drawn before ``right``, so a fixed generator state fixes the
    initialization exactly.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > min(n_rows, n_cols):
        raise ValueError(
            f"rank {rank} exceeds min(n_rows, n_cols) = {min(n_rows, n_cols)}"
        )
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    left = rng.uniform(0.5 * scale, 1.5 * scale, size=(n_rows, rank))
    right = rng.uniform(0.5 * scale, 1.5 * scale, size=(rank, n_cols))
    return FactorPair(left, right)


@jit_kernel
def _predict_cell(left, right, row, col):
    acc = 0.0
    for m in range(left.shape[1]):
        acc += left[row, m] * right[m, col]
    return acc


@jit_kernel
def _predict_cells(left, right, rows, cols, out):
    for i in range(rows.shape[0]):
        out[i] = _predict_cell(left, right, rows[i], cols[i])


@jit_kernel
def _sgd_step(left, right, row, col, target, alpha, eta, normalize):
    """One stochastic factored update of a single cell, in place.

    Both factor slices move simultaneously using their pre-update values.
    Returns 1 if any touched entry left the finite guard range, else 0.
    """
    rank = left.shape[1]
    pred = 0.0
    for m in range(rank):
        pred += left[row, m] * right[m, col]
    delta = target - pred
    scale = 1.0
    if normalize:
        sq = 0.0
        for m in range(rank):
            gl = delta * right[m, col] - 2.0 * eta * left[row, m]
            gr = delta * left[row, m] - 2.0 * eta * right[m, col]
            sq += gl * gl + gr * gr
        norm = math.sqrt(sq)
        if norm > NORM_FLOOR:
            scale = 1.0 / norm
    step = alpha * scale
    bad = 0
    for m in range(rank):
        l_old = left[row, m]
        r_old = right[m, col]
        left[row, m] = l_old + step * (delta * r_old - 2.0 * eta * l_old)
        right[m, col] = r_old + step * (delta * l_old - 2.0 * eta * r_old)
        if not (abs(left[row, m]) <= OVERFLOW_GUARD and abs(right[m, col]) <= OVERFLOW_GUARD):
            bad = 1
    return bad


def _check_cell(fp: FactorPair, row: int, col: int) -> None:
    if not 0 <= row < fp.n_rows:
        raise IndexError(f"row {row} out of range for {fp.n_rows}")
    if not 0 <= col < fp.n_cols:
        raise IndexError(f"col {col} out of range for {fp.n_cols}")


def predict_cell(fp: FactorPair, row: int, col: int) -> float:
    """Value of one matrix cell under the factorization."""
    _check_cell(fp, row, col)
    return float(_predict_cell(fp.left, fp.right, row, col))


def predict_cells(fp: FactorPair, cells) -> np.ndarray:
    """Values of several cells, given as an iterable of (row, col) pairs."""
    pairs = list(cells)
    rows = np.empty(len(pairs), dtype=np.int64)
    cols = np.empty(len(pairs), dtype=np.int64)
    for i, (r, c) in enumerate(pairs):
        _check_cell(fp, r, c)
        rows[i] = r
        cols[i] = c
    out = np.empty(len(pairs))
    _predict_cells(fp.left, fp.right, rows, cols, out)
    return out


def sgd_update(
    fp: FactorPair,
    cell: tuple[int, int],
    target: float,
    alpha: float,
    eta: float = 0.0,
    normalize: bool = False,
) -> FactorPair:
    """One online update toward ``target`` at ``cell``; mutates ``fp`` in place.

    ``eta`` adds ridge shrinkage of the touched factor slices; ``normalize``
    rescales the stacked gradient to unit Euclidean norm before applying
    ``alpha``.  Raises :class:`NumericalDivergenceError` if the update
    produces an entry outside the finite guard range.
    """
    row, col = cell
    _check_cell(fp, row, col)
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    if not math.isfinite(target):
        raise NumericalDivergenceError(
            f"non-finite update target at cell {cell}", cell=(row, col)
        )
    bad = _sgd_step(fp.left, fp.right, row, col, target, alpha, eta, normalize)
    if bad:
        raise NumericalDivergenceError(
            f"factor entry exceeded {OVERFLOW_GUARD:g} at cell {cell}", cell=(row, col)
        )
    return fp


def build_target_matrix(fp: FactorPair, cell: tuple[int, int], target: float) -> np.ndarray:
    """Current model matrix with one cell overwritten by ``target``."""
    row, col = cell
    _check_cell(fp, row, col)
    if not math.isfinite(target):
        raise NumericalDivergenceError(
            f"non-finite update target at cell {cell}", cell=(row, col)
        )
    q = materialize(fp)
    q[row, col] = target
    return q


def _solve_gram(gram: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, int]:
    """Solve ``gram @ x = rhs``, falling back to ridge damping if singular."""
    try:
        x = np.linalg.solve(gram, rhs)
        if np.all(np.isfinite(x)):
            return x, 0
    except np.linalg.LinAlgError:
        pass
    lam = 1e-8 * np.trace(gram) / gram.shape[0]
    damped = gram + lam * np.eye(gram.shape[0])
    try:
        x = np.linalg.solve(damped, rhs)
        if np.all(np.isfinite(x)):
            return x, 1
    except np.linalg.LinAlgError:
        pass
    # Zero-trace Gram (all-zero factor) leaves the system singular even
    # after damping; least squares still returns the minimum-norm solution.
    x, *_ = np.linalg.lstsq(damped, rhs, rcond=None)
    return x, 1


def als_sweep(fp: FactorPair, target_matrix: np.ndarray, k_iters: int = 1) -> AlsSweepResult:
    """``k_iters`` alternating closed-form least-squares passes.

    Each pass refits ``left`` against the fixed target matrix with ``right``
    held, then refits ``right`` with the new ``left`` held.  Returns fresh
    factors; the input pair is not modified.
    """
    if k_iters < 1:
        raise ValueError(f"k_iters must be >= 1, got {k_iters}")
    if target_matrix.shape != (fp.n_rows, fp.n_cols):
        raise ValueError(
            f"target shape {target_matrix.shape} does not match factors "
            f"({fp.n_rows}, {fp.n_cols})"
        )
    left = fp.left.copy()
    right = fp.right.copy()
    ridge_events = 0
    for _ in range(k_iters):
        # left <- Q Rt (R Rt)^-1, solved as (R Rt) Lt = R Qt.
        sol, hit = _solve_gram(right @ right.T, right @ target_matrix.T)
        ridge_events += hit
        left = sol.T
        # right <- (Lt L)^-1 Lt Q.
        right, hit = _solve_gram(left.T @ left, left.T @ target_matrix)
        ridge_events += hit
    return AlsSweepResult(FactorPair(left, right), ridge_events)


def materialize(fp: FactorPair) -> np.ndarray:
    """Dense matrix ``left @ right``."""
    return fp.left @ fp.right


def frobenius_sq_error(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of squared entrywise differences."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.sum(d * d))


def svd_energy(q: np.ndarray, k: int) -> SvdSummary:
    """Cumulative squared-singular-value energy of the ``k`` leading values."""
    if q.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    max_k = min(q.shape)
    if not 1 <= k <= max_k:
        raise ValueError(f"k must be in [1, {max_k}], got {k}")
    s = np.linalg.svd(q, compute_uv=False)
    total = float(np.sum(s * s))
    if total == 0.0:
        return SvdSummary(s, None, k)
    prefix = np.concatenate(([0.0], np.cumsum(s * s) / total))
    prefix[-1] = 1.0
    return SvdSummary(s, prefix, k)
