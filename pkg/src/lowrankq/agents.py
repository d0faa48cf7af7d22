"""Online value-learning agents over a planned Q-matrix.

All agents share the epsilon-greedy selection rule and the one-step
bootstrapped target; they differ in how the Q-matrix is represented: a dense
table updated cell by cell, a low-rank factor pair updated by stochastic
gradient steps, or a low-rank pair refit by alternating least squares after
every transition.
"""

from dataclasses import dataclass

import numpy as np

from ._trainloop import (
    SCHED_CONST,
    SCHED_INV,
    SCHED_LIN,
    _EMPTY_2D,
    _action_values,
    _argmax_first,
    _max_value,
    _sq_error_vs_table,
)
from .factor_model import build_target_matrix, als_sweep, init_factors, sgd_update
from .index_space import (
    FLAT_NEAR_SQUARE,
    ReshapePlan,
    cell_of,
    low_rank_parameters,
    table_parameters,
)

TABULAR = "tabular"
LR_SGD = "lr_sgd"
LR_ALS = "lr_als"
VARIANTS = (TABULAR, LR_SGD, LR_ALS)

# Closed-form refits rebuild a dense matrix per step, so the variant is only
# offered on small problems.
ALS_CELL_LIMIT = 10_000

_SCHED_CODES = {"const": SCHED_CONST, "inv": SCHED_INV, "lin": SCHED_LIN}


@dataclass(frozen=True)
class Schedule:
    """Per-step scalar schedule, evaluated at the global step counter.

    ``const`` holds ``p0``.  ``inv`` decays as ``p0 / (1 + p1 * t)``.
    ``lin`` moves from ``p0`` to ``p1`` linearly over ``p2`` steps and holds
    the floor after.
    """

    kind: str
    p0: float
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in _SCHED_CODES:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        for p in (self.p0, self.p1, self.p2):
            if not np.isfinite(p):
                raise ValueError(f"schedule parameters must be finite: {self}")
        if self.kind == "inv" and self.p1 < 0:
            raise ValueError(f"inverse-decay rate must be >= 0, got {self.p1}")
        if self.kind == "lin" and self.p2 <= 0:
            raise ValueError(f"linear decay needs a positive step count, got {self.p2}")

    def value(self, t: int) -> float:
        if self.kind == "const":
            return self.p0
        if self.kind == "inv":
            return self.p0 / (1.0 + self.p1 * t)
        frac = t / self.p2
        if frac > 1.0:
            frac = 1.0
        return self.p0 + (self.p1 - self.p0) * frac

    def bounds(self) -> tuple[float, float]:
        """Smallest and largest value the schedule attains or approaches."""
        if self.kind == "const":
            return self.p0, self.p0
        if self.kind == "inv":
            lo = 0.0 if self.p1 > 0 else self.p0
            return min(lo, self.p0), max(lo, self.p0)
        return min(self.p0, self.p1), max(self.p0, self.p1)

    def always_positive(self) -> bool:
        """True if the value stays strictly positive at every finite step."""
        if self.kind == "inv":
            return self.p0 > 0
        lo, _ = self.bounds()
        return lo > 0

    def kernel_params(self) -> tuple[int, float, float, float]:
        return _SCHED_CODES[self.kind], self.p0, self.p1, self.p2

    def serialize(self) -> str:
        if self.kind == "const":
            return repr(self.p0)
        if self.kind == "inv":
            return f"inv:{self.p0!r},{self.p1!r}"
        return f"lin:{self.p0!r},{self.p1!r},{self.p2!r}"


def parse_schedule(text: str) -> Schedule:
    """Parse ``"0.2"``, ``"inv:a0,c"`` or ``"lin:start,floor,steps"``."""
    text = text.strip()
    kind, sep, rest = text.partition(":")
    try:
        if not sep:
            return Schedule("const", float(text))
        parts = [float(p) for p in rest.split(",")]
        if kind == "inv" and len(parts) == 2:
            return Schedule("inv", parts[0], parts[1])
        if kind == "lin" and len(parts) == 3:
            return Schedule("lin", parts[0], parts[1], parts[2])
    except ValueError as err:
        raise ValueError(f"bad schedule {text!r}: {err}") from None
    raise ValueError(
        f"bad schedule {text!r}: expected a number, 'inv:a0,c' or 'lin:start,floor,steps'"
    )


@dataclass(frozen=True)
class AgentConfig:
    """Hyperparameters shared by every agent variant."""

    variant: str
    gamma: float
    alpha: Schedule
    epsilon: Schedule
    rank: int = 2
    eta: float = 0.0
    als_k: int = 5
    normalize: bool = False
    init_scale: float = 0.1
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown agent variant {self.variant!r}, expected {VARIANTS}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if not self.alpha.always_positive():
            raise ValueError(f"alpha schedule must stay positive: {self.alpha.serialize()}")
        lo, hi = self.epsilon.bounds()
        if lo < 0.0 or hi > 1.0:
            raise ValueError(
                f"epsilon schedule must stay within [0, 1]: {self.epsilon.serialize()}"
            )
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.als_k < 1:
            raise ValueError(f"als_k must be >= 1, got {self.als_k}")
        if self.init_scale <= 0:
            raise ValueError(f"init_scale must be > 0, got {self.init_scale}")


@dataclass(frozen=True)
class Transition:
    """One environment step as seen by ``learn``."""

    state: int
    action: int
    reward: float
    next_state: int
    terminal: bool
    truncated: bool


class _QAgent:
    """Shared selection, target and bookkeeping logic."""

    def __init__(self, plan: ReshapePlan, config: AgentConfig):
        self.plan = plan
        self.config = config
        self.t = 0
        self._near_square = plan.mode == FLAT_NEAR_SQUARE
        self._n_cols = plan.n_cols
        self._d_a = plan.action_count
        self._vals = np.empty(plan.action_count)

    def _kernel_args(self):
        raise NotImplementedError

    def _update(self, cell: tuple[int, int], target: float, alpha: float) -> None:
        raise NotImplementedError

    @property
    def epsilon_now(self) -> float:
        return self.config.epsilon.value(self.t)

    @property
    def alpha_now(self) -> float:
        return self.config.alpha.value(self.t)

    def action_values(self, state: int) -> np.ndarray:
        """Current estimates for every action at ``state``, in action order."""
        if not 0 <= state < self.plan.n_states:
            raise IndexError(f"state {state} out of range for {self.plan.n_states}")
        out = np.empty(self._d_a)
        use_lr, q, left, right = self._kernel_args()
        _action_values(
            use_lr, q, left, right, self._near_square, self._n_cols, self._d_a, state, out
        )
        return out

    def greedy_action(self, state: int) -> int:
        """Highest-value action; ties go to the lowest action index."""
        values = self.action_values(state)
        return int(_argmax_first(values, self._d_a))

    def select_action(self, state: int, rng: np.random.Generator) -> int:
        """Epsilon-greedy draw.

        Always consumes exactly two uniforms (explore coin, then action
        draw), so selection stays aligned with pre-drawn random blocks
        whichever branch is taken.
        """
        eps_t = self.epsilon_now
        u = rng.random()
        ua = rng.random()
        if u < eps_t:
            a = int(ua * self._d_a)
            return min(a, self._d_a - 1)
        return self.greedy_action(state)

    def learn(self, tr: Transition) -> None:
        """One-step bootstrapped value update; advances the step counter."""
        target = tr.reward
        if not tr.terminal:
            next_values = self.action_values(tr.next_state)
            target = tr.reward + self.config.gamma * float(_max_value(next_values, self._d_a))
        cell = cell_of(self.plan, tr.state, tr.action)
        self._update(cell, target, self.alpha_now)
        self.t += 1

    def greedy_policy(self) -> np.ndarray:
        """Greedy action per state over the whole state range."""
        out = np.empty(self.plan.n_states, dtype=np.int64)
        for s in range(self.plan.n_states):
            out[s] = self.greedy_action(s)
        return out

    def q_matrix(self) -> np.ndarray:
        """Dense (n_states, n_actions) view of the current estimates."""
        out = np.empty((self.plan.n_states, self._d_a))
        for s in range(self.plan.n_states):
            out[s] = self.action_values(s)
        return out

    def sfe(self, q_reference: np.ndarray) -> float:
        """Sum of squared errors against a reference (n_states, n_actions) table.

        Only logical (state, action) cells enter the sum; padding cells of a
        near-square layout do not.
        """
        expected = (self.plan.n_states, self._d_a)
        if q_reference.shape != expected:
            raise ValueError(f"reference shape {q_reference.shape}, expected {expected}")
        use_lr, q, left, right = self._kernel_args()
        return float(
            _sq_error_vs_table(
                use_lr, q, left, right, self._near_square, self._n_cols, self._d_a,
                np.ascontiguousarray(q_reference, dtype=float),
            )
        )


class TabularAgent(_QAgent):
    """Dense Q-table with per-cell stochastic updates.

    The table starts at small positive uniform values, the same law used for
    factor initialization.  An all-zero table is a degenerate start here: ties
    break toward action 0, so until the first nonzero reward the greedy walk
    is pinned to one action everywhere and on sparse-reward tasks the first
    success arrives too late to learn from.
    """

    def __init__(self, plan: ReshapePlan, config: AgentConfig, rng=None):
        super().__init__(plan, config)
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(config.seed if rng is None else rng)
        self.q = rng.uniform(
            0.5 * config.init_scale,
            1.5 * config.init_scale,
            size=(plan.n_rows, plan.n_cols),
        )

    @property
    def parameters(self) -> int:
        return table_parameters(self.plan)

    def _kernel_args(self):
        return False, self.q, _EMPTY_2D, _EMPTY_2D

    def _update(self, cell, target, alpha):
        r, c = cell
        self.q[r, c] = self.q[r, c] + alpha * (target - self.q[r, c])


class LowRankSgdAgent(_QAgent):
    """Factorized Q-matrix trained by per-cell stochastic gradient steps."""

    def __init__(self, plan: ReshapePlan, config: AgentConfig, rng=None):
        super().__init__(plan, config)
        self.factors = init_factors(
            plan.n_rows, plan.n_cols, config.rank, config.init_scale,
            config.seed if rng is None else rng,
        )

    @property
    def parameters(self) -> int:
        return low_rank_parameters(self.plan, self.config.rank)

    def _kernel_args(self):
        return True, _EMPTY_2D, self.factors.left, self.factors.right

    def _update(self, cell, target, alpha):
        sgd_update(
            self.factors, cell, target, alpha,
            eta=self.config.eta, normalize=self.config.normalize,
        )


class LowRankAlsAgent(_QAgent):
    """Factorized Q-matrix refit by alternating least squares every step.

    Each transition overwrites one cell of the current dense estimate with
    the bootstrapped target and refits both factors against that matrix.
    """

    def __init__(self, plan: ReshapePlan, config: AgentConfig, rng=None):
        if plan.total_cells > ALS_CELL_LIMIT:
            raise ValueError(
                f"lr_als rebuilds dense {plan.n_rows}x{plan.n_cols} targets; "
                f"limited to {ALS_CELL_LIMIT} cells, got {plan.total_cells}"
            )
        super().__init__(plan, config)
        self.factors = init_factors(
            plan.n_rows, plan.n_cols, config.rank, config.init_scale,
            config.seed if rng is None else rng,
        )
        self.ridge_events = 0

    @property
    def parameters(self) -> int:
        return low_rank_parameters(self.plan, self.config.rank)

    def _kernel_args(self):
        return True, _EMPTY_2D, self.factors.left, self.factors.right

    def _update(self, cell, target, alpha):
        q_target = build_target_matrix(self.factors, cell, target)
        result = als_sweep(self.factors, q_target, self.config.als_k)
        self.factors = result.factors
        self.ridge_events += result.ridge_events


def make_agent(plan: ReshapePlan, config: AgentConfig, rng=None):
    """Build the agent named by ``config.variant`` over ``plan``."""
    if config.variant == TABULAR:
        return TabularAgent(plan, config, rng)
    if config.variant == LR_SGD:
        return LowRankSgdAgent(plan, config, rng)
    return LowRankAlsAgent(plan, config, rng)
