"""Native benchmark environments behind one episodic interface.

All three tasks are self-contained reimplementations of the classic control
benchmarks: a 4x4 deterministic grid walk, torque-limited pendulum swing-up,
and the two-link acrobot.  Continuous tasks are exposed to the discrete
agents through :class:`DiscretizedEnv`, which bins observations onto uniform
grids and maps action indices to torques.

``reset(rng)`` consumes a fixed number of uniform draws per environment
(0, 2 and 4 respectively), so equal generator states give equal episodes.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._accel import jit_kernel
from .index_space import GridSpec, ProductSpace, _discretize_flat

FROZENLAKE = "frozenlake"
PENDULUM = "pendulum"
ACROBOT = "acrobot"
ENV_NAMES = (FROZENLAKE, PENDULUM, ACROBOT)


@dataclass(frozen=True)
class StepResult:
    """Outcome of one transition.

    ``terminal`` marks true episode end states; ``truncated`` marks the step
    budget running out.  A terminal step is never also truncated.
    """

    observation: object
    reward: float
    terminal: bool
    truncated: bool


@dataclass(frozen=True)
class EnvSpec:
    """Discrete view of an environment: index space, grids, step budget."""

    space: ProductSpace
    grids: tuple[GridSpec, ...] | None
    max_steps: int


# ---------------------------------------------------------------------------
# FrozenLake: 4x4 grid, deterministic moves, holes and goal absorb.

FROZENLAKE_MAP = ("SFFF", "FHFH", "FFFH", "HFFG")
LEFT, DOWN, RIGHT, UP = 0, 1, 2, 3


def _build_frozenlake_tables():
    side = len(FROZENLAKE_MAP)
    n = side * side
    tiles = "".join(FROZENLAKE_MAP)
    terminal = np.array([t in "GH" for t in tiles])
    nxt = np.zeros((n, 4), dtype=np.int64)
    rew = np.zeros((n, 4))
    moves = {LEFT: (0, -1), DOWN: (1, 0), RIGHT: (0, 1), UP: (-1, 0)}
    for s in range(n):
        r, c = divmod(s, side)
        for a, (dr, dc) in moves.items():
            if terminal[s]:
                nxt[s, a] = s
                continue
            r2 = min(max(r + dr, 0), side - 1)
            c2 = min(max(c + dc, 0), side - 1)
            s2 = r2 * side + c2
            nxt[s, a] = s2
            rew[s, a] = 1.0 if tiles[s2] == "G" else 0.0
    return nxt, rew, terminal


FL_NEXT, FL_REWARD, FL_TERMINAL = _build_frozenlake_tables()


class FrozenLakeEnv:
    """Walk from the top-left start to the goal; holes end the episode unrewarded.

    Moves off the grid edge keep the current state.  Reaching the goal pays 1
    and terminates; everything else pays 0.
    """

    n_states = 16
    n_actions = 4
    max_steps = 100
    reset_draws = 0

    def __init__(self) -> None:
        self.state = 0
        self._steps = 0

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(ProductSpace((self.n_states,), (self.n_actions,)), None, self.max_steps)

    @property
    def terminal_states(self) -> frozenset:
        return frozenset(int(s) for s in np.nonzero(FL_TERMINAL)[0])

    def reset(self, rng: np.random.Generator | None = None) -> int:
        self.state = 0
        self._steps = 0
        return self.state

    def step(self, action: int) -> StepResult:
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} out of range for {self.n_actions}")
        s2 = int(FL_NEXT[self.state, action])
        reward = float(FL_REWARD[self.state, action])
        terminal = bool(FL_TERMINAL[s2])
        self.state = s2
        self._steps += 1
        truncated = (not terminal) and self._steps >= self.max_steps
        return StepResult(s2, reward, terminal, truncated)


# ---------------------------------------------------------------------------
# Pendulum: torque-limited swing-up, semi-implicit Euler, angle kept in
# [-pi, pi).

PENDULUM_GRAVITY = 10.0
PENDULUM_MASS = 1.0
PENDULUM_LENGTH = 1.0
PENDULUM_DT = 0.05
PENDULUM_MAX_SPEED = 8.0
PENDULUM_MAX_TORQUE = 2.0
_PI = math.pi


@jit_kernel
def _wrap_angle(x):
    w = ((x + _PI) % (2.0 * _PI)) - _PI
    # Float modulo can land exactly on the upper endpoint.
    if w >= _PI:
        w -= 2.0 * _PI
    return w


@jit_kernel
def _pendulum_step(theta, theta_dot, torque):
    u = torque
    if u > PENDULUM_MAX_TORQUE:
        u = PENDULUM_MAX_TORQUE
    elif u < -PENDULUM_MAX_TORQUE:
        u = -PENDULUM_MAX_TORQUE
    wrapped = _wrap_angle(theta)
    cost = wrapped * wrapped + 0.1 * theta_dot * theta_dot + 0.001 * u * u
    new_dot = theta_dot + (
        3.0 * PENDULUM_GRAVITY / (2.0 * PENDULUM_LENGTH) * math.sin(theta)
        + 3.0 / (PENDULUM_MASS * PENDULUM_LENGTH * PENDULUM_LENGTH) * u
    ) * PENDULUM_DT
    if new_dot > PENDULUM_MAX_SPEED:
        new_dot = PENDULUM_MAX_SPEED
    elif new_dot < -PENDULUM_MAX_SPEED:
        new_dot = -PENDULUM_MAX_SPEED
    new_theta = _wrap_angle(theta + new_dot * PENDULUM_DT)
    return new_theta, new_dot, -cost


class PendulumEnv:
    """Swing a gravity-loaded pole upright with bounded torque.

    State is (angle, angular velocity); the cost penalizes angle from
    upright, speed and torque, all measured before the step.  Episodes only
    truncate; there is no terminal state.
    """

    max_steps = 200
    obs_dim = 2
    reset_draws = 2
    default_grids = (GridSpec(-_PI, _PI, 21), GridSpec(-8.0, 8.0, 101))

    def __init__(self) -> None:
        self.theta = 0.0
        self.theta_dot = 0.0
        self._steps = 0

    def _obs(self) -> np.ndarray:
        return np.array([self.theta, self.theta_dot])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(2)
        self.theta = -_PI + 2.0 * _PI * u[0]
        self.theta_dot = -1.0 + 2.0 * u[1]
        self._steps = 0
        return self._obs()

    def step(self, torque: float) -> StepResult:
        self.theta, self.theta_dot, reward = _pendulum_step(
            self.theta, self.theta_dot, float(torque)
        )
        self._steps += 1
        truncated = self._steps >= self.max_steps
        return StepResult(self._obs(), float(reward), False, truncated)


# ---------------------------------------------------------------------------
# Acrobot: two-link underactuated swing-up, RK4-integrated book dynamics.

ACROBOT_M1 = 1.0
ACROBOT_M2 = 1.0
ACROBOT_L1 = 1.0
ACROBOT_LC1 = 0.5
ACROBOT_LC2 = 0.5
ACROBOT_I1 = 1.0
ACROBOT_I2 = 1.0
ACROBOT_GRAVITY = 9.8
ACROBOT_DT = 0.2
ACROBOT_SUBSTEPS = 4
ACROBOT_MAX_VEL1 = 4.0 * _PI
ACROBOT_MAX_VEL2 = 9.0 * _PI


@jit_kernel
def _acrobot_accel(th1, th2, w1, w2, torque):
    """Angular accelerations of both links given the elbow torque."""
    d1 = (
        ACROBOT_M1 * ACROBOT_LC1 * ACROBOT_LC1
        + ACROBOT_M2
        * (
            ACROBOT_L1 * ACROBOT_L1
            + ACROBOT_LC2 * ACROBOT_LC2
            + 2.0 * ACROBOT_L1 * ACROBOT_LC2 * math.cos(th2)
        )
        + ACROBOT_I1
        + ACROBOT_I2
    )
    d2 = (
        ACROBOT_M2 * (ACROBOT_LC2 * ACROBOT_LC2 + ACROBOT_L1 * ACROBOT_LC2 * math.cos(th2))
        + ACROBOT_I2
    )
    phi2 = ACROBOT_M2 * ACROBOT_LC2 * ACROBOT_GRAVITY * math.cos(th1 + th2 - _PI / 2.0)
    phi1 = (
        -ACROBOT_M2 * ACROBOT_L1 * ACROBOT_LC2 * w2 * w2 * math.sin(th2)
        - 2.0 * ACROBOT_M2 * ACROBOT_L1 * ACROBOT_LC2 * w2 * w1 * math.sin(th2)
        + (ACROBOT_M1 * ACROBOT_LC1 + ACROBOT_M2 * ACROBOT_L1)
        * ACROBOT_GRAVITY
        * math.cos(th1 - _PI / 2.0)
        + phi2
    )
    a2 = (
        torque
        + d2 / d1 * phi1
        - ACROBOT_M2 * ACROBOT_L1 * ACROBOT_LC2 * w1 * w1 * math.sin(th2)
        - phi2
    ) / (ACROBOT_M2 * ACROBOT_LC2 * ACROBOT_LC2 + ACROBOT_I2 - d2 * d2 / d1)
    a1 = -(d2 * a2 + phi1) / d1
    return a1, a2


@jit_kernel
def _acrobot_fill_obs(state, obs):
    obs[0] = math.cos(state[0])
    obs[1] = math.sin(state[0])
    obs[2] = math.cos(state[1])
    obs[3] = math.sin(state[1])
    obs[4] = state[2]
    obs[5] = state[3]


@jit_kernel
def _acrobot_step(th1, th2, w1, w2, torque):
    h = ACROBOT_DT / ACROBOT_SUBSTEPS
    for _ in range(ACROBOT_SUBSTEPS):
        k1a1, k1a2 = _acrobot_accel(th1, th2, w1, w2, torque)
        k1 = (w1, w2, k1a1, k1a2)
        k2a1, k2a2 = _acrobot_accel(
            th1 + 0.5 * h * k1[0], th2 + 0.5 * h * k1[1],
            w1 + 0.5 * h * k1[2], w2 + 0.5 * h * k1[3], torque,
        )
        k2 = (w1 + 0.5 * h * k1[2], w2 + 0.5 * h * k1[3], k2a1, k2a2)
        k3a1, k3a2 = _acrobot_accel(
            th1 + 0.5 * h * k2[0], th2 + 0.5 * h * k2[1],
            w1 + 0.5 * h * k2[2], w2 + 0.5 * h * k2[3], torque,
        )
        k3 = (w1 + 0.5 * h * k2[2], w2 + 0.5 * h * k2[3], k3a1, k3a2)
        k4a1, k4a2 = _acrobot_accel(
            th1 + h * k3[0], th2 + h * k3[1],
            w1 + h * k3[2], w2 + h * k3[3], torque,
        )
        k4 = (w1 + h * k3[2], w2 + h * k3[3], k4a1, k4a2)
        th1 = th1 + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        th2 = th2 + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        w1 = w1 + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        w2 = w2 + h / 6.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])
    th1 = _wrap_angle(th1)
    th2 = _wrap_angle(th2)
    if w1 > ACROBOT_MAX_VEL1:
        w1 = ACROBOT_MAX_VEL1
    elif w1 < -ACROBOT_MAX_VEL1:
        w1 = -ACROBOT_MAX_VEL1
    if w2 > ACROBOT_MAX_VEL2:
        w2 = ACROBOT_MAX_VEL2
    elif w2 < -ACROBOT_MAX_VEL2:
        w2 = -ACROBOT_MAX_VEL2
    terminal = (-math.cos(th1) - math.cos(th1 + th2)) > 1.0
    return th1, th2, w1, w2, terminal


class AcrobotEnv:
    """Swing the free end of a two-link chain above the bar.

    Actions 0, 1, 2 apply torque -1, 0, +1 at the joint between the links.
    Observations are (cos th1, sin th1, cos th2, sin th2, w1, w2).  Each
    non-terminal step costs 1; reaching the raised configuration ends the
    episode with reward 0 on the final step.
    """

    max_steps = 500
    n_actions = 3
    obs_dim = 6
    reset_draws = 4
    default_grids = (
        GridSpec(-1.0, 1.0, 10),
        GridSpec(-1.0, 1.0, 10),
        GridSpec(-1.0, 1.0, 10),
        GridSpec(-1.0, 1.0, 10),
        GridSpec(-ACROBOT_MAX_VEL1, ACROBOT_MAX_VEL1, 26),
        GridSpec(-ACROBOT_MAX_VEL2, ACROBOT_MAX_VEL2, 26),
    )

    def __init__(self) -> None:
        self.th1 = 0.0
        self.th2 = 0.0
        self.w1 = 0.0
        self.w2 = 0.0
        self._steps = 0

    def _obs(self) -> np.ndarray:
        state = np.array([self.th1, self.th2, self.w1, self.w2])
        obs = np.empty(6)
        _acrobot_fill_obs(state, obs)
        return obs

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(4)
        self.th1 = -0.1 + 0.2 * u[0]
        self.th2 = -0.1 + 0.2 * u[1]
        self.w1 = -0.1 + 0.2 * u[2]
        self.w2 = -0.1 + 0.2 * u[3]
        self._steps = 0
        return self._obs()

    def step(self, action: int) -> StepResult:
        if action not in (0, 1, 2):
            raise ValueError(f"action {action} out of range for {self.n_actions}")
        torque = float(action) - 1.0
        self.th1, self.th2, self.w1, self.w2, terminal = _acrobot_step(
            self.th1, self.th2, self.w1, self.w2, torque
        )
        terminal = bool(terminal)
        self._steps += 1
        reward = 0.0 if terminal else -1.0
        truncated = (not terminal) and self._steps >= self.max_steps
        return StepResult(self._obs(), reward, terminal, truncated)


# ---------------------------------------------------------------------------
# Discretization wrapper.


class DiscretizedEnv:
    """Integer-state view of a continuous environment.

    Observations pass through per-dimension uniform grids into one flat
    row-major index.  If ``action_values`` is given, integer actions index
    into it (continuous-torque tasks); otherwise they pass through.
    """

    def __init__(self, env, grids: tuple[GridSpec, ...], action_values=None):
        if len(grids) != env.obs_dim:
            raise ValueError(
                f"need {env.obs_dim} grids for this environment, got {len(grids)}"
            )
        if action_values is None and not hasattr(env, "n_actions"):
            raise ValueError("action_values required for a continuous-action environment")
        self.env = env
        self.grids = tuple(grids)
        self.action_values = None if action_values is None else np.asarray(action_values, dtype=float)
        self.lows = np.array([g.lower for g in grids])
        self.highs = np.array([g.upper for g in grids])
        self.bins = np.array([g.bins for g in grids], dtype=np.int64)
        self.n_actions = len(self.action_values) if action_values is not None else env.n_actions
        self.state = 0
        self.reset_draws = env.reset_draws
        self.max_steps = env.max_steps

    @property
    def spec(self) -> EnvSpec:
        dims = tuple(int(b) for b in self.bins)
        return EnvSpec(ProductSpace(dims, (self.n_actions,)), self.grids, self.env.max_steps)

    def _flat(self, obs: np.ndarray) -> int:
        return int(_discretize_flat(obs, self.lows, self.highs, self.bins))

    def reset(self, rng: np.random.Generator) -> int:
        self.state = self._flat(self.env.reset(rng))
        return self.state

    def step(self, action: int) -> StepResult:
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} out of range for {self.n_actions}")
        if self.action_values is not None:
            inner = float(self.action_values[action])
        else:
            inner = action
        res = self.env.step(inner)
        self.state = self._flat(res.observation)
        return StepResult(self.state, res.reward, res.terminal, res.truncated)


def torque_table(n: int) -> np.ndarray:
    """``n`` evenly spaced torques spanning the pendulum's full range."""
    if n < 2:
        raise ValueError(f"need at least 2 torque levels, got {n}")
    return np.linspace(-PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE, n)


def make_env(name: str, actions: int = 41):
    """Build a named environment ready for a discrete agent.

    ``actions`` sets the torque-table size for the pendulum and is ignored
    elsewhere.
    """
    if name == FROZENLAKE:
        return FrozenLakeEnv()
    if name == PENDULUM:
        return DiscretizedEnv(PendulumEnv(), PendulumEnv.default_grids, torque_table(actions))
    if name == ACROBOT:
        return DiscretizedEnv(AcrobotEnv(), AcrobotEnv.default_grids)
    raise ValueError(f"unknown environment {name!r}, expected one of {ENV_NAMES}")


def space_for(name: str, actions: int = 41) -> ProductSpace:
    """Index space of :func:`make_env` without keeping the instance."""
    return make_env(name, actions).spec.space
