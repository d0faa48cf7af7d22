"""Fused per-step training and evaluation loops.

The experiment harness runs millions of environment steps, so the inner
episode loop for tabular and online low-rank agents is a single kernel that
interleaves environment dynamics, action selection, and the value update
without returning to Python.  Random draws are precomputed per episode from
counter-based substreams, which makes these loops produce exactly the
records the plain object-level loop in :mod:`lowrankq.harness` produces.

Alternating least-squares agents rebuild a dense target matrix every step
and stay on the object-level path.
"""

from dataclasses import dataclass

import numpy as np

from ._accel import jit_kernel
from .factor_model import _predict_cell, _sgd_step
from .index_space import _discretize_flat
from .environments import (
    FL_NEXT,
    FL_REWARD,
    FL_TERMINAL,
    AcrobotEnv,
    DiscretizedEnv,
    FrozenLakeEnv,
    PendulumEnv,
    _PI,
    _acrobot_fill_obs,
    _acrobot_step,
    _pendulum_step,
)

ENV_FROZENLAKE = 0
ENV_PENDULUM = 1
ENV_ACROBOT = 2

SCHED_CONST = 0
SCHED_INV = 1
SCHED_LIN = 2

_EMPTY_F8 = np.empty(0)
_EMPTY_I8 = np.empty(0, dtype=np.int64)
_EMPTY_2D = np.empty((0, 0))


@jit_kernel
def _schedule_value(kind, p0, p1, p2, t):
    if kind == SCHED_CONST:
        return p0
    if kind == SCHED_INV:
        return p0 / (1.0 + p1 * t)
    frac = t / p2
    if frac > 1.0:
        frac = 1.0
    return p0 + (p1 - p0) * frac


@jit_kernel
def _cell_rowcol(near_square, n_cols, d_a, state, action):
    if near_square:
        flat = state * d_a + action
        return flat // n_cols, flat % n_cols
    return state, action


@jit_kernel
def _action_values(use_lr, q, left, right, near_square, n_cols, d_a, state, out):
    for a in range(d_a):
        row, col = _cell_rowcol(near_square, n_cols, d_a, state, a)
        if use_lr:
            out[a] = _predict_cell(left, right, row, col)
        else:
            out[a] = q[row, col]


@jit_kernel
def _argmax_first(values, n):
    best = 0
    best_value = values[0]
    for i in range(1, n):
        if values[i] > best_value:
            best_value = values[i]
            best = i
    return best


@jit_kernel
def _max_value(values, n):
    best_value = values[0]
    for i in range(1, n):
        if values[i] > best_value:
            best_value = values[i]
    return best_value


@jit_kernel
def _sq_error_vs_table(use_lr, q, left, right, near_square, n_cols, d_a, qstar):
    """Sum of squared errors against a reference table over the logical domain."""
    acc = 0.0
    for s in range(qstar.shape[0]):
        for a in range(d_a):
            row, col = _cell_rowcol(near_square, n_cols, d_a, s, a)
            if use_lr:
                v = _predict_cell(left, right, row, col)
            else:
                v = q[row, col]
            diff = v - qstar[s, a]
            acc += diff * diff
    return acc


@jit_kernel
def _reset_state(env_id, draws, est, obs, lows, highs, bins):
    if env_id == ENV_FROZENLAKE:
        return 0
    if env_id == ENV_PENDULUM:
        est[0] = -_PI + 2.0 * _PI * draws[0]
        est[1] = -1.0 + 2.0 * draws[1]
        obs[0] = est[0]
        obs[1] = est[1]
        return _discretize_flat(obs[:2], lows, highs, bins)
    est[0] = -0.1 + 0.2 * draws[0]
    est[1] = -0.1 + 0.2 * draws[1]
    est[2] = -0.1 + 0.2 * draws[2]
    est[3] = -0.1 + 0.2 * draws[3]
    _acrobot_fill_obs(est, obs)
    return _discretize_flat(obs, lows, highs, bins)


@jit_kernel
def _step_state(env_id, est, obs, state, action, action_table, lows, highs, bins):
    if env_id == ENV_FROZENLAKE:
        s2 = FL_NEXT[state, action]
        return s2, FL_REWARD[state, action], FL_TERMINAL[s2]
    if env_id == ENV_PENDULUM:
        theta, theta_dot, reward = _pendulum_step(est[0], est[1], action_table[action])
        est[0] = theta
        est[1] = theta_dot
        obs[0] = theta
        obs[1] = theta_dot
        return _discretize_flat(obs[:2], lows, highs, bins), reward, False
    th1, th2, w1, w2, terminal = _acrobot_step(
        est[0], est[1], est[2], est[3], action - 1.0
    )
    est[0] = th1
    est[1] = th2
    est[2] = w1
    est[3] = w2
    _acrobot_fill_obs(est, obs)
    reward = 0.0 if terminal else -1.0
    return _discretize_flat(obs, lows, highs, bins), reward, terminal


@jit_kernel
def _train_chunk(
    env_id,
    use_lr,
    q,
    left,
    right,
    near_square,
    n_cols,
    d_a,
    action_table,
    lows,
    highs,
    bins,
    gamma,
    eta,
    normalize,
    a_kind,
    a0,
    a1,
    a2,
    e_kind,
    e0,
    e1,
    e2,
    t_start,
    max_steps,
    explore_draws,
    reset_draws,
    qstar,
    out_return,
    out_steps,
    out_epsilon,
    out_sfe,
):
    """Train for ``out_return.shape[0]`` episodes, mutating the value model.

    Returns ``(t_end, failed)`` where ``failed`` is the chunk-relative index
    of the episode whose update diverged, or -1 if all episodes completed.
    Outputs at and past a failed index are untouched.
    """
    est = np.zeros(4)
    obs = np.zeros(6)
    vals = np.empty(d_a)
    want_sfe = qstar.shape[0] > 0
    t = t_start
    n_episodes = out_return.shape[0]
    for e in range(n_episodes):
        s = _reset_state(env_id, reset_draws[e], est, obs, lows, highs, bins)
        out_epsilon[e] = _schedule_value(e_kind, e0, e1, e2, t)
        ep_return = 0.0
        steps = 0
        for st in range(max_steps):
            eps_t = _schedule_value(e_kind, e0, e1, e2, t)
            u = explore_draws[e, 2 * st]
            ua = explore_draws[e, 2 * st + 1]
            if u < eps_t:
                a = int(ua * d_a)
                if a >= d_a:
                    a = d_a - 1
            else:
                _action_values(use_lr, q, left, right, near_square, n_cols, d_a, s, vals)
                a = _argmax_first(vals, d_a)
            s2, r, terminal = _step_state(
                env_id, est, obs, s, a, action_table, lows, highs, bins
            )
            target = r
            if not terminal:
                _action_values(use_lr, q, left, right, near_square, n_cols, d_a, s2, vals)
                target = r + gamma * _max_value(vals, d_a)
            row, col = _cell_rowcol(near_square, n_cols, d_a, s, a)
            alpha_t = _schedule_value(a_kind, a0, a1, a2, t)
            if use_lr:
                if _sgd_step(left, right, row, col, target, alpha_t, eta, normalize) != 0:
                    return t, e
            else:
                q[row, col] = q[row, col] + alpha_t * (target - q[row, col])
            t += 1
            ep_return += r
            steps = st + 1
            s = s2
            if terminal:
                break
        out_return[e] = ep_return
        out_steps[e] = steps
        if want_sfe:
            out_sfe[e] = _sq_error_vs_table(
                use_lr, q, left, right, near_square, n_cols, d_a, qstar
            )
    return t, -1


@jit_kernel
def _eval_episode(
    env_id,
    use_lr,
    q,
    left,
    right,
    near_square,
    n_cols,
    d_a,
    action_table,
    lows,
    highs,
    bins,
    reset_draws,
    max_steps,
):
    """One greedy episode; reads the value model, never writes it."""
    est = np.zeros(4)
    obs = np.zeros(6)
    vals = np.empty(d_a)
    s = _reset_state(env_id, reset_draws, est, obs, lows, highs, bins)
    ep_return = 0.0
    steps = 0
    for st in range(max_steps):
        _action_values(use_lr, q, left, right, near_square, n_cols, d_a, s, vals)
        a = _argmax_first(vals, d_a)
        s2, r, terminal = _step_state(
            env_id, est, obs, s, a, action_table, lows, highs, bins
        )
        ep_return += r
        steps = st + 1
        s = s2
        if terminal:
            break
    return ep_return, steps


@dataclass(frozen=True)
class EnvKernelParams:
    """Arguments describing one environment to the fused kernels."""

    env_id: int
    action_table: np.ndarray
    lows: np.ndarray
    highs: np.ndarray
    bins: np.ndarray
    max_steps: int
    reset_draws: int


def env_kernel_params(env) -> EnvKernelParams:
    if isinstance(env, FrozenLakeEnv):
        return EnvKernelParams(
            ENV_FROZENLAKE, _EMPTY_F8, _EMPTY_F8, _EMPTY_F8, _EMPTY_I8,
            env.max_steps, env.reset_draws,
        )
    if isinstance(env, DiscretizedEnv):
        inner = env.env
        if isinstance(inner, PendulumEnv):
            if env.action_values is None:
                raise TypeError("pendulum wrapper is missing its torque table")
            return EnvKernelParams(
                ENV_PENDULUM, env.action_values, env.lows, env.highs, env.bins,
                env.max_steps, env.reset_draws,
            )
        if isinstance(inner, AcrobotEnv):
            return EnvKernelParams(
                ENV_ACROBOT, _EMPTY_F8, env.lows, env.highs, env.bins,
                env.max_steps, env.reset_draws,
            )
    raise TypeError(f"no fused kernel for environment {type(env).__name__}")
