"""Exact Q-functions for small deterministic MDPs.

Enumerates a finite environment's transition structure and solves it by
value iteration, giving an independent reference table that the learning
agents never see during training.
"""

from dataclasses import dataclass

import numpy as np

from .environments import FrozenLakeEnv


@dataclass(frozen=True)
class TabularMDP:
    """Deterministic finite MDP as dense transition/reward tables.

    Terminal states are self-absorbing with zero reward, so the tables are
    total over all (state, action) pairs.
    """

    next_state: np.ndarray
    reward: np.ndarray
    terminal: frozenset
    n_states: int
    n_actions: int

    def __post_init__(self) -> None:
        shape = (self.n_states, self.n_actions)
        if self.next_state.shape != shape or self.reward.shape != shape:
            raise ValueError(f"tables must have shape {shape}")
        for s in self.terminal:
            if not np.all(self.next_state[s] == s) or np.any(self.reward[s] != 0):
                raise ValueError(f"terminal state {s} must self-absorb with zero reward")


def enumerate_frozenlake() -> TabularMDP:
    """Build the grid-walk MDP by stepping the environment from every state."""
    env = FrozenLakeEnv()
    terminal = env.terminal_states
    nxt = np.zeros((env.n_states, env.n_actions), dtype=np.int64)
    rew = np.zeros((env.n_states, env.n_actions))
    for s in range(env.n_states):
        if s in terminal:
            nxt[s, :] = s
            continue
        for a in range(env.n_actions):
            env.reset()
            env.state = s
            result = env.step(a)
            nxt[s, a] = result.observation
            rew[s, a] = result.reward
    return TabularMDP(nxt, rew, terminal, env.n_states, env.n_actions)


def bellman_backup(mdp: TabularMDP, q: np.ndarray, gamma: float) -> np.ndarray:
    """One synchronous optimality backup of a Q-table."""
    v = q.max(axis=1)
    q_new = mdp.reward + gamma * v[mdp.next_state]
    if mdp.terminal:
        q_new[sorted(mdp.terminal), :] = 0.0
    return q_new


def q_value_iteration(
    mdp: TabularMDP, gamma: float, tol: float = 1e-10, max_iters: int = 1_000_000
) -> np.ndarray:
    """Optimal Q-table, iterated from zeros to sup-norm residual below ``tol``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    if tol <= 0:
        raise ValueError(f"tol must be > 0, got {tol}")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iters):
        q_new = bellman_backup(mdp, q, gamma)
        delta = float(np.max(np.abs(q_new - q)))
        q = q_new
        if delta < tol:
            return q
    raise RuntimeError(f"value iteration did not reach tol={tol} in {max_iters} sweeps")


def optimal_actions(q_star: np.ndarray, tol: float = 1e-9) -> list[set]:
    """Per-state set of actions within ``tol`` of the best value."""
    out = []
    for row in q_star:
        out.append({int(a) for a in np.nonzero(row >= row.max() - tol)[0]})
    return out
