"""Seeded experiment harness.

A trial couples one environment instance with one agent and runs a fixed
episode budget, interleaving greedy evaluation episodes every
``eval_every`` training episodes (plus one evaluation before training).

Randomness discipline: each trial derives four named streams from its seed
(factor initialization, environment resets, exploration, evaluation resets),
and every episode gets its own counter-indexed substream.  Exploration
consumes exactly two uniforms per step, so the fused kernels can pre-draw
per-episode blocks and still replay the object-level loop draw for draw.
Evaluation draws from its own stream and never advances the training
streams, so changing the evaluation cadence cannot change what is learned.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

from . import _trainloop as tl
from .agents import (
    LR_ALS,
    AgentConfig,
    Transition,
    make_agent,
    parse_schedule,
)
from .environments import FROZENLAKE, make_env
from .factor_model import NumericalDivergenceError
from .index_space import plan as make_plan
from .mdp_oracle import enumerate_frozenlake, q_value_iteration

STREAM_INIT = 0
STREAM_ENV = 1
STREAM_EXPLORE = 2
STREAM_EVAL = 3

PHASE_TRAIN = 0
PHASE_EVAL = 1
PHASE_NAMES = ("train", "eval")

THREADS_ENV_VAR = "LOWRANKQ_THREADS"


def stream_key(seed: int, tag: int) -> np.ndarray:
    """128-bit counter-generator key for one named stream of a trial."""
    return SeedSequence([int(seed), int(tag)]).generate_state(2, np.uint64)


def episode_rng(key: np.ndarray, index: int) -> Generator:
    """Independent substream for episode ``index`` of a keyed stream.

    The index sits in the top counter word, leaving the low words free for
    in-episode draws, so substreams never overlap.
    """
    return Generator(Philox(key=key, counter=int(index) << 192))


@dataclass(frozen=True)
class EpisodeRecord:
    """One completed episode.

    ``ret`` is the undiscounted return.  ``epsilon`` is the exploration rate
    at episode start (0 for evaluation episodes).  ``sfe`` is the squared
    Frobenius error against the exact Q-table where one is available.
    """

    trial: int
    episode: int
    phase: str
    ret: float
    steps: int
    epsilon: float
    sfe: float | None


@dataclass
class TrialResult:
    """All records of one trial in column form, chronological order.

    Training episodes are numbered from 1; evaluation rows reuse the number
    of training episodes completed at that point (0 for the pre-training
    evaluation).  ``sfe`` holds NaN where no reference table exists.  If the
    trial diverged, ``failed_at_episode`` is the last training episode whose
    update completed cleanly, and later episodes are absent.
    """

    config: object
    seed: int
    episode: np.ndarray
    phase: np.ndarray
    ret: np.ndarray
    steps: np.ndarray
    epsilon: np.ndarray
    sfe: np.ndarray
    first_success: int | None
    diverged: bool
    failed_at_episode: int | None
    agent: object = None

    def records(self, trial_id: int | None = None) -> list[EpisodeRecord]:
        tid = self.seed if trial_id is None else trial_id
        out = []
        for i in range(self.episode.shape[0]):
            sfe = float(self.sfe[i])
            out.append(
                EpisodeRecord(
                    tid,
                    int(self.episode[i]),
                    PHASE_NAMES[self.phase[i]],
                    float(self.ret[i]),
                    int(self.steps[i]),
                    float(self.epsilon[i]),
                    None if math.isnan(sfe) else sfe,
                )
            )
        return out


@lru_cache(maxsize=None)
def _frozenlake_q_star(gamma: float) -> np.ndarray:
    q = q_value_iteration(enumerate_frozenlake(), gamma)
    q.flags.writeable = False
    return q


def reference_q(env_name: str, gamma: float) -> np.ndarray | None:
    """Exact Q-table for environments small enough to solve, else None."""
    if env_name == FROZENLAKE:
        return _frozenlake_q_star(gamma)
    return None


def run_episode(
    env,
    agent,
    explore: bool,
    rng: Generator,
    *,
    trial: int = 0,
    episode: int = 0,
    q_reference: np.ndarray | None = None,
) -> EpisodeRecord:
    """One episode on a freshly reset environment.

    With ``explore`` the agent picks epsilon-greedy actions from ``rng`` and
    learns from every transition; without it the agent acts greedily, draws
    nothing, and is not modified.
    """
    state = env.state
    epsilon = agent.epsilon_now if explore else 0.0
    total = 0.0
    steps = 0
    while True:
        if explore:
            action = agent.select_action(state, rng)
        else:
            action = agent.greedy_action(state)
        result = env.step(action)
        if explore:
            try:
                agent.learn(
                    Transition(
                        state, action, result.reward, result.observation,
                        result.terminal, result.truncated,
                    )
                )
            except NumericalDivergenceError as err:
                raise NumericalDivergenceError(
                    f"episode {episode}, step {steps + 1}: {err}", cell=err.cell
                ) from err
        total += result.reward
        steps += 1
        state = result.observation
        if result.terminal or result.truncated:
            break
    sfe = agent.sfe(q_reference) if q_reference is not None else None
    return EpisodeRecord(
        trial, episode, PHASE_NAMES[PHASE_TRAIN if explore else PHASE_EVAL],
        total, steps, epsilon, sfe,
    )


class _Columns:
    """Append-only record accumulator in column form."""

    def __init__(self) -> None:
        self.episode: list[int] = []
        self.phase: list[int] = []
        self.ret: list[float] = []
        self.steps: list[int] = []
        self.epsilon: list[float] = []
        self.sfe: list[float] = []

    def add(self, episode, phase, ret, steps, epsilon, sfe) -> None:
        self.episode.append(episode)
        self.phase.append(phase)
        self.ret.append(ret)
        self.steps.append(steps)
        self.epsilon.append(epsilon)
        self.sfe.append(math.nan if sfe is None else sfe)

    def extend_train(self, first_episode, rets, steps, epsilons, sfes) -> None:
        n = len(rets)
        self.episode.extend(range(first_episode, first_episode + n))
        self.phase.extend([PHASE_TRAIN] * n)
        self.ret.extend(rets.tolist())
        self.steps.extend(steps.tolist())
        self.epsilon.extend(epsilons.tolist())
        self.sfe.extend(sfes.tolist())


def _named_schedule(key: str, text: str):
    try:
        return parse_schedule(text)
    except ValueError as err:
        raise ValueError(f"{key}: {err}") from None


def agent_config_from(config) -> AgentConfig:
    """Translate an experiment description into agent hyperparameters."""
    return AgentConfig(
        variant=config.agent,
        gamma=config.gamma,
        alpha=_named_schedule("alpha", config.alpha),
        epsilon=_named_schedule("epsilon", config.epsilon),
        rank=config.rank,
        eta=config.eta,
        als_k=config.als_k,
        normalize=config.normalize,
        init_scale=config.init_scale,
    )


def run_trial(config, seed: int, *, keep_agent: bool = False) -> TrialResult:
    """Train one agent for ``config.episodes`` episodes under one seed.

    Evaluation episodes run before training and after every
    ``config.eval_every`` training episodes (and once more at the end if the
    budget is not a multiple).  A diverged update stops the trial early and
    marks the result instead of raising.
    """
    env = make_env(config.env, actions=config.actions)
    layout = make_plan(env.spec.space, config.plan)
    agent_cfg = agent_config_from(config)
    agent = make_agent(layout, agent_cfg, episode_rng(stream_key(seed, STREAM_INIT), 0))
    q_ref = reference_q(config.env, config.gamma)

    env_key = stream_key(seed, STREAM_ENV)
    explore_key = stream_key(seed, STREAM_EXPLORE)
    eval_key = stream_key(seed, STREAM_EVAL)

    ekp = tl.env_kernel_params(env)
    cols = _Columns()
    eval_ordinal = 0

    def evaluate(done: int) -> None:
        nonlocal eval_ordinal
        rng = episode_rng(eval_key, eval_ordinal)
        eval_ordinal += 1
        if agent_cfg.variant == LR_ALS:
            env.reset(rng)
            rec = run_episode(env, agent, False, rng, episode=done, q_reference=q_ref)
            cols.add(done, PHASE_EVAL, rec.ret, rec.steps, 0.0, rec.sfe)
            return
        draws = rng.random(ekp.reset_draws) if ekp.reset_draws else tl._EMPTY_F8
        use_lr, q_arr, left, right = agent._kernel_args()
        ret, steps = tl._eval_episode(
            ekp.env_id, use_lr, q_arr, left, right,
            agent._near_square, agent._n_cols, agent._d_a,
            ekp.action_table, ekp.lows, ekp.highs, ekp.bins,
            draws, ekp.max_steps,
        )
        sfe = agent.sfe(q_ref) if q_ref is not None else None
        cols.add(done, PHASE_EVAL, float(ret), int(steps), 0.0, sfe)

    diverged = False
    failed_at = None
    evaluate(0)
    done = 0
    if agent_cfg.variant == LR_ALS:
        while done < config.episodes and not diverged:
            episode = done + 1
            env.reset(episode_rng(env_key, episode))
            try:
                rec = run_episode(
                    env, agent, True, episode_rng(explore_key, episode),
                    episode=episode, q_reference=q_ref,
                )
            except NumericalDivergenceError:
                diverged = True
                failed_at = episode - 1
                break
            cols.add(episode, PHASE_TRAIN, rec.ret, rec.steps, rec.epsilon, rec.sfe)
            done = episode
            if done % config.eval_every == 0 or done == config.episodes:
                evaluate(done)
    else:
        a_kind, a0, a1, a2 = agent_cfg.alpha.kernel_params()
        e_kind, e0, e1, e2 = agent_cfg.epsilon.kernel_params()
        use_lr, q_arr, left, right = agent._kernel_args()
        q_star_arg = q_ref if q_ref is not None else tl._EMPTY_2D
        while done < config.episodes and not diverged:
            n = min(config.eval_every, config.episodes - done)
            explore_draws = np.empty((n, 2 * ekp.max_steps))
            for i in range(n):
                explore_draws[i] = episode_rng(explore_key, done + 1 + i).random(
                    2 * ekp.max_steps
                )
            reset_block = np.empty((n, ekp.reset_draws))
            if ekp.reset_draws:
                for i in range(n):
                    reset_block[i] = episode_rng(env_key, done + 1 + i).random(
                        ekp.reset_draws
                    )
            out_ret = np.empty(n)
            out_steps = np.empty(n, dtype=np.int64)
            out_eps = np.empty(n)
            out_sfe = np.full(n, np.nan)
            t_end, failed = tl._train_chunk(
                ekp.env_id, use_lr, q_arr, left, right,
                agent._near_square, agent._n_cols, agent._d_a,
                ekp.action_table, ekp.lows, ekp.highs, ekp.bins,
                agent_cfg.gamma, agent_cfg.eta, agent_cfg.normalize,
                a_kind, a0, a1, a2, e_kind, e0, e1, e2,
                agent.t, ekp.max_steps,
                explore_draws, reset_block, q_star_arg,
                out_ret, out_steps, out_eps, out_sfe,
            )
            agent.t = int(t_end)
            good = n if failed < 0 else int(failed)
            cols.extend_train(
                done + 1, out_ret[:good], out_steps[:good], out_eps[:good], out_sfe[:good]
            )
            if failed >= 0:
                diverged = True
                failed_at = done + good
                break
            done += n
            if done % config.eval_every == 0 or done == config.episodes:
                evaluate(done)

    episode_col = np.array(cols.episode, dtype=np.int64)
    phase_col = np.array(cols.phase, dtype=np.uint8)
    ret_col = np.array(cols.ret)
    success = (phase_col == PHASE_TRAIN) & (ret_col > 0.0)
    first_success = int(episode_col[success].min()) if success.any() else None
    return TrialResult(
        config=config,
        seed=seed,
        episode=episode_col,
        phase=phase_col,
        ret=ret_col,
        steps=np.array(cols.steps, dtype=np.int64),
        epsilon=np.array(cols.epsilon),
        sfe=np.array(cols.sfe),
        first_success=first_success,
        diverged=diverged,
        failed_at_episode=failed_at,
        agent=agent if keep_agent else None,
    )


def resolve_threads(n_tasks: int) -> int:
    """Worker count: machine CPUs, capped by ``LOWRANKQ_THREADS`` and tasks."""
    cap = os.environ.get(THREADS_ENV_VAR)
    workers = os.cpu_count() or 1
    if cap is not None:
        try:
            cap_val = int(cap)
        except ValueError:
            raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {cap!r}") from None
        if cap_val < 1:
            raise ValueError(f"{THREADS_ENV_VAR} must be >= 1, got {cap_val}")
        workers = min(workers, cap_val)
    return max(1, min(workers, n_tasks))


def run_trials(config, seeds, *, keep_agents: bool = False, threads: int | None = None):
    """Run one trial per seed, in seed order; thread-parallel when allowed."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    workers = resolve_threads(len(seeds)) if threads is None else max(1, threads)
    if workers <= 1:
        return [run_trial(config, s, keep_agent=keep_agents) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: run_trial(config, s, keep_agent=keep_agents), seeds))


def _phase_matrix(trials, code: int, metric: str):
    episodes = np.unique(np.concatenate([t.episode[t.phase == code] for t in trials]))
    mat = np.full((len(trials), episodes.shape[0]), np.nan)
    for k, t in enumerate(trials):
        mask = t.phase == code
        idx = np.searchsorted(episodes, t.episode[mask])
        mat[k, idx] = getattr(t, metric)[mask]
    return episodes, mat


def _quartiles(mat: np.ndarray) -> dict:
    any_value = ~np.all(np.isnan(mat), axis=0)
    out = {
        "median": np.full(mat.shape[1], np.nan),
        "q1": np.full(mat.shape[1], np.nan),
        "q3": np.full(mat.shape[1], np.nan),
    }
    if any_value.any():
        sub = mat[:, any_value]
        out["median"][any_value] = np.nanmedian(sub, axis=0)
        out["q1"][any_value] = np.nanpercentile(sub, 25, axis=0)
        out["q3"][any_value] = np.nanpercentile(sub, 75, axis=0)
    return out


def aggregate(trials) -> dict:
    """Cross-trial medians and quartiles per phase, plus success statistics.

    Diverged trials contribute only the episodes they completed; missing
    entries are ignored by the nan-aware statistics.  The median
    first-success episode treats never-succeeding trials as infinite and
    comes out None when at least half never succeed.
    """
    trials = list(trials)
    if not trials:
        raise ValueError("aggregate needs at least one trial")
    phases = {}
    for code, name in ((PHASE_TRAIN, "train"), (PHASE_EVAL, "eval")):
        if not any(np.any(t.phase == code) for t in trials):
            continue
        episodes, ret_mat = _phase_matrix(trials, code, "ret")
        _, steps_mat = _phase_matrix(trials, code, "steps")
        _, sfe_mat = _phase_matrix(trials, code, "sfe")
        metrics = {
            "return": _quartiles(ret_mat),
            "steps": _quartiles(steps_mat),
        }
        if not np.all(np.isnan(sfe_mat)):
            metrics["sfe"] = _quartiles(sfe_mat)
        phases[name] = {"episode": episodes, "metrics": metrics}
    first = np.array(
        [math.inf if t.first_success is None else t.first_success for t in trials]
    )
    first_median = float(np.median(first))
    return {
        "n_trials": len(trials),
        "phases": phases,
        "first_success_median": None if math.isinf(first_median) else first_median,
        "diverged_seeds": [t.seed for t in trials if t.diverged],
    }
