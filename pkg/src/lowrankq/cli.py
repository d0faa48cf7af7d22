"""Command line runner.

Experiments are described by a flat ``key = value`` config file (``#``
comments allowed), by command line flags overriding the file, or by a named
preset that expands to a grid of runs.  Results land in the output directory
as ``episodes.csv`` (every episode record), ``summary.json`` (config echo,
per-trial outcomes, aggregate series) and ``plot_data.csv`` (the aggregate
series alone, one row per phase/episode).
"""

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import harness
from .agents import LR_ALS, LR_SGD, TABULAR, VARIANTS, ALS_CELL_LIMIT
from .environments import ACROBOT, ENV_NAMES, FROZENLAKE, PENDULUM, space_for
from .index_space import (
    CLASSIC,
    FLAT_NEAR_SQUARE,
    PLAN_MODES,
    low_rank_parameters,
    plan,
    table_parameters,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

PRESETS = ("frozenlake-eps-sweep", "pendulum-compare", "acrobot-lr")
# With a preset, only run-shape knobs may be overridden; the arm grid is fixed.
PRESET_OVERRIDE_KEYS = ("episodes", "eval_every", "seeds", "out_dir")


class ConfigError(Exception):
    """Invalid experiment description; message names the key (and line)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved description of one experiment arm."""

    env: str
    agent: str = TABULAR
    rank: int = 2
    plan: str = CLASSIC
    gamma: float = 0.99
    alpha: str = "0.1"
    epsilon: str = "0.2"
    eta: float = 0.0
    als_k: int = 5
    normalize: bool = False
    init_scale: float = 0.1
    episodes: int = 5000
    eval_every: int = 50
    seeds: tuple = tuple(range(10))
    out_dir: str = "runs"
    actions: int = 41


_INT_KEYS = ("rank", "als_k", "episodes", "eval_every", "actions")
_FLOAT_KEYS = ("gamma", "eta", "init_scale")
_BOOL_KEYS = ("normalize",)
_STR_KEYS = ("env", "agent", "plan", "alpha", "epsilon", "out_dir")
_ALL_KEYS = tuple(f.name for f in fields(ExperimentConfig))

_EPISODE_DEFAULTS = {FROZENLAKE: 5000, PENDULUM: 30000, ACROBOT: 10000}
_EVAL_DEFAULTS = {FROZENLAKE: 50, PENDULUM: 100, ACROBOT: 250}
_GAMMA_DEFAULTS = {FROZENLAKE: 0.95, PENDULUM: 0.99, ACROBOT: 0.99}


def _default_alpha(agent: str, plan_mode: str) -> str:
    if agent == LR_SGD:
        return "0.005" if plan_mode == FLAT_NEAR_SQUARE else "0.01"
    return "0.1"


def parse_seeds(text: str, where: str = "seeds") -> tuple:
    """``"100"`` means seeds 0..99; a comma list gives explicit seeds.

    A single explicit seed needs a trailing comma (``"7,"``).
    """
    text = text.strip()
    try:
        if "," in text:
            seeds = tuple(int(p) for p in text.split(",") if p.strip())
        else:
            count = int(text)
            if count < 1:
                raise ConfigError(f"{where}: seed count must be >= 1, got {count}")
            seeds = tuple(range(count))
    except ValueError:
        raise ConfigError(f"{where}: expected a count or comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError(f"{where}: empty seed list")
    if any(s < 0 for s in seeds):
        raise ConfigError(f"{where}: seeds must be >= 0, got {seeds}")
    return seeds


def _convert(key: str, text: str, where: str):
    try:
        if key in _INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS:
            return float(text)
        if key in _BOOL_KEYS:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if key == "seeds":
            return parse_seeds(text, where=f"{where}: seeds")
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(f"{where}: bad value for {key}: {err}") from None
    return text


def _parse_file(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip()
        value = value.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        values[key] = _convert(key, value, f"line {lineno}")
    return values


def build_config(values: dict) -> ExperimentConfig:
    """Fill defaults and validate; raises :class:`ConfigError` naming the key."""
    unknown = sorted(set(values) - set(_ALL_KEYS))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    env = values.get("env")
    if env is None:
        raise ConfigError("env: required (frozenlake, pendulum or acrobot)")
    if env not in ENV_NAMES:
        raise ConfigError(f"env: unknown environment {env!r}, expected one of {ENV_NAMES}")
    agent = values.get("agent", TABULAR)
    if agent not in VARIANTS:
        raise ConfigError(f"agent: unknown variant {agent!r}, expected one of {VARIANTS}")
    plan_mode = values.get("plan", CLASSIC)
    if plan_mode not in PLAN_MODES:
        raise ConfigError(f"plan: unknown mode {plan_mode!r}, expected one of {PLAN_MODES}")

    cfg = ExperimentConfig(
        env=env,
        agent=agent,
        rank=values.get("rank", 2),
        plan=plan_mode,
        gamma=values.get("gamma", _GAMMA_DEFAULTS[env]),
        alpha=values.get("alpha", _default_alpha(agent, plan_mode)),
        epsilon=values.get("epsilon", "0.2"),
        eta=values.get("eta", 0.0),
        als_k=values.get("als_k", 5),
        normalize=values.get("normalize", False),
        init_scale=values.get("init_scale", 0.1),
        episodes=values.get("episodes", _EPISODE_DEFAULTS[env]),
        eval_every=values.get("eval_every", _EVAL_DEFAULTS[env]),
        seeds=tuple(values.get("seeds", tuple(range(10)))),
        out_dir=values.get("out_dir", "runs"),
        actions=values.get("actions", 41),
    )

    if cfg.episodes < 1:
        raise ConfigError(f"episodes: must be >= 1, got {cfg.episodes}")
    if cfg.eval_every < 1:
        raise ConfigError(f"eval_every: must be >= 1, got {cfg.eval_every}")
    if cfg.actions < 2:
        raise ConfigError(f"actions: must be >= 2, got {cfg.actions}")
    if not cfg.seeds:
        raise ConfigError("seeds: empty seed list")
    if any(int(s) < 0 for s in cfg.seeds):
        raise ConfigError(f"seeds: seeds must be >= 0, got {cfg.seeds}")
    try:
        harness.agent_config_from(cfg)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    layout = plan(space_for(cfg.env, cfg.actions), cfg.plan)
    if cfg.agent in (LR_SGD, LR_ALS):
        if cfg.rank > min(layout.n_rows, layout.n_cols):
            raise ConfigError(
                f"rank: {cfg.rank} exceeds the {layout.n_rows}x{layout.n_cols} layout"
            )
    if cfg.agent == LR_ALS and layout.total_cells > ALS_CELL_LIMIT:
        raise ConfigError(
            f"agent: lr_als is limited to {ALS_CELL_LIMIT} cells, "
            f"this layout has {layout.total_cells}"
        )
    return cfg


def parse_config(text: str | None, overrides: dict | None = None) -> ExperimentConfig:
    """Resolve a config from file text and/or flag overrides."""
    values = _parse_file(text) if text is not None else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_config(values)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Config file text that parses back to an equal config."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "seeds":
            text = ",".join(str(s) for s in value)
            if len(value) == 1:
                text += ","
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def config_as_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        out[f.name] = list(value) if f.name == "seeds" else value
    return out


# ---------------------------------------------------------------------------
# Presets.


def preset_configs(
    name: str,
    episodes: int | None = None,
    eval_every: int | None = None,
    seeds: tuple | None = None,
    out_dir: str | None = None,
) -> list[tuple[str, ExperimentConfig]]:
    """Expand a preset into its (arm name, config) grid."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    base_dir = out_dir if out_dir is not None else os.path.join("runs", name)
    arms: list[tuple[str, dict]] = []
    if name == "frozenlake-eps-sweep":
        base = {
            "env": FROZENLAKE,
            "gamma": 0.95,
            "episodes": 5000,
            "eval_every": 50,
            "seeds": tuple(range(100)),
        }
        # Stepsizes calibrated on this map so both learners converge within
        # the 5000-episode budget: the table needs a small constant rate to
        # keep late-episode noise down, while the factor pair relies on
        # normalized steps with an inverse decay to cross the small-product
        # plateau quickly and then settle.
        for eps in ("0.1", "0.2", "0.3", "0.4", "0.5"):
            arms.append(
                (
                    f"tabular-eps{eps}",
                    dict(base, agent=TABULAR, alpha="0.005", epsilon=eps),
                )
            )
            arms.append(
                (
                    f"lr-m2-eps{eps}",
                    dict(
                        base,
                        agent=LR_SGD,
                        rank=2,
                        alpha="inv:0.08,0.001",
                        normalize=True,
                        init_scale=0.05,
                        epsilon=eps,
                    ),
                )
            )
    elif name == "pendulum-compare":
        base = {
            "env": PENDULUM,
            "gamma": 0.99,
            "epsilon": "0.2",
            "episodes": 30000,
            "eval_every": 100,
            "seeds": tuple(range(10)),
        }
        # Q-values here sit around -500, so factors start at the data scale
        # (init_scale ~ sqrt(|Q|/M)) and use stepsizes small enough to stay
        # inside the bilinear stability region once the factors have grown.
        arms.append(("tabular-a5", dict(base, agent=TABULAR, actions=5)))
        arms.append(("tabular-a41", dict(base, agent=TABULAR, actions=41)))
        arms.append(
            ("lr-m3", dict(base, agent=LR_SGD, rank=3, alpha="0.0003", init_scale=5.0))
        )
        arms.append(
            (
                "lr-m5-reg",
                dict(
                    base,
                    agent=LR_SGD,
                    rank=5,
                    alpha="0.0003",
                    init_scale=5.0,
                    eta=1e-3,
                ),
            )
        )
        arms.append(
            (
                "lr-m10-near-square",
                dict(
                    base,
                    agent=LR_SGD,
                    rank=10,
                    plan=FLAT_NEAR_SQUARE,
                    alpha="0.0005",
                    init_scale=2.0,
                ),
            )
        )
    else:
        base = {
            "env": ACROBOT,
            "agent": LR_SGD,
            "rank": 2,
            "plan": FLAT_NEAR_SQUARE,
            "gamma": 0.99,
            "epsilon": "0.2",
            "episodes": 10000,
            "eval_every": 250,
            "seeds": tuple(range(10)),
        }
        # Same factor setup for both arms; only the update direction differs.
        # Unit-norm steps take a larger nominal stepsize than raw gradient
        # steps, whose scale already carries the ~1e2 target magnitude.
        arms.append(
            ("lr-m2-normalized", dict(base, normalize=True, alpha="0.02", init_scale=3.0))
        )
        arms.append(
            ("lr-m2-plain", dict(base, normalize=False, alpha="0.001", init_scale=3.0))
        )

    out = []
    for arm_name, values in arms:
        if episodes is not None:
            values["episodes"] = episodes
        if eval_every is not None:
            values["eval_every"] = eval_every
        if seeds is not None:
            values["seeds"] = seeds
        values["out_dir"] = os.path.join(base_dir, arm_name)
        out.append((arm_name, build_config(values)))
    return out


def parameter_table(arms) -> str:
    """Rows of layout sizes and free-parameter counts, one per arm."""
    header = ("arm", "agent", "layout", "matrix", "parameters")
    rows = [header]
    for arm_name, cfg in arms:
        layout = plan(space_for(cfg.env, cfg.actions), cfg.plan)
        if cfg.agent == TABULAR:
            count = table_parameters(layout)
        else:
            count = low_rank_parameters(layout, cfg.rank)
        rows.append(
            (
                arm_name,
                cfg.agent,
                cfg.plan,
                f"{layout.n_rows}x{layout.n_cols}",
                str(count),
            )
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join(
        "  ".join(col.ljust(widths[i]) for i, col in enumerate(row)).rstrip()
        for row in rows
    )


# ---------------------------------------------------------------------------
# Output files.


def _float_text(x) -> str:
    return repr(float(x))


def emit_outputs(trials, summary: dict, config: ExperimentConfig, out_dir: str) -> None:
    """Write episodes.csv, summary.json and plot_data.csv under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)

    with open(os.path.join(out_dir, "episodes.csv"), "w", newline="") as fh:
        fh.write("trial,episode,phase,return,steps,epsilon,sfe\n")
        for t in trials:
            seed = str(t.seed)
            for i in range(t.episode.shape[0]):
                sfe = t.sfe[i]
                fh.write(
                    ",".join(
                        (
                            seed,
                            str(int(t.episode[i])),
                            harness.PHASE_NAMES[t.phase[i]],
                            _float_text(t.ret[i]),
                            str(int(t.steps[i])),
                            _float_text(t.epsilon[i]),
                            "" if math.isnan(sfe) else _float_text(sfe),
                        )
                    )
                    + "\n"
                )

    doc = {
        "config": config_as_dict(config),
        "n_trials": summary["n_trials"],
        "trials": [
            {
                "seed": t.seed,
                "first_success": t.first_success,
                "diverged": t.diverged,
                "failed_at_episode": t.failed_at_episode,
            }
            for t in trials
        ],
        "first_success_median": summary["first_success_median"],
        "diverged_seeds": summary["diverged_seeds"],
        "phases": _clean_json(summary["phases"]),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(doc, fh, indent=2, allow_nan=False)
        fh.write("\n")

    with open(os.path.join(out_dir, "plot_data.csv"), "w", newline="") as fh:
        fh.write(
            "phase,episode,return_median,return_q1,return_q3,"
            "steps_median,steps_q1,steps_q3,sfe_median,sfe_q1,sfe_q3\n"
        )
        for phase_name, phase in summary["phases"].items():
            episodes = phase["episode"]
            metrics = phase["metrics"]
            for j in range(len(episodes)):
                cells = [phase_name, str(int(episodes[j]))]
                for metric in ("return", "steps", "sfe"):
                    if metric in metrics:
                        series = metrics[metric]
                        for part in ("median", "q1", "q3"):
                            v = series[part][j]
                            cells.append("" if math.isnan(v) else _float_text(v))
                    else:
                        cells.extend(("", "", ""))
                fh.write(",".join(cells) + "\n")


def _clean_json(obj):
    if isinstance(obj, dict):
        return {k: _clean_json(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [_clean_json(v) for v in obj.tolist()]
    if isinstance(obj, (list, tuple)):
        return [_clean_json(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, (np.floating, np.integer)):
        v = obj.item()
        return None if isinstance(v, float) and math.isnan(v) else v
    return obj


# ---------------------------------------------------------------------------
# Entry point.


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lowrankq",
        description="Train tabular and low-rank Q agents on the bundled benchmarks.",
    )
    p.add_argument("--preset", choices=PRESETS, help="run a bundled experiment grid")
    p.add_argument("--config", metavar="FILE", help="key = value config file")
    p.add_argument("--env", choices=ENV_NAMES)
    p.add_argument("--agent", choices=VARIANTS)
    p.add_argument("--rank", type=int, help="factorization rank M")
    p.add_argument("--plan", choices=PLAN_MODES, help="Q-matrix layout")
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", help="stepsize: number, inv:a0,c or lin:start,floor,steps")
    p.add_argument("--epsilon", help="exploration: same schedule syntax as --alpha")
    p.add_argument("--eta", type=float, help="ridge regularization strength")
    p.add_argument("--als-k", type=int, dest="als_k", help="inner ALS iterations per step")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction,
                   help="normalize the stacked SGD gradient to unit norm")
    p.add_argument("--episodes", type=int)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--seeds", help="seed count, or comma-separated seed list")
    p.add_argument("--out-dir", dest="out_dir")
    return p


_FLAG_KEYS = (
    "env", "agent", "rank", "plan", "gamma", "alpha", "epsilon", "eta",
    "als_k", "normalize", "episodes", "eval_every", "out_dir",
)


def _collect_overrides(args) -> dict:
    overrides = {}
    for key in _FLAG_KEYS:
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.seeds is not None:
        overrides["seeds"] = parse_seeds(args.seeds, where="--seeds")
    return overrides


def _run_config(cfg: ExperimentConfig) -> int:
    trials = harness.run_trials(cfg, cfg.seeds)
    summary = harness.aggregate(trials)
    emit_outputs(trials, summary, cfg, cfg.out_dir)
    n_diverged = sum(1 for t in trials if t.diverged)
    if n_diverged:
        print(
            f"warning: {n_diverged} trial(s) diverged; partial records written to "
            f"{cfg.out_dir}",
            file=sys.stderr,
        )
        return EXIT_RUNTIME
    return EXIT_OK


def _run_single(args) -> int:
    overrides = _collect_overrides(args)
    text = None
    if args.config is not None:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as err:
            raise ConfigError(f"config: cannot read {args.config!r}: {err}") from None
    cfg = parse_config(text, overrides)
    print(parameter_table([("run", cfg)]))
    return _run_config(cfg)


def _run_preset(args) -> int:
    overrides = _collect_overrides(args)
    stray = sorted(set(overrides) - set(PRESET_OVERRIDE_KEYS))
    if stray:
        raise ConfigError(
            f"preset runs only accept overrides {PRESET_OVERRIDE_KEYS}, got: "
            f"{', '.join(stray)}"
        )
    arms = preset_configs(
        args.preset,
        episodes=overrides.get("episodes"),
        eval_every=overrides.get("eval_every"),
        seeds=overrides.get("seeds"),
        out_dir=overrides.get("out_dir"),
    )
    print(parameter_table(arms))
    status = EXIT_OK
    for arm_name, cfg in arms:
        print(f"running {arm_name} ({len(cfg.seeds)} trials, {cfg.episodes} episodes)")
        code = _run_config(cfg)
        status = max(status, code)
    return status


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        harness.resolve_threads(1)
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.preset is None and args.config is None and args.env is None:
        parser.print_usage(sys.stderr)
        print("config error: need --preset, --config or --env", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.preset is not None:
            return _run_preset(args)
        return _run_single(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def console_entry() -> None:
    raise SystemExit(main())
