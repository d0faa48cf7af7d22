"""Config parsing, presets, output files and process exit codes."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from lowrankq import harness
from lowrankq.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    ConfigError,
    ExperimentConfig,
    build_config,
    config_as_dict,
    main,
    parameter_table,
    parse_config,
    parse_seeds,
    preset_configs,
    serialize_config,
)


def tiny_run_args(out_dir, **extra):
    args = [
        "--env", "frozenlake",
        "--agent", "tabular",
        "--episodes", "6",
        "--eval-every", "3",
        "--seeds", "2",
        "--out-dir", str(out_dir),
    ]
    for key, value in extra.items():
        args.extend([f"--{key.replace('_', '-')}", str(value)])
    return args


# ---------------------------------------------------------------------------
# parsing


def test_parse_serialize_round_trip():
    cfg = build_config(
        {
            "env": "frozenlake",
            "agent": "lr_sgd",
            "rank": 2,
            "alpha": "inv:0.08,0.001",
            "epsilon": "0.3",
            "normalize": True,
            "init_scale": 0.05,
            "seeds": (0, 3, 7),
        }
    )
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    # and the text itself is stable under another round
    assert serialize_config(again) == text


def test_single_seed_serializes_with_trailing_comma():
    cfg = build_config({"env": "frozenlake", "seeds": (5,)})
    text = serialize_config(cfg)
    assert "seeds = 5," in text
    assert parse_config(text).seeds == (5,)


def test_empty_file_plus_env_flag_gives_documented_defaults():
    cfg = parse_config("", {"env": "frozenlake"})
    assert cfg == ExperimentConfig(
        env="frozenlake",
        agent="tabular",
        rank=2,
        plan="classic",
        gamma=0.95,
        alpha="0.1",
        epsilon="0.2",
        eta=0.0,
        als_k=5,
        normalize=False,
        init_scale=0.1,
        episodes=5000,
        eval_every=50,
        seeds=tuple(range(10)),
        out_dir="runs",
        actions=41,
    )


def test_per_env_budget_defaults():
    assert parse_config("env = pendulum\n").episodes == 30000
    assert parse_config("env = pendulum\n").eval_every == 100
    assert parse_config("env = acrobot\n").episodes == 10000
    assert parse_config("env = acrobot\n").gamma == 0.99
    lr = parse_config("env = frozenlake\nagent = lr_sgd\n")
    assert lr.alpha == "0.01"
    near = parse_config("env = frozenlake\nagent = lr_sgd\nplan = flat_near_square\n")
    assert near.alpha == "0.005"


def test_comments_and_blank_lines_are_ignored():
    cfg = parse_config(
        """
        # experiment description
        env = frozenlake

        episodes = 12  # small smoke budget
        """
    )
    assert cfg.episodes == 12


def test_flag_overrides_beat_file_values():
    cfg = parse_config("env = frozenlake\nepisodes = 10\n", {"episodes": 4})
    assert cfg.episodes == 4


def test_errors_name_the_key_and_line():
    with pytest.raises(ConfigError, match="gamma"):
        parse_config("env = frozenlake\ngamma = 1.5\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("env = frozenlake\nwibble = 3\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("env frozenlake\n")
    with pytest.raises(ConfigError, match="episodes"):
        parse_config("env = frozenlake\nepisodes = 0\n")
    with pytest.raises(ConfigError, match="normalize"):
        parse_config("env = frozenlake\nnormalize = maybe\n")
    with pytest.raises(ConfigError, match="env"):
        parse_config("agent = tabular\n")
    with pytest.raises(ConfigError, match="rank"):
        parse_config("env = frozenlake\nagent = lr_sgd\nrank = 5\n")  # 16x4 layout
    with pytest.raises(ConfigError, match="lr_als"):
        parse_config("env = pendulum\nagent = lr_als\n")  # dense refits too large
    with pytest.raises(ConfigError, match="alpha"):
        parse_config("env = frozenlake\nalpha = exp:1,2\n")


def test_parse_seeds_forms():
    assert parse_seeds("100") == tuple(range(100))
    assert parse_seeds("3,") == (3,)
    assert parse_seeds("1,2,9") == (1, 2, 9)
    assert parse_seeds(" 0 , 5 ") == (0, 5)
    for bad in ("", "x", "-1", "1,-2", "0"):
        with pytest.raises(ConfigError):
            parse_seeds(bad)


def test_config_as_dict_lists_seeds():
    cfg = build_config({"env": "frozenlake", "seeds": (1, 2)})
    d = config_as_dict(cfg)
    assert d["seeds"] == [1, 2]
    assert d["init_scale"] == 0.1


# ---------------------------------------------------------------------------
# presets


def test_preset_grids_have_the_documented_arms():
    fl = preset_configs("frozenlake-eps-sweep")
    assert [name for name, _ in fl] == [
        f"{kind}-eps{eps}"
        for eps in ("0.1", "0.2", "0.3", "0.4", "0.5")
        for kind in ("tabular", "lr-m2")
    ]
    assert all(cfg.seeds == tuple(range(100)) for _, cfg in fl)
    pend = dict(preset_configs("pendulum-compare"))
    assert set(pend) == {"tabular-a5", "tabular-a41", "lr-m3", "lr-m5-reg", "lr-m10-near-square"}
    assert pend["tabular-a5"].actions == 5
    assert pend["lr-m10-near-square"].plan == "flat_near_square"
    assert pend["lr-m5-reg"].eta == 1e-3
    acro = dict(preset_configs("acrobot-lr"))
    assert acro["lr-m2-normalized"].normalize is True
    assert acro["lr-m2-plain"].normalize is False
    with pytest.raises(ConfigError, match="frozenlake-eps-sweep"):
        preset_configs("nope")


def test_preset_run_shape_overrides():
    arms = preset_configs("pendulum-compare", episodes=100, eval_every=50, seeds=(0,), out_dir="x")
    for name, cfg in arms:
        assert cfg.episodes == 100
        assert cfg.eval_every == 50
        assert cfg.seeds == (0,)
        assert cfg.out_dir == os.path.join("x", name)


def test_parameter_table_counts():
    table = parameter_table(preset_configs("pendulum-compare"))
    for expected in ("10605", "86961", "6486", "10810", "5900", "295x295", "2121x41"):
        assert expected in table
    fl = parameter_table(preset_configs("frozenlake-eps-sweep"))
    assert "64" in fl and "40" in fl and "16x4" in fl
    acro = parameter_table(preset_configs("acrobot-lr"))
    assert "18014" in acro and "4504x4503" in acro


def test_preset_rejects_arm_level_flag_overrides(capsys):
    code = main(["--preset", "acrobot-lr", "--alpha", "0.1"])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "alpha" in err


# ---------------------------------------------------------------------------
# end-to-end runs and output files


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_successful_run_writes_all_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(tiny_run_args(out)) == EXIT_OK
    stdout = capsys.readouterr().out
    assert "16x4" in stdout and "64" in stdout  # parameter table echoed
    for name in ("episodes.csv", "summary.json", "plot_data.csv"):
        assert (out / name).exists()


def test_runs_are_byte_identical(tmp_path):
    # identical invocations (out_dir included, since the config is echoed
    # into summary.json) must reproduce every output byte
    out = tmp_path / "run"
    assert main(tiny_run_args(out)) == EXIT_OK
    first = {name: read(out / name) for name in ("episodes.csv", "summary.json", "plot_data.csv")}
    assert main(tiny_run_args(out)) == EXIT_OK
    for name, data in first.items():
        assert read(out / name) == data, name


def test_episodes_csv_round_trips_trial_columns(tmp_path):
    out = tmp_path / "run"
    assert main(tiny_run_args(out)) == EXIT_OK
    cfg = build_config(
        {"env": "frozenlake", "agent": "tabular", "episodes": 6, "eval_every": 3, "seeds": (0, 1)}
    )
    trials = {s: harness.run_trial(cfg, s) for s in (0, 1)}

    lines = (out / "episodes.csv").read_text().splitlines()
    assert lines[0] == "trial,episode,phase,return,steps,epsilon,sfe"
    seen = {0: 0, 1: 0}
    for line in lines[1:]:
        trial, episode, phase, ret, steps, epsilon, sfe = line.split(",")
        t = trials[int(trial)]
        i = seen[int(trial)]
        assert int(episode) == t.episode[i]
        assert phase == harness.PHASE_NAMES[t.phase[i]]
        assert float(ret) == t.ret[i]  # repr round-trip is exact
        assert int(steps) == t.steps[i]
        assert float(epsilon) == t.epsilon[i]
        if sfe:
            assert float(sfe) == t.sfe[i]
        else:
            assert np.isnan(t.sfe[i])
        seen[int(trial)] += 1
    assert seen == {0: trials[0].episode.shape[0], 1: trials[1].episode.shape[0]}


def test_summary_json_schema(tmp_path):
    out = tmp_path / "run"
    assert main(tiny_run_args(out)) == EXIT_OK
    doc = json.loads((out / "summary.json").read_text())
    assert set(doc) == {
        "config", "n_trials", "trials", "first_success_median", "diverged_seeds", "phases",
    }
    assert doc["config"]["env"] == "frozenlake"
    assert doc["config"]["episodes"] == 6
    assert doc["config"]["seeds"] == [0, 1]
    assert doc["config"]["init_scale"] == 0.1
    assert doc["n_trials"] == 2
    assert [t["seed"] for t in doc["trials"]] == [0, 1]
    assert set(doc["trials"][0]) == {"seed", "first_success", "diverged", "failed_at_episode"}
    assert set(doc["phases"]) == {"train", "eval"}
    ev = doc["phases"]["eval"]
    assert ev["episode"] == [0, 3, 6]
    assert set(ev["metrics"]) == {"return", "steps", "sfe"}
    assert len(ev["metrics"]["return"]["median"]) == 3


def test_plot_data_matches_summary(tmp_path):
    out = tmp_path / "run"
    assert main(tiny_run_args(out)) == EXIT_OK
    doc = json.loads((out / "summary.json").read_text())
    lines = (out / "plot_data.csv").read_text().splitlines()
    assert lines[0] == (
        "phase,episode,return_median,return_q1,return_q3,"
        "steps_median,steps_q1,steps_q3,sfe_median,sfe_q1,sfe_q3"
    )
    rows = [line.split(",") for line in lines[1:]]
    eval_rows = [r for r in rows if r[0] == "eval"]
    assert [int(r[1]) for r in eval_rows] == doc["phases"]["eval"]["episode"]
    medians = [float(r[2]) for r in eval_rows]
    assert medians == doc["phases"]["eval"]["metrics"]["return"]["median"]


def test_cli_exit_codes(tmp_path, capsys):
    # no experiment description
    assert main([]) == EXIT_CONFIG
    assert "need --preset, --config or --env" in capsys.readouterr().err
    # bad config file
    bad = tmp_path / "bad.cfg"
    bad.write_text("env = frozenlake\ngamma = 1.5\n")
    assert main(["--config", str(bad)]) == EXIT_CONFIG
    assert "gamma" in capsys.readouterr().err
    # unreadable config path
    assert main(["--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    capsys.readouterr()
    # unknown flag value
    assert main(["--env", "mars"]) == EXIT_CONFIG
    capsys.readouterr()


def test_divergent_run_exits_two_with_partial_records(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(
        [
            "--env", "frozenlake",
            "--agent", "lr_sgd",
            "--alpha", "1.0",
            "--epsilon", "0.3",
            "--episodes", "2000",
            "--seeds", "0,",
            "--out-dir", str(out),
        ]
    )
    assert code == EXIT_RUNTIME
    assert "diverged" in capsys.readouterr().err
    doc = json.loads((out / "summary.json").read_text())
    assert doc["diverged_seeds"] == [0]
    assert doc["trials"][0]["failed_at_episode"] is not None


def test_unwritable_out_dir_exits_two(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("a file, not a directory\n")
    code = main(tiny_run_args(blocker / "nested"))
    assert code == EXIT_RUNTIME
    assert "io error" in capsys.readouterr().err


def test_config_file_run_with_flag_override(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text(
        "env = frozenlake\nagent = tabular\nepisodes = 50\neval_every = 25\nseeds = 1,\n"
    )
    out = tmp_path / "out"
    code = main(["--config", str(cfg_file), "--episodes", "4", "--out-dir", str(out)])
    assert code == EXIT_OK
    doc = json.loads((out / "summary.json").read_text())
    assert doc["config"]["episodes"] == 4
    assert doc["config"]["eval_every"] == 25


# ---------------------------------------------------------------------------
# backend flag


@pytest.mark.slow
def test_numpy_backend_reproduces_numba_outputs(tmp_path):
    """Both kernel backends must produce byte-identical result files."""
    outs = {}
    for backend in ("numba", "numpy"):
        cwd = tmp_path / backend
        cwd.mkdir()
        env = dict(os.environ, LOWRANKQ_BACKEND=backend, LOWRANKQ_THREADS="1")
        proc = subprocess.run(
            [
                sys.executable, "-m", "lowrankq",
                "--env", "frozenlake",
                "--agent", "lr_sgd",
                "--alpha", "inv:0.08,0.001",
                "--normalize",
                "--epsilon", "0.3",
                "--episodes", "40",
                "--eval-every", "20",
                "--seeds", "2",
                "--out-dir", "out",  # relative, so the config echo matches
            ],
            cwd=cwd,
            env=env,
            capture_output=True,
            text=True,
            timeout=600,
        )
        assert proc.returncode == EXIT_OK, proc.stderr
        outs[backend] = cwd / "out"
    for name in ("episodes.csv", "summary.json", "plot_data.csv"):
        assert read(outs["numba"] / name) == read(outs["numpy"] / name), name
