"""Time the compiled kernels against the plain-numpy fallback.

Runs the same seeded workloads in two subprocesses, one per value of
``LOWRANKQ_BACKEND``, and prints a timing table.  Each child performs a
short warmup pass first so numba compilation (or cache loading) is excluded
from the measured time.

Usage:
    python benchmarks/compare_backends.py [--repeats N]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def _workloads():
    # imported lazily so the parent process never touches the package
    from lowrankq.cli import build_config

    frozenlake = dict(
        env="frozenlake",
        agent="lr_sgd",
        rank=2,
        alpha="inv:0.08,0.001",
        normalize=True,
        init_scale=0.05,
        epsilon="0.3",
        gamma=0.95,
        eval_every=500,
        seeds=(0, 1, 2),
    )
    pendulum = dict(
        env="pendulum",
        agent="lr_sgd",
        rank=3,
        alpha="0.0003",
        init_scale=5.0,
        epsilon="0.2",
        gamma=0.99,
        eval_every=100,
        seeds=(0,),
    )
    return [
        ("frozenlake lr-m2", build_config(dict(frozenlake, episodes=2000)),
         build_config(dict(frozenlake, episodes=100))),
        ("pendulum lr-m3", build_config(dict(pendulum, episodes=300)),
         build_config(dict(pendulum, episodes=10))),
    ]


def _checksum(trials) -> float:
    total = 0.0
    for t in trials:
        total += float(t.ret.sum()) + float(t.steps.sum())
    return total


def child_main(repeats: int) -> None:
    from lowrankq._accel import BACKEND
    from lowrankq.harness import run_trials

    report = {"backend": BACKEND, "workloads": {}}
    for name, cfg, warmup_cfg in _workloads():
        run_trials(warmup_cfg, warmup_cfg.seeds, threads=1)
        best = None
        checksum = None
        for _ in range(repeats):
            t0 = time.perf_counter()
            trials = run_trials(cfg, cfg.seeds, threads=1)
            elapsed = time.perf_counter() - t0
            best = elapsed if best is None else min(best, elapsed)
            checksum = _checksum(trials)
        report["workloads"][name] = {"seconds": best, "checksum": checksum}
    print(json.dumps(report))


def parent_main(repeats: int) -> int:
    results = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, LOWRANKQ_BACKEND=backend, LOWRANKQ_THREADS="1")
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--child", "--repeats", str(repeats)],
            env=env,
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            sys.stderr.write(proc.stderr)
            return proc.returncode
        results[backend] = json.loads(proc.stdout.splitlines()[-1])
        if results[backend]["backend"] != backend:
            sys.stderr.write(f"child ran backend {results[backend]['backend']}, wanted {backend}\n")
            return 1

    name_w = max(len(n) for n in results["numba"]["workloads"])
    print(f"{'workload':<{name_w}}  {'numba':>10}  {'numpy':>10}  {'speedup':>8}")
    for name in results["numba"]["workloads"]:
        fast = results["numba"]["workloads"][name]["seconds"]
        slow = results["numpy"]["workloads"][name]["seconds"]
        print(f"{name:<{name_w}}  {fast:>9.3f}s  {slow:>9.3f}s  {slow / fast:>7.1f}x")

    # FrozenLake involves no transcendental math, so the two backends must
    # produce identical trajectories, not merely close ones.
    fl = "frozenlake lr-m2"
    a = results["numba"]["workloads"][fl]["checksum"]
    b = results["numpy"]["workloads"][fl]["checksum"]
    match = "identical" if a == b else f"MISMATCH ({a!r} vs {b!r})"
    print(f"\nfrozenlake return/step checksum across backends: {match}")
    return 0 if a == b else 1


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=1, help="timed repetitions per workload; the minimum is reported")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.repeats < 1:
        ap.error("--repeats must be >= 1")
    if args.child:
        child_main(args.repeats)
        return 0
    return parent_main(args.repeats)


if __name__ == "__main__":
    sys.exit(main())
