"""Command line front end: train, eval, plot, oracle.

Everything a subcommand needs is spelled out in a config file plus a few
overrides, so runs stay reproducible from the shell. WRA_LOG=debug|info|
warning|error picks the log level.
"""
import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np


def _add_common(p, config_required=True):
    p.add_argument("--config", required=config_required,
                   help="run config file (yaml)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config master seed")
    p.add_argument("--out", default=None,
                   help="override the config output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wra", description="resource-allocation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment end to end")
    _add_common(p)
    p.add_argument("--replicas", type=int, default=None,
                   help="override the config replica count")

    p = sub.add_parser("eval", help="evaluate saved checkpoints")
    _add_common(p)
    p.add_argument("--checkpoint", action="append", default=None,
                   help="checkpoint path or baseline name (random, "
                        "always_off); repeat for agent groups; defaults to "
                        "the checkpoints under the run's output directory")
    p.add_argument("--episodes", type=int, default=None,
                   help="evaluation episodes (default: config eval section)")

    p = sub.add_parser("plot", help="render figures from run artifacts")
    p.add_argument("files", nargs="*", help="input CSV artifacts")
    _add_common(p, config_required=False)
    p.add_argument("--kind", required=True,
                   choices=("rate_trace", "learning_curve", "cdf"))

    p = sub.add_parser("oracle",
                       help="run WMMSE / brute-force baselines standalone")
    p.add_argument("--solver", default="wmmse",
                   choices=("wmmse", "fp", "brute_force"))
    p.add_argument("--n-links", type=int, default=3)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--levels", type=int, default=10,
                   help="per-link grid size for brute_force")
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="per-instance CSV path")
    return parser


def _load_with_overrides(args):
    from .config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = int(args.seed)
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "replicas", None) is not None:
        cfg.replicas = int(args.replicas)
    return cfg


def _cmd_train(args) -> int:
    from .harness import run_experiment

    try:
        cfg = _load_with_overrides(args)
    except (ValueError, OSError) as e:
        print(e, file=sys.stderr)
        return 2
    return run_experiment(cfg)


def _discover_checkpoints(out_dir: Path, replicas: int):
    """Per-replica checkpoint groups as written by the harness; multi-agent
    runs store one file per agent.
    """
    groups = []
    for r in range(replicas):
        single = out_dir / f"checkpoint-r{r}.mlp"
        if single.exists():
            groups.append(str(single))
            continue
        agents = sorted(out_dir.glob(f"checkpoint-r{r}-k*.mlp"))
        if agents:
            groups.append([str(p) for p in agents])
    if not groups:
        raise FileNotFoundError(f"no checkpoints under {out_dir}")
    return groups if len(groups) > 1 else groups[0]


def _cmd_eval(args) -> int:
    from .harness import evaluate_policy

    try:
        cfg = _load_with_overrides(args)
    except (ValueError, OSError) as e:
        print(e, file=sys.stderr)
        return 2
    if args.checkpoint is None:
        checkpoints = _discover_checkpoints(Path(cfg.out), cfg.replicas)
    elif len(args.checkpoint) == 1:
        checkpoints = args.checkpoint[0]
    else:
        checkpoints = args.checkpoint
    episodes = (args.episodes if args.episodes is not None
                else int(cfg.eval.get("episodes", cfg.eval.get("slots", 200))))
    summary = evaluate_policy(checkpoints, {"kind": cfg.kind, **cfg.env},
                              episodes, seed=cfg.seed)
    print(json.dumps(summary, sort_keys=True, indent=1, default=float))
    return 0


_PLOT_SOURCES = {
    "rate_trace": "trace-r*.csv",
    "learning_curve": "training-r*.csv",
    "cdf": "delivery_times-r*.csv",
}


def _cmd_plot(args) -> int:
    from .plots import emit_plots

    files = list(args.files)
    if not files and args.config:
        from .config import load_config

        run_dir = Path(load_config(args.config).out)
        files = sorted(str(p) for p in run_dir.glob(_PLOT_SOURCES[args.kind]))
    written = emit_plots(files, args.kind, out=args.out)
    for path in written:
        print(path)
    return 0 if written else 1


def _cmd_oracle(args) -> int:
    from .learnopt import sample_rayleigh_gains
    from .optim import brute_force_power, fp_power, sum_rate, wmmse_power
    from .seeding import stream

    solve = {"wmmse": wmmse_power, "fp": fp_power,
             "brute_force": brute_force_power}[args.solver]
    rng = stream(args.seed, 0, "data")
    rows = []
    for i in range(args.samples):
        g = sample_rayleigh_gains(args.n_links, rng)
        if args.solver == "brute_force":
            pv, _ = solve(g, noise=args.noise,
                          power_grid=np.linspace(0.0, 1.0, args.levels))
        else:
            pv = solve(g, noise=args.noise).powers
        rows.append((i, sum_rate(g, pv.powers, noise=args.noise), pv.powers))
    rates = np.array([r[1] for r in rows])
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["instance", "sum_rate"]
                       + [f"p{i}" for i in range(args.n_links)])
            for i, rate, p in rows:
                w.writerow([i, f"{rate:.9g}"] + [f"{v:.9g}" for v in p])
    print(json.dumps({
        "solver": args.solver, "n_links": args.n_links,
        "samples": args.samples, "seed": args.seed,
        "mean_sum_rate": float(rates.mean()),
        "min_sum_rate": float(rates.min()),
        "max_sum_rate": float(rates.max()),
    }, sort_keys=True, indent=1))
    return 0


_COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "plot": _cmd_plot,
             "oracle": _cmd_oracle}


def main(argv=None) -> int:
    from .harness import setup_logging

    setup_logging()
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
