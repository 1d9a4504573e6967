"""Command-line front door.

Subcommands: train (one config, all or one of its seeds), sweep (bandwidth
times strategy grid), plot (smoothed learning curves from CSVs), eval
(greedy rollouts from a checkpoint, optional episode trace).  Exit codes:
0 success, 2 configuration problem, 3 training divergence.  Set
EXPRELAY_LOG=quiet|info|debug to control chatter on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import harness, pursuit
from .core import ConfigError, SelectionStrategy, TrainingDiverged
from .trainer import evaluate, load_checkpoint

_LOG_LEVELS = {"quiet": 0, "info": 1, "debug": 2}


def _log_level() -> int:
    name = os.environ.get("EXPRELAY_LOG", "info").strip().lower()
    return _LOG_LEVELS.get(name, 1)


def log(message: str, level: int = 1) -> None:
    if _log_level() >= level:
        print(message, file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exprelay",
        description="Train independent Q-learners that relay their most "
                    "surprising experiences to each other.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run an experiment config")
    train.add_argument("--config", required=True, help="INI experiment config")
    train.add_argument("--out", required=True, help="output directory for CSVs")
    train.add_argument("--seed", type=int, default=None,
                       help="run only this seed from the config's list")
    train.add_argument("--save-checkpoint", action="store_true",
                       help="write a final checkpoint directory per seed")

    sweep = sub.add_parser("sweep", help="bandwidth sweep over strategies")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--betas", required=True,
                       help="comma-separated target bandwidths in [0,1]")
    sweep.add_argument("--strategies", default="quantile",
                       help="comma-separated strategy names")
    sweep.add_argument("--out", required=True)

    plot = sub.add_parser("plot", help="smoothed learning curve with std band")
    plot.add_argument("--in", dest="inputs", nargs="+", required=True,
                      help="per-seed metrics CSVs of one configuration")
    plot.add_argument("--alpha", type=float, default=0.3,
                      help="exponential smoothing weight in (0,1]")
    plot.add_argument("--column", default="team_return")
    plot.add_argument("--out", required=True, help="output image (svg)")

    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    ev.add_argument("--checkpoint", required=True, help="checkpoint directory")
    ev.add_argument("--episodes", type=int, default=20)
    ev.add_argument("--seed", type=int, default=None,
                    help="evaluation rng seed (default: checkpoint's eval stream)")
    ev.add_argument("--trace", default=None,
                    help="write one greedy episode as line-delimited JSON here")
    return parser


def _cmd_train(args) -> int:
    config = harness.load_experiment_config(args.config)
    if args.seed is not None:
        if args.seed not in config.seeds:
            raise ConfigError(f"seed {args.seed} is not in the config's seed list")
        config = replace(config, seeds=(args.seed,))
    os.makedirs(args.out, exist_ok=True)
    seed_csvs = []
    for seed in config.seeds:
        csv_path = os.path.join(args.out, f"seed{seed}.csv")
        log(f"training seed {seed} -> {csv_path}")
        trainer = harness.run_single_seed(config, seed, csv_path)
        seed_csvs.append(csv_path)
        if args.save_checkpoint:
            ckpt_dir = os.path.join(args.out, f"checkpoint_seed{seed}")
            trainer.save_checkpoint(ckpt_dir)
            log(f"checkpoint written to {ckpt_dir}")
    summary = os.path.join(args.out, "summary.csv")
    harness.write_summary_csv(seed_csvs, summary)
    log(f"summary -> {summary}")
    return 0


def _cmd_sweep(args) -> int:
    config = harness.load_experiment_config(args.config)
    try:
        betas = [float(x) for x in args.betas.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"--betas: cannot parse {args.betas!r}") from None
    strategies = [
        SelectionStrategy.from_name(name)
        for name in args.strategies.replace(",", " ").split()
    ]
    if not betas or not strategies:
        raise ConfigError("sweep needs at least one beta and one strategy")
    path = harness.sweep_bandwidth(config, betas, strategies, args.out)
    log(f"sweep table -> {path}")
    return 0


def _cmd_plot(args) -> int:
    harness.smooth_and_plot(args.inputs, args.alpha, args.out, column=args.column)
    log(f"plot -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    trainer = load_checkpoint(args.checkpoint)
    networks = [ln.online for ln in trainer.learners]
    if args.seed is not None:
        per_agent, team = evaluate(
            networks, trainer.env_config, args.episodes, np.random.default_rng(args.seed)
        )
    else:
        per_agent, team = trainer.evaluate(args.episodes)
    for i, value in enumerate(per_agent):
        print(f"agent {i} mean return: {value:.4f}")
    print(f"team mean return: {team:.4f}")
    if args.trace:
        _write_trace(trainer, args.trace, args.seed)
        log(f"trace -> {args.trace}")
    return 0


def _write_trace(trainer, path: str, seed: int | None) -> None:
    rng = np.random.default_rng(0 if seed is None else seed)
    env = pursuit.PursuitEnv(trainer.env_config, rng)
    obs = env.reset()
    networks = [ln.online for ln in trainer.learners]
    done = False
    step_index = 0
    with open(path, "w") as fh:
        while not done:
            actions = [
                int(np.argmax(networks[i].forward(obs[i][None, :])[0]))
                for i in range(trainer.agent_count)
            ]
            rewards, obs, done = env.step(actions)
            step_index += 1
            fh.write(pursuit.trace_record(step_index, env.state, actions, rewards) + "\n")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "sweep": _cmd_sweep,
        "plot": _cmd_plot,
        "eval": _cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        log(f"configuration error: {exc}", level=0)
        return 2
    except TrainingDiverged as exc:
        log(f"training diverged: {exc}", level=0)
        return 3


if __name__ == "__main__":
    sys.exit(main())
