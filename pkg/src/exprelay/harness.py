"""Experiment harness: configs, seeded runs, metrics CSVs, sweeps, plots.

A run executes one experiment config for each of its seeds and writes one
metrics CSV per seed plus a cross-seed summary.  A report is produced for
every training iteration in which at least one episode finished; its
timestep is rounded down to the report interval and reports landing in the
same interval are averaged, so rerunning a seed reproduces its CSV byte for
byte.

CSV schema (per-seed files): timestep, team_return, return_<i> per agent,
shared_<i> per agent (cumulative), actual_bandwidth, mean_abs_td, epsilon,
loss.  The summary file carries <column>_mean and <column>_std (population
std across seeds) for every data column.  Columns mean_abs_td and loss are
0.0 on rows reported before learning starts.
"""

from __future__ import annotations

import configparser
import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from . import pursuit
from .core import ConfigError, SelectionConfig, SelectionStrategy, TrainerConfig
from .trainer import MultiAgentTrainer, RunMode

REQUIRED_COLUMNS = ("timestep", "team_return", "actual_bandwidth", "mean_abs_td",
                    "epsilon", "loss")
FINAL_WINDOW_FRACTION = 0.2

_PRESETS = {
    "pursuit": pursuit.PursuitConfig,
    "mini_pursuit": pursuit.mini_pursuit_config,
}
_PRESET_INTERVALS = {"pursuit": 8000, "mini_pursuit": 1000}


@dataclass(frozen=True)
class ExperimentConfig:
    env_config: pursuit.PursuitConfig
    trainer: TrainerConfig
    mode: RunMode
    total_env_steps: int
    seeds: tuple[int, ...] = (0, 1, 2)
    report_interval_steps: int = 1000
    smoothing_alpha: float = 0.3

    def validate(self) -> None:
        self.env_config.validate()
        self.trainer.validate()
        if self.total_env_steps < 1:
            raise ConfigError("total_env_steps must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.report_interval_steps < 1:
            raise ConfigError("report_interval_steps must be >= 1")
        if not 0.0 < self.smoothing_alpha <= 1.0:
            raise ConfigError("smoothing_alpha must be in (0, 1]")


# -- config file parsing -------------------------------------------------

_EXPERIMENT_KEYS = {
    "mode": str,
    "total_env_steps": int,
    "seeds": "seeds",
    "report_interval_steps": int,
    "smoothing_alpha": float,
}
_ENVIRONMENT_KEYS = {
    "preset": str,
    "grid_width": int,
    "grid_height": int,
    "num_pursuers": int,
    "num_evaders": int,
    "n_catch": int,
    "obs_range": int,
    "catch_reward": float,
    "tag_reward": float,
    "urgency_reward": float,
    "max_cycles": int,
    "obstacle_layout": str,
}
_TRAINER_KEYS = {
    "learning_rate": float,
    "train_batch_size": int,
    "rollout_fragment_length": int,
    "target_update_freq": int,
    "buffer_capacity": int,
    "gamma": float,
    "epsilon_initial": float,
    "epsilon_final": float,
    "epsilon_decay_steps": int,
    "priority_alpha": float,
    "priority_epsilon": float,
    "is_beta_initial": float,
    "is_beta_final": float,
    "dueling": bool,
    "double_q": bool,
    "learning_starts": int,
    "relay_priority_hint": bool,
    "hidden_sizes": "int_list",
    "adam_epsilon": float,
}
_SELECTION_KEYS = {
    "strategy": str,
    "bandwidth_beta": float,
    "window_size_k": int,
    "gaussian_use_variance": bool,
    "stochastic_alpha": float,
}
_SECTIONS = {
    "experiment": _EXPERIMENT_KEYS,
    "environment": _ENVIRONMENT_KEYS,
    "trainer": _TRAINER_KEYS,
    "selection": _SELECTION_KEYS,
}


def _parse_value(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "seeds" or kind == "int_list":
            return tuple(int(part) for part in raw.replace(",", " ").split())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _read_section(parser: configparser.ConfigParser, section: str) -> dict:
    if not parser.has_section(section):
        return {}
    known = _SECTIONS[section]
    out = {}
    for key, raw in parser.items(section):
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        out[key] = _parse_value(section, key, raw, known[key])
    return out


def load_experiment_config(path: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")

    env_values = _read_section(parser, "environment")
    preset = env_values.pop("preset", "pursuit")
    if preset not in _PRESETS:
        raise ConfigError(
            f"[environment] preset: unknown {preset!r} (valid: {', '.join(_PRESETS)})"
        )
    env_config = _PRESETS[preset]()
    if "obstacle_layout" in env_values:
        try:
            env_values["obstacle_layout"] = pursuit.ObstacleLayout(env_values["obstacle_layout"])
        except ValueError:
            raise ConfigError(
                f"[environment] obstacle_layout: unknown {env_values['obstacle_layout']!r}"
            ) from None
    if env_values:
        env_config = replace(env_config, **env_values)

    selection_values = _read_section(parser, "selection")
    if "strategy" in selection_values:
        selection_values["strategy"] = SelectionStrategy.from_name(selection_values["strategy"])
    selection = SelectionConfig(**selection_values)

    trainer_values = _read_section(parser, "trainer")
    trainer = TrainerConfig(selection=selection, **trainer_values)

    exp_values = _read_section(parser, "experiment")
    mode = RunMode.from_name(exp_values.pop("mode", "independent"))
    interval = exp_values.pop("report_interval_steps", _PRESET_INTERVALS[preset])
    config = ExperimentConfig(
        env_config=env_config,
        trainer=trainer,
        mode=mode,
        report_interval_steps=interval,
        **exp_values,
    )
    config.validate()
    return config


# -- metrics rows --------------------------------------------------------


def csv_columns(agent_count: int) -> list[str]:
    cols = ["timestep", "team_return"]
    cols += [f"return_{i}" for i in range(agent_count)]
    cols += [f"shared_{i}" for i in range(agent_count)]
    cols += ["actual_bandwidth", "mean_abs_td", "epsilon", "loss"]
    return cols


def _format_value(column: str, value: float) -> str:
    if column == "timestep":
        return str(int(value))
    return repr(float(value))


def write_metrics_csv(path: str, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_value(c, row[c]) for c in columns])


def read_metrics_csv(path: str) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{path}: empty CSV")
        data: dict[str, list[float]] = {c: [] for c in reader.fieldnames}
        for record in reader:
            for c in reader.fieldnames:
                data[c].append(float(record[c]))
    return {c: np.array(v, dtype=np.float64) for c, v in data.items()}


def run_single_seed(config: ExperimentConfig, seed: int, csv_path: str) -> MultiAgentTrainer:
    """Train one seed to completion, writing its metrics CSV; the CSV is
    written even when training aborts, so a diverged run keeps its partial
    history on disk."""
    trainer_cfg = replace(config.trainer, seed=seed)
    trainer = MultiAgentTrainer(config.env_config, trainer_cfg, config.mode)
    n = trainer.agent_count
    columns = csv_columns(n)
    interval = config.report_interval_steps
    buckets: dict[int, list[list[float]]] = {}
    try:
        while trainer.env_steps < config.total_env_steps:
            metrics = trainer.train_iteration()
            if not metrics.completed_returns:
                continue
            episode_matrix = np.stack(metrics.completed_returns)
            per_agent = episode_matrix.mean(axis=0)
            team = float(episode_matrix.sum(axis=1).mean())
            sample = [team]
            sample += [float(x) for x in per_agent]
            sample += [float(x) for x in metrics.shared_counts]
            sample += [metrics.actual_bandwidth, metrics.mean_abs_td,
                       metrics.epsilon, metrics.loss]
            bucket = (metrics.env_steps // interval) * interval
            buckets.setdefault(bucket, []).append(sample)
    finally:
        rows = []
        for bucket in sorted(buckets):
            means = np.mean(np.array(buckets[bucket], dtype=np.float64), axis=0)
            row = {"timestep": bucket}
            for name, value in zip(columns[1:], means):
                row[name] = float(value)
            rows.append(row)
        write_metrics_csv(csv_path, columns, rows)
    return trainer


def write_summary_csv(seed_csvs: list[str], out_path: str) -> None:
    tables = [read_metrics_csv(p) for p in seed_csvs]
    data_columns = None
    for table in tables:
        cols = [c for c in table if c != "timestep"]
        if data_columns is None:
            data_columns = cols
        elif cols != data_columns:
            raise ConfigError("seed CSVs disagree on columns")
    timesteps = sorted({int(t) for table in tables for t in table["timestep"]})
    header = ["timestep"]
    for c in data_columns:
        header += [f"{c}_mean", f"{c}_std"]
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in timesteps:
            row = [str(t)]
            for c in data_columns:
                values = [
                    table[c][i]
                    for table in tables
                    for i in np.nonzero(table["timestep"] == t)[0]
                ]
                row.append(repr(float(np.mean(values))))
                row.append(repr(float(np.std(values))))
            writer.writerow(row)


def run(config: ExperimentConfig, out_dir: str) -> dict[str, list[str] | str]:
    """Run every seed of the experiment; returns the written paths."""
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    seed_csvs = []
    for seed in config.seeds:
        csv_path = os.path.join(out_dir, f"seed{seed}.csv")
        run_single_seed(config, seed, csv_path)
        seed_csvs.append(csv_path)
    summary_path = os.path.join(out_dir, "summary.csv")
    write_summary_csv(seed_csvs, summary_path)
    return {"seed_csvs": seed_csvs, "summary": summary_path}


def final_performance(csv_path: str, window_fraction: float = FINAL_WINDOW_FRACTION) -> float:
    """Mean team return over the trailing fraction of report rows; the
    'final performance' number used by sweeps and comparisons."""
    table = read_metrics_csv(csv_path)
    team = table["team_return"]
    if len(team) == 0:
        raise ConfigError(f"{csv_path}: no report rows")
    tail = max(1, int(np.ceil(len(team) * window_fraction)))
    return float(team[-tail:].mean())


def final_bandwidth(csv_path: str) -> float:
    table = read_metrics_csv(csv_path)
    if len(table["actual_bandwidth"]) == 0:
        raise ConfigError(f"{csv_path}: no report rows")
    return float(table["actual_bandwidth"][-1])


# -- bandwidth sweep -----------------------------------------------------


def _sweep_cell(config: ExperimentConfig, strategy: SelectionStrategy,
                beta: float) -> tuple[ExperimentConfig, str]:
    """Endpoint rule: beta 0 is the no-sharing baseline, beta 1 shares all."""
    if beta == 0.0:
        effective = SelectionStrategy.NONE
    elif beta == 1.0:
        effective = SelectionStrategy.SHARE_ALL
    else:
        effective = strategy
    selection = replace(config.trainer.selection, strategy=effective, bandwidth_beta=beta)
    cell = replace(
        config,
        mode=RunMode.RELAY,
        trainer=replace(config.trainer, selection=selection),
    )
    return cell, effective.value


def sweep_bandwidth(config: ExperimentConfig, betas: list[float],
                    strategies: list[SelectionStrategy], out_dir: str) -> str:
    for beta in betas:
        if not 0.0 <= beta <= 1.0:
            raise ConfigError(f"sweep beta {beta} outside [0, 1]")
    os.makedirs(out_dir, exist_ok=True)
    sweep_path = os.path.join(out_dir, "sweep.csv")
    with open(sweep_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "strategy", "bandwidth_beta", "effective_strategy",
            "final_team_return_mean", "final_team_return_std",
            "realized_bandwidth_mean",
        ])
        for strategy in strategies:
            for beta in betas:
                cell, effective = _sweep_cell(config, strategy, beta)
                cell_dir = os.path.join(out_dir, f"{strategy.value}_beta{beta:g}")
                result = run(cell, cell_dir)
                finals = [final_performance(p) for p in result["seed_csvs"]]
                bandwidths = [final_bandwidth(p) for p in result["seed_csvs"]]
                writer.writerow([
                    strategy.value,
                    repr(float(beta)),
                    effective,
                    repr(float(np.mean(finals))),
                    repr(float(np.std(finals))),
                    repr(float(np.mean(bandwidths))),
                ])
    return sweep_path


# -- smoothing and plots -------------------------------------------------


def exp_smooth(values: np.ndarray, alpha: float) -> np.ndarray:
    """y_0 = x_0, y_t = alpha*x_t + (1-alpha)*y_{t-1}."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigError("smoothing alpha must be in (0, 1]")
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    y = np.empty_like(x)
    y[0] = x[0]
    for t in range(1, len(x)):
        y[t] = alpha * x[t] + (1.0 - alpha) * y[t - 1]
    return y


def smooth_and_plot(csv_paths: list[str], smoothing_alpha: float, out_path: str,
                    column: str = "team_return") -> None:
    """Plot the cross-CSV mean of a smoothed column with a +-1 std band.

    The given CSVs are treated as seeds of one configuration and must share
    the schema and report timesteps.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not csv_paths:
        raise ConfigError("at least one CSV is required")
    tables = [read_metrics_csv(p) for p in csv_paths]
    for path, table in zip(csv_paths, tables):
        for required in REQUIRED_COLUMNS:
            if required not in table:
                raise ConfigError(f"{path}: missing column {required!r}")
        if column not in table:
            raise ConfigError(f"{path}: missing column {column!r}")

    common = set(int(t) for t in tables[0]["timestep"])
    for table in tables[1:]:
        common &= set(int(t) for t in table["timestep"])
    if not common:
        raise ConfigError("CSVs share no report timesteps")
    timeline = np.array(sorted(common), dtype=np.int64)

    curves = []
    for table in tables:
        index = {int(t): i for i, t in enumerate(table["timestep"])}
        aligned = np.array([table[column][index[t]] for t in timeline])
        curves.append(exp_smooth(aligned, smoothing_alpha))
    stacked = np.stack(curves)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(timeline, mean, linewidth=1.8)
    ax.fill_between(timeline, mean - std, mean + std, alpha=0.25, linewidth=0)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(column.replace("_", " "))
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format=os.path.splitext(out_path)[1].lstrip(".") or "svg")
    plt.close(fig)
