"""Independent Q-learners that relay their most surprising experiences.

Modules: core (experiences, td-error, configs, wire format), pursuit (the
gridworld), network (Q-network and optimizers), replay (prioritized buffer),
sharing (selection rules and relay channel), trainer (training loop and
checkpoints), harness (experiments, CSVs, sweeps, plots), cli.
"""

from .core import (
    ConfigError,
    ContractViolation,
    EmptyBufferError,
    Experience,
    ExperienceCodec,
    MarkovGameSpec,
    SelectionConfig,
    SelectionStrategy,
    TrainerConfig,
    TrainingDiverged,
    td_error,
    td_errors_batch,
)
from .network import Adam, QNetwork, Sgd, sync_target, train_on_batch
from .pursuit import GridState, ObstacleLayout, PursuitConfig, PursuitEnv, mini_pursuit_config
from .replay import PrioritizedBuffer, SumTree
from .sharing import ExperienceSelector, RelayChannel, WindowStats
from .trainer import MultiAgentTrainer, RunMode, evaluate
from .harness import ExperimentConfig, load_experiment_config, run, sweep_bandwidth

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ConfigError",
    "ContractViolation",
    "EmptyBufferError",
    "Experience",
    "ExperienceCodec",
    "ExperienceSelector",
    "ExperimentConfig",
    "GridState",
    "MarkovGameSpec",
    "MultiAgentTrainer",
    "ObstacleLayout",
    "PrioritizedBuffer",
    "PursuitConfig",
    "PursuitEnv",
    "QNetwork",
    "RelayChannel",
    "RunMode",
    "SelectionConfig",
    "SelectionStrategy",
    "Sgd",
    "SumTree",
    "TrainerConfig",
    "TrainingDiverged",
    "WindowStats",
    "evaluate",
    "load_experiment_config",
    "mini_pursuit_config",
    "run",
    "sweep_bandwidth",
    "sync_target",
    "td_error",
    "td_errors_batch",
    "train_on_batch",
]
