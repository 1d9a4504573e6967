"""Shared domain vocabulary: experiences, game metadata, td-error, configs.

Everything here is an immutable value object that is safe to copy between
threads; the operations are pure functions of their inputs.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence, TypeAlias

import numpy as np

TdError: TypeAlias = float  # absolute one-step td-error, always >= 0


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class ConfigError(ValueError):
    """A configuration value or file is invalid."""


class TrainingDiverged(RuntimeError):
    """A gradient step produced non-finite values."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class EmptyBufferError(RuntimeError):
    """Sampling was requested from an empty replay buffer."""


@dataclass(frozen=True, eq=False)
class Experience:
    """One transition of one agent: the unit stored, prioritized and relayed.

    ``obs`` and ``next_obs`` are flattened float32 vectors of the dimension
    the environment declares.  ``td_at_share`` is set by the sender at share
    time and is ``None`` for experiences that never crossed the channel.
    """

    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool
    origin_agent: int
    td_at_share: float | None = None

    def validate(self, observation_dim: int, action_count: int) -> None:
        if self.obs.shape != (observation_dim,) or self.next_obs.shape != (observation_dim,):
            raise ContractViolation(
                f"experience obs dims {self.obs.shape}/{self.next_obs.shape} "
                f"!= declared ({observation_dim},)"
            )
        if not 0 <= self.action < action_count:
            raise ContractViolation(f"action {self.action} outside [0, {action_count})")
        if self.td_at_share is not None and self.td_at_share < 0:
            raise ContractViolation("td_at_share must be >= 0")


@dataclass(frozen=True)
class MarkovGameSpec:
    """Static facts about an anonymous Markov game.

    All agents share one observation dimension and one action set, which is
    what makes experiences portable between them in the first place.
    """

    agent_count: int
    observation_dim: int
    action_count: int
    max_episode_steps: int
    gamma: float

    def __post_init__(self):
        for name in ("agent_count", "observation_dim", "action_count", "max_episode_steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")


class SelectionStrategy(enum.Enum):
    """How an agent decides which of its experiences to broadcast."""

    NONE = "none"
    QUANTILE = "quantile"
    GAUSSIAN = "gaussian"
    STOCHASTIC = "stochastic"
    SHARE_ALL = "share_all"
    UNIFORM_RANDOM = "uniform_random"

    @classmethod
    def from_name(cls, name: str) -> "SelectionStrategy":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ConfigError(f"unknown selection strategy {name!r} (valid: {valid})") from None


@dataclass(frozen=True)
class SelectionConfig:
    """Parameters of the experience-selection step.

    ``bandwidth_beta`` is the target fraction of experiences to share;
    ``window_size_k`` is the sliding window the selection statistics are
    computed over.
    """

    strategy: SelectionStrategy = SelectionStrategy.NONE
    bandwidth_beta: float = 0.1
    window_size_k: int = 1500
    gaussian_use_variance: bool = True
    stochastic_alpha: float = 0.6

    def validate(self) -> None:
        if not 0.0 <= self.bandwidth_beta <= 1.0:
            raise ConfigError("bandwidth_beta must be in [0, 1]")
        if self.window_size_k < 1:
            raise ConfigError("window_size_k must be >= 1")
        if self.stochastic_alpha < 0:
            raise ConfigError("stochastic_alpha must be >= 0")


@dataclass(frozen=True)
class TrainerConfig:
    """All hyperparameters of one Q-learner.

    Note the two unrelated alphas: ``learning_rate`` is the gradient step
    size, ``priority_alpha`` is the replay-priority exponent.
    """

    learning_rate: float = 0.00016
    train_batch_size: int = 32
    rollout_fragment_length: int = 4
    target_update_freq: int = 1000
    buffer_capacity: int = 120_000
    gamma: float = 0.99
    epsilon_initial: float = 0.1
    epsilon_final: float = 0.001
    epsilon_decay_steps: int = 100_000
    priority_alpha: float = 0.6
    priority_epsilon: float = 1e-6
    is_beta_initial: float = 0.4
    is_beta_final: float = 1.0
    dueling: bool = True
    double_q: bool = True
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    seed: int = 0
    # exposure knobs promised by the module design notes
    learning_starts: int = 1000
    relay_priority_hint: bool = True
    hidden_sizes: tuple[int, ...] = (128, 128)
    adam_epsilon: float = 0.00015

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.train_batch_size < 1:
            raise ConfigError("train_batch_size must be >= 1")
        if self.train_batch_size > self.buffer_capacity:
            raise ConfigError("train_batch_size must not exceed buffer_capacity")
        if self.rollout_fragment_length < 1:
            raise ConfigError("rollout_fragment_length must be >= 1")
        if self.target_update_freq < 1:
            raise ConfigError("target_update_freq must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if self.epsilon_final > self.epsilon_initial:
            raise ConfigError("epsilon_final must be <= epsilon_initial")
        if self.epsilon_decay_steps < 1:
            raise ConfigError("epsilon_decay_steps must be >= 1")
        if self.priority_alpha < 0:
            raise ConfigError("priority_alpha must be >= 0")
        if self.priority_epsilon <= 0:
            raise ConfigError("priority_epsilon must be > 0")
        for name in ("is_beta_initial", "is_beta_final"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.learning_starts < 0:
            raise ConfigError("learning_starts must be >= 0")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden_sizes must be positive")
        self.selection.validate()


def td_errors_batch(
    obs: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    next_obs: np.ndarray,
    dones: np.ndarray,
    q_online,
    q_target,
    gamma: float,
    double_q: bool,
) -> np.ndarray:
    """Absolute one-step td-errors for a batch of transitions.

    The bootstrap value is ``max_a q_target(next)`` for plain targets, or
    ``q_target(next)[argmax_a q_online(next)]`` for double-Q.  Terminal
    transitions drop the bootstrap term entirely.
    """
    q_now = q_online.forward(obs)
    q_sa = q_now[np.arange(len(actions)), actions]
    q_next_target = q_target.forward(next_obs)
    if double_q:
        greedy = np.argmax(q_online.forward(next_obs), axis=1)
        bootstrap = q_next_target[np.arange(len(greedy)), greedy]
    else:
        bootstrap = q_next_target.max(axis=1)
    target = rewards + gamma * bootstrap * (1.0 - dones.astype(bootstrap.dtype))
    return np.abs(target - q_sa)


def td_error(exp: Experience, q_online, q_target, gamma: float, double_q: bool) -> TdError:
    """Absolute td-error of a single experience under the given networks."""
    if exp.obs.shape[-1] != q_online.observation_dim:
        raise ContractViolation(
            f"obs dim {exp.obs.shape[-1]} != network input {q_online.observation_dim}"
        )
    out = td_errors_batch(
        exp.obs[None, :],
        np.array([exp.action]),
        np.array([exp.reward]),
        exp.next_obs[None, :],
        np.array([exp.done]),
        q_online,
        q_target,
        gamma,
        double_q,
    )
    return float(out[0])


# ---------------------------------------------------------------------------
# Binary experience records
#
# Fixed-order record, used verbatim by the relay channel and by trajectory
# dump files.  Streams start with a header that declares the observation
# dimension; individual records have no per-record framing.
# ---------------------------------------------------------------------------

STREAM_MAGIC = b"XREL"
STREAM_VERSION = 1
_HEADER = struct.Struct("<4sHI")  # magic, version, observation_dim


class ExperienceCodec:
    """Encode/decode experiences as fixed-size binary records.

    Layout per record (little-endian):
    obs float32[D], action int32, reward float64, next_obs float32[D],
    done uint8, origin_agent int32, has_td uint8, td_at_share float64.
    """

    def __init__(self, observation_dim: int):
        if observation_dim <= 0:
            raise ConfigError("observation_dim must be positive")
        self.observation_dim = observation_dim
        self._tail = struct.Struct("<idBiBd")  # action, reward, done, origin, has_td, td
        self.record_size = 2 * 4 * observation_dim + self._tail.size

    def encode(self, exp: Experience) -> bytes:
        obs = np.ascontiguousarray(exp.obs, dtype=np.float32)
        nxt = np.ascontiguousarray(exp.next_obs, dtype=np.float32)
        if obs.size != self.observation_dim or nxt.size != self.observation_dim:
            raise ContractViolation("experience does not match codec observation_dim")
        has_td = exp.td_at_share is not None
        tail = self._tail.pack(
            exp.action,
            exp.reward,
            1 if exp.done else 0,
            exp.origin_agent,
            1 if has_td else 0,
            exp.td_at_share if has_td else 0.0,
        )
        return obs.tobytes() + nxt.tobytes() + tail

    def decode(self, buf: bytes) -> Experience:
        if len(buf) != self.record_size:
            raise ContractViolation(
                f"record has {len(buf)} bytes, codec expects {self.record_size}"
            )
        d = self.observation_dim
        obs = np.frombuffer(buf, dtype=np.float32, count=d).copy()
        nxt = np.frombuffer(buf, dtype=np.float32, count=d, offset=4 * d).copy()
        action, reward, done, origin, has_td, td = self._tail.unpack_from(buf, 8 * d)
        return Experience(
            obs=obs,
            action=action,
            reward=reward,
            next_obs=nxt,
            done=bool(done),
            origin_agent=origin,
            td_at_share=td if has_td else None,
        )


def write_experience_stream(fh: BinaryIO, codec: ExperienceCodec, experiences: Sequence[Experience]) -> None:
    fh.write(_HEADER.pack(STREAM_MAGIC, STREAM_VERSION, codec.observation_dim))
    for exp in experiences:
        fh.write(codec.encode(exp))


def read_experience_stream(fh: BinaryIO) -> list[Experience]:
    head = fh.read(_HEADER.size)
    magic, version, dim = _HEADER.unpack(head)
    if magic != STREAM_MAGIC:
        raise ContractViolation("not an experience stream (bad magic)")
    if version != STREAM_VERSION:
        raise ContractViolation(f"unsupported stream version {version}")
    codec = ExperienceCodec(dim)
    out = []
    while True:
        buf = fh.read(codec.record_size)
        if not buf:
            return out
        out.append(codec.decode(buf))
