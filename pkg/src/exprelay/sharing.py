"""Selective experience relay: who shares what, and how it travels.

Each agent keeps a sliding window of its own recent absolute td-errors and
applies one of three statistics-based rules (top-quantile, gaussian-model
threshold, stochastic proportional) or one of two ablation rules (share
everything, share a uniformly random fraction) to decide, per experience,
whether to broadcast it.  Selected experiences travel through an in-process
channel that serializes them to the binary wire format, queues them per
recipient, and hands them back deserialized when the recipient drains.
"""

from __future__ import annotations

import math
import threading
from dataclasses import replace
from typing import Sequence

import numpy as np

from .core import (
    ConfigError,
    Experience,
    ExperienceCodec,
    SelectionConfig,
    SelectionStrategy,
)

# statistics-based rules share nothing until the window holds this many values
MIN_WINDOW_FILL = 30


class WindowStats:
    """Ring of the last k absolute td-errors with running sum and sum of
    squares.  The running sums are recomputed exactly from the ring each time
    the cursor wraps, so float drift cannot accumulate."""

    def __init__(self, k: int):
        if k < 1:
            raise ConfigError("window size must be >= 1")
        self.k = k
        self._ring = np.zeros(k, dtype=np.float64)
        self._cursor = 0
        self.count = 0
        self._sum = 0.0
        self._sumsq = 0.0

    def push(self, td: float) -> None:
        td = float(td)
        if self.count == self.k:
            old = self._ring[self._cursor]
            self._sum -= old
            self._sumsq -= old * old
        else:
            self.count += 1
        self._ring[self._cursor] = td
        self._sum += td
        self._sumsq += td * td
        self._cursor = (self._cursor + 1) % self.k
        if self._cursor == 0 and self.count == self.k:
            self._sum = float(self._ring.sum())
            self._sumsq = float((self._ring * self._ring).sum())

    def values(self) -> np.ndarray:
        return self._ring[: self.count]

    def mean(self) -> float:
        if self.count == 0:
            raise ConfigError("empty window has no mean")
        return self._sum / self.count

    def variance(self) -> float:
        if self.count == 0:
            raise ConfigError("empty window has no variance")
        v = self._sumsq / self.count - self.mean() ** 2
        return max(v, 0.0)

    def std(self) -> float:
        return math.sqrt(self.variance())


def inverse_normal_cdf(p: float) -> float:
    """Quantile function of the standard normal.

    Rational approximation (Abramowitz & Stegun 26.2.23), absolute error
    below 4.5e-4, which is far below the decision sensitivity of the
    gaussian sharing rule.  Exact at the median by construction.
    """
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    if p == 0.5:
        return 0.0
    lower = p < 0.5
    q = p if lower else 1.0 - p
    t = math.sqrt(-2.0 * math.log(q))
    num = 2.515517 + t * (0.802853 + t * 0.010328)
    den = 1.0 + t * (1.432788 + t * (0.189269 + t * 0.001308))
    x = t - num / den
    return -x if lower else x


def should_share_quantile(stats: WindowStats, td: float, beta: float) -> bool:
    """True iff td reaches the ceil(count*beta)-th largest window value.

    Ties share; an empty window shares nothing; the caller pushes td into
    the window only after this decision.
    """
    if stats.count == 0:
        return False
    if beta >= 1.0:
        return True
    m = math.ceil(stats.count * beta)
    if m < 1:
        m = 1
    vals = stats.values()
    threshold = np.partition(vals, stats.count - m)[stats.count - m]
    return td >= threshold


def should_share_gaussian(stats: WindowStats, td: float, beta: float,
                          use_variance: bool = True) -> bool:
    """True iff td >= mu + c*sigma^2 (or mu + c*sigma), c the standard-normal
    quantile at 1-beta.  The variance form is the default; see SelectionConfig."""
    if stats.count == 0:
        return False
    c = inverse_normal_cdf(1.0 - beta)
    if not math.isfinite(c):
        # beta=1 pushes the threshold to -inf (share), beta=0 to +inf (drop)
        return c < 0
    spread = stats.variance() if use_variance else stats.std()
    return td >= stats.mean() + c * spread


def should_share_stochastic(stats: WindowStats, td: float, beta: float,
                            alpha: float, rng: np.random.Generator,
                            epsilon: float = 1e-6) -> bool:
    """Bernoulli share with probability min(1, beta*count*p^alpha / sum p_k^alpha),
    p = td + epsilon over the window.  The count factor makes the expected
    shared fraction beta whenever no probability truncates at 1."""
    if stats.count == 0:
        return False
    p_self = (td + epsilon) ** alpha
    denom = float(((stats.values() + epsilon) ** alpha).sum())
    prob = min(1.0, beta * stats.count * p_self / denom)
    return bool(rng.random() < prob)


class RelayChannel:
    """In-process transport between agents.

    Broadcast serializes the experience once and appends the record to every
    other agent's queue; drain decodes and clears a recipient's queue in
    sender-id-major, then enqueue, order.  Enqueues take a lock so learners
    may run on separate threads; drain is only ever called by the recipient.
    """

    def __init__(self, agent_count: int, codec: ExperienceCodec):
        if agent_count < 1:
            raise ConfigError("agent_count must be >= 1")
        self.agent_count = agent_count
        self.codec = codec
        self._queues: list[list[list[bytes]]] = [
            [[] for _ in range(agent_count)] for _ in range(agent_count)
        ]
        self.offered = np.zeros(agent_count, dtype=np.int64)
        self.shared = np.zeros(agent_count, dtype=np.int64)
        self.bytes_shared = np.zeros(agent_count, dtype=np.int64)
        self._lock = threading.Lock()

    def _check_agent(self, agent: int) -> None:
        if not 0 <= agent < self.agent_count:
            raise ConfigError(f"no agent {agent} on a {self.agent_count}-agent channel")

    def count_offered(self, sender: int, n: int = 1) -> None:
        self._check_agent(sender)
        self.offered[sender] += n

    def broadcast(self, sender: int, exp: Experience) -> None:
        self._check_agent(sender)
        record = self.codec.encode(exp)
        with self._lock:
            for recipient in range(self.agent_count):
                if recipient != sender:
                    self._queues[recipient][sender].append(record)
            self.shared[sender] += 1
            self.bytes_shared[sender] += len(record)

    def pending_count(self, recipient: int) -> int:
        self._check_agent(recipient)
        return sum(len(q) for q in self._queues[recipient])

    def drain(self, recipient: int) -> list[Experience]:
        self._check_agent(recipient)
        with self._lock:
            queues = self._queues[recipient]
            records = [r for sender_queue in queues for r in sender_queue]
            self._queues[recipient] = [[] for _ in range(self.agent_count)]
        return [self.codec.decode(r) for r in records]

    def actual_bandwidth(self, agent: int) -> float:
        self._check_agent(agent)
        if self.offered[agent] == 0:
            return 0.0
        return float(self.shared[agent]) / float(self.offered[agent])


class ExperienceSelector:
    """Per-agent selection state: the config, the td window, and the rng used
    by the randomized rules."""

    def __init__(self, agent_id: int, cfg: SelectionConfig,
                 rng: np.random.Generator, priority_epsilon: float = 1e-6):
        cfg.validate()
        self.agent_id = agent_id
        self.cfg = cfg
        self.rng = rng
        self.priority_epsilon = priority_epsilon
        self.stats = WindowStats(cfg.window_size_k)

    def _decide(self, td: float) -> bool:
        cfg = self.cfg
        strategy = cfg.strategy
        if strategy is SelectionStrategy.SHARE_ALL:
            return True
        if strategy is SelectionStrategy.UNIFORM_RANDOM:
            return bool(self.rng.random() < cfg.bandwidth_beta)
        if self.stats.count < MIN_WINDOW_FILL:
            return False
        if strategy is SelectionStrategy.QUANTILE:
            return should_share_quantile(self.stats, td, cfg.bandwidth_beta)
        if strategy is SelectionStrategy.GAUSSIAN:
            return should_share_gaussian(
                self.stats, td, cfg.bandwidth_beta, cfg.gaussian_use_variance
            )
        if strategy is SelectionStrategy.STOCHASTIC:
            return should_share_stochastic(
                self.stats, td, cfg.bandwidth_beta, cfg.stochastic_alpha,
                self.rng, self.priority_epsilon,
            )
        raise ConfigError(f"unknown selection strategy {strategy!r}")

    def select_and_relay(self, experiences: Sequence[Experience],
                         td_errors: Sequence[float],
                         channel: RelayChannel) -> int:
        """Decide per experience in batch order, window updated after each
        decision; selected experiences are broadcast with td_at_share set.
        Returns the number shared.  Strategy None touches nothing at all."""
        if len(experiences) != len(td_errors):
            raise ConfigError("one td-error per experience is required")
        if self.cfg.strategy is SelectionStrategy.NONE:
            return 0
        shared = 0
        for exp, td in zip(experiences, td_errors):
            td = float(td)
            if td < 0:
                raise ConfigError("td-errors must be >= 0")
            decision = self._decide(td)
            self.stats.push(td)
            channel.count_offered(self.agent_id)
            if decision:
                channel.broadcast(self.agent_id, replace(exp, td_at_share=td))
                shared += 1
        return shared
