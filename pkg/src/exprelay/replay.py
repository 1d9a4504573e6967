"""Prioritized replay: sum-tree proportional sampling with IS weights.

Priorities are stored pre-exponentiated, leaf = (|td| + epsilon)^alpha, so
sampling is a pure prefix-sum descent.  Slot ids handed out by insert and
sample are global insertion ids; a priority update for an id whose ring
position has since been overwritten is skipped and counted.
"""

from __future__ import annotations

import numpy as np

from .core import ConfigError, EmptyBufferError, Experience


class SumTree:
    # Classic binary indexed layout: node 1 is the root, leaves occupy
    # [padded, 2*padded).  Internal nodes are recomputed from their children
    # on every update, so sums cannot drift.

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.capacity = capacity
        padded = 1
        while padded < capacity:
            padded *= 2
        self.padded = padded
        self.nodes = np.zeros(2 * padded, dtype=np.float64)

    def total(self) -> float:
        return float(self.nodes[1])

    def get(self, leaf: int) -> float:
        return float(self.nodes[self.padded + leaf])

    def set(self, leaf: int, value: float) -> None:
        if not 0 <= leaf < self.capacity:
            raise ConfigError(f"leaf {leaf} outside [0, {self.capacity})")
        if value < 0:
            raise ConfigError("priorities must be >= 0")
        i = self.padded + leaf
        self.nodes[i] = value
        i //= 2
        while i >= 1:
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]
            i //= 2

    def rebuild(self) -> None:
        for i in range(self.padded - 1, 0, -1):
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]

    def descend(self, mass: float) -> int:
        """Leaf index whose cumulative-priority interval contains ``mass``."""
        return int(self.descend_batch(np.array([mass]))[0])

    def descend_batch(self, mass: np.ndarray) -> np.ndarray:
        m = np.asarray(mass, dtype=np.float64).copy()
        idx = np.ones(len(m), dtype=np.int64)
        while idx[0] < self.padded:
            left = self.nodes[2 * idx]
            go_right = m >= left
            m -= left * go_right
            idx = 2 * idx + go_right
        return idx - self.padded


class PrioritizedBuffer:
    """Fixed-capacity ring of experiences sampled proportionally to priority."""

    def __init__(self, capacity: int, priority_alpha: float = 0.6,
                 priority_epsilon: float = 1e-6):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        if priority_alpha < 0:
            raise ConfigError("priority_alpha must be >= 0")
        if priority_epsilon <= 0:
            raise ConfigError("priority_epsilon must be > 0")
        self.capacity = capacity
        self.priority_alpha = priority_alpha
        self.priority_epsilon = priority_epsilon
        self.tree = SumTree(capacity)
        self._storage: list[Experience | None] = [None] * capacity
        self._slot_ids = np.full(capacity, -1, dtype=np.int64)
        self._next_id = 0
        self.size = 0
        # leaf-level value newly inserted own experiences start at
        self.max_priority = 1.0
        self.stale_update_count = 0

    def _leaf_value(self, abs_td: float) -> float:
        return (abs(abs_td) + self.priority_epsilon) ** self.priority_alpha

    def insert(self, exp: Experience, priority_hint: float | None = None) -> int:
        slot_id = self._next_id
        self._next_id += 1
        pos = slot_id % self.capacity
        self._storage[pos] = exp
        self._slot_ids[pos] = slot_id
        if self.size < self.capacity:
            self.size += 1
        leaf = self.max_priority if priority_hint is None else self._leaf_value(priority_hint)
        self.max_priority = max(self.max_priority, leaf)
        self.tree.set(pos, leaf)
        return slot_id

    def sample(self, n: int, is_beta: float, rng: np.random.Generator):
        """Stratified proportional draw of ``n`` experiences (with replacement
        across strata).  Returns (experiences, slot ids, IS weights); weights
        are (N * P(i))^(-is_beta), normalized by the batch maximum."""
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty buffer")
        if n < 1:
            raise ConfigError("sample count must be >= 1")
        total = self.tree.total()
        bounds = np.linspace(0.0, total, n + 1)
        mass = bounds[:-1] + rng.random(n) * (bounds[1:] - bounds[:-1])
        # guard the upper edge: descent on mass == total would fall off the tree
        mass = np.minimum(mass, np.nextafter(total, 0.0))
        leaves = self.tree.descend_batch(mass)
        probs = self.tree.nodes[self.tree.padded + leaves] / total
        weights = (self.size * probs) ** (-is_beta)
        weights = weights / weights.max()
        experiences = [self._storage[i] for i in leaves]
        ids = self._slot_ids[leaves].copy()
        return experiences, ids, weights

    def update_priorities(self, slot_ids, new_abs_tds) -> None:
        for slot_id, abs_td in zip(slot_ids, new_abs_tds):
            pos = int(slot_id) % self.capacity
            if self._slot_ids[pos] != slot_id:
                self.stale_update_count += 1
                continue
            leaf = self._leaf_value(float(abs_td))
            self.max_priority = max(self.max_priority, leaf)
            self.tree.set(pos, leaf)
