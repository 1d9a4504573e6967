"""Pursuit gridworld: cooperating pursuers chase random-walking evaders.

Coordinates are (x, y) with x in [0, grid_width) growing east and y in
[0, grid_height) growing south.  All entities move simultaneously under a
symmetric rule: a proposed move succeeds iff the target cell is inside the
grid, not an obstacle, not currently occupied by any other entity, and not
proposed by another mover of the same kind; otherwise the entity stays put.
Pursuers move first, then evaders (each drawing a uniformly random action),
then captures and rewards are evaluated on the settled positions.

An evader with at least ``n_catch`` pursuers on cardinally adjacent cells is
captured and removed; each of those pursuers earns ``catch_reward``.  After
removals, every (pursuer, surviving evader) adjacent pair earns the pursuer
``tag_reward``, and every pursuer pays ``urgency_reward`` each step.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import ConfigError, ContractViolation, MarkovGameSpec

ACTION_COUNT = 5
UP, DOWN, LEFT, RIGHT, STAY = range(ACTION_COUNT)
_DELTAS = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))

Cell = tuple[int, int]


class ObstacleLayout(enum.Enum):
    NONE = "none"
    CENTER_BLOCK = "center_block"


@dataclass(frozen=True)
class PursuitConfig:
    grid_width: int = 16
    grid_height: int = 16
    num_pursuers: int = 8
    num_evaders: int = 30
    n_catch: int = 2
    obs_range: int = 7
    catch_reward: float = 5.0
    tag_reward: float = 0.01
    urgency_reward: float = -0.1
    max_cycles: int = 500
    obstacle_layout: ObstacleLayout = ObstacleLayout.CENTER_BLOCK
    # capture is adjacency-based; kept for parity with the reference setup
    surrounded: bool = True

    def validate(self) -> None:
        for name in ("grid_width", "grid_height", "num_pursuers", "num_evaders",
                     "n_catch", "obs_range", "max_cycles"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.obs_range % 2 == 0:
            raise ConfigError("obs_range must be odd")
        if self.num_pursuers < self.n_catch:
            raise ConfigError("num_pursuers must be >= n_catch")

    @property
    def observation_dim(self) -> int:
        return self.obs_range * self.obs_range * 3


def mini_pursuit_config() -> PursuitConfig:
    """Desk-scale variant: tiny grid, two pursuers, two evaders, no obstacle."""
    return PursuitConfig(
        grid_width=7,
        grid_height=7,
        num_pursuers=2,
        num_evaders=2,
        n_catch=2,
        obs_range=5,
        max_cycles=100,
        obstacle_layout=ObstacleLayout.NONE,
    )


def obstacle_cells(config: PursuitConfig) -> frozenset[Cell]:
    """Cells blocked by the configured layout.

    CenterBlock is an axis-aligned rectangle of grid_width//4 by
    grid_height//4 cells (at least 1x1), centered on the grid.
    """
    if config.obstacle_layout is ObstacleLayout.NONE:
        return frozenset()
    bw = max(1, config.grid_width // 4)
    bh = max(1, config.grid_height // 4)
    x0 = (config.grid_width - bw) // 2
    y0 = (config.grid_height - bh) // 2
    return frozenset((x, y) for x in range(x0, x0 + bw) for y in range(y0, y0 + bh))


@dataclass(frozen=True)
class GridState:
    """Full environment state.  Evaders keep their slot after capture, with
    the alive flag cleared, so indices stay stable across a trace."""

    config: PursuitConfig
    pursuers: tuple[Cell, ...]
    evaders: tuple[Cell, ...]
    evader_alive: tuple[bool, ...]
    obstacles: frozenset[Cell]
    step_counter: int

    def living_evaders(self) -> list[Cell]:
        return [p for p, a in zip(self.evaders, self.evader_alive) if a]

    def obstacle_mask(self) -> np.ndarray:
        mask = np.zeros((self.config.grid_height, self.config.grid_width), dtype=bool)
        for x, y in self.obstacles:
            mask[y, x] = True
        return mask


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def reset(config: PursuitConfig, rng) -> tuple[GridState, list[np.ndarray]]:
    """Place all entities uniformly at random on distinct free cells.

    ``rng`` may be a seed or a ``numpy.random.Generator`` (which is advanced).
    """
    config.validate()
    gen = _as_generator(rng)
    obstacles = obstacle_cells(config)
    free = [
        (x, y)
        for y in range(config.grid_height)
        for x in range(config.grid_width)
        if (x, y) not in obstacles
    ]
    needed = config.num_pursuers + config.num_evaders
    if needed > len(free):
        raise ConfigError(
            f"grid has {len(free)} free cells, cannot place {needed} entities"
        )
    picks = gen.choice(len(free), size=needed, replace=False)
    cells = [free[i] for i in picks]
    state = GridState(
        config=config,
        pursuers=tuple(cells[: config.num_pursuers]),
        evaders=tuple(cells[config.num_pursuers:]),
        evader_alive=(True,) * config.num_evaders,
        obstacles=obstacles,
        step_counter=0,
    )
    return state, [observe(state, i) for i in range(config.num_pursuers)]


def _resolve_moves(
    positions: Sequence[Cell],
    actions: Sequence[int],
    blocked: frozenset[Cell],
    others: set[Cell],
    width: int,
    height: int,
) -> list[Cell]:
    """Symmetric simultaneous-move resolution for one entity kind.

    ``others`` holds cells occupied by the opposite kind.  A move succeeds
    iff its target is free right now and no sibling proposes the same cell.
    """
    targets = []
    for (x, y), a in zip(positions, actions):
        dx, dy = _DELTAS[a]
        targets.append((x + dx, y + dy))
    own = set(positions)
    proposal_counts: dict[Cell, int] = {}
    for t, a in zip(targets, actions):
        if a != STAY:
            proposal_counts[t] = proposal_counts.get(t, 0) + 1
    new_positions = []
    for pos, tgt, a in zip(positions, targets, actions):
        if a == STAY:
            new_positions.append(pos)
            continue
        x, y = tgt
        ok = (
            0 <= x < width
            and 0 <= y < height
            and tgt not in blocked
            and tgt not in others
            and not (tgt in own and tgt != pos)
            and proposal_counts[tgt] == 1
        )
        new_positions.append(tgt if ok else pos)
    return new_positions


def _adjacent(a: Cell, b: Cell) -> bool:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1


def step(
    state: GridState, joint_actions: Sequence[int], rng
) -> tuple[GridState, np.ndarray, list[np.ndarray], bool]:
    """Advance one cycle; returns (state', per-pursuer rewards, observations, done)."""
    cfg = state.config
    if len(joint_actions) != cfg.num_pursuers:
        raise ContractViolation(
            f"expected {cfg.num_pursuers} actions, got {len(joint_actions)}"
        )
    for a in joint_actions:
        if not 0 <= int(a) < ACTION_COUNT:
            raise ContractViolation(f"action index {a} outside [0, {ACTION_COUNT})")
    gen = _as_generator(rng)

    living = state.living_evaders()
    pursuers = _resolve_moves(
        state.pursuers,
        [int(a) for a in joint_actions],
        state.obstacles,
        set(living),
        cfg.grid_width,
        cfg.grid_height,
    )

    evader_actions = [int(gen.integers(ACTION_COUNT)) for _ in living]
    moved_living = _resolve_moves(
        living,
        evader_actions,
        state.obstacles,
        set(pursuers),
        cfg.grid_width,
        cfg.grid_height,
    )
    moved_iter = iter(moved_living)
    evaders = tuple(
        next(moved_iter) if alive else pos
        for pos, alive in zip(state.evaders, state.evader_alive)
    )

    rewards = np.full(cfg.num_pursuers, cfg.urgency_reward, dtype=np.float64)
    alive = list(state.evader_alive)
    for j, epos in enumerate(evaders):
        if not alive[j]:
            continue
        adjacent = [i for i, ppos in enumerate(pursuers) if _adjacent(ppos, epos)]
        if len(adjacent) >= cfg.n_catch:
            alive[j] = False
            for i in adjacent:
                rewards[i] += cfg.catch_reward
    for j, epos in enumerate(evaders):
        if not alive[j]:
            continue
        for i, ppos in enumerate(pursuers):
            if _adjacent(ppos, epos):
                rewards[i] += cfg.tag_reward

    new_state = replace(
        state,
        pursuers=tuple(pursuers),
        evaders=evaders,
        evader_alive=tuple(alive),
        step_counter=state.step_counter + 1,
    )
    done = not any(alive) or new_state.step_counter >= cfg.max_cycles
    observations = [observe(new_state, i) for i in range(cfg.num_pursuers)]
    return new_state, rewards, observations, done


def observe(state: GridState, agent: int) -> np.ndarray:
    """Local obs_range x obs_range window around the agent, 3 channels
    (obstacle/out-of-bounds, pursuers, living evaders), flattened row-major
    channel-last.  The agent sees itself at the window center."""
    cfg = state.config
    if not 0 <= agent < cfg.num_pursuers:
        raise ContractViolation(f"no pursuer with id {agent}")
    r = cfg.obs_range
    half = r // 2
    cx, cy = state.pursuers[agent]
    window = np.zeros((r, r, 3), dtype=np.float32)
    for row in range(r):
        for col in range(r):
            x = cx + (col - half)
            y = cy + (row - half)
            inside = 0 <= x < cfg.grid_width and 0 <= y < cfg.grid_height
            if not inside or (x, y) in state.obstacles:
                window[row, col, 0] = 1.0
    for x, y in state.pursuers:
        col, row = x - cx + half, y - cy + half
        if 0 <= col < r and 0 <= row < r:
            window[row, col, 1] += 1.0
    for x, y in state.living_evaders():
        col, row = x - cx + half, y - cy + half
        if 0 <= col < r and 0 <= row < r:
            window[row, col, 2] += 1.0
    return window.reshape(-1)


def game_spec(config: PursuitConfig, gamma: float) -> MarkovGameSpec:
    return MarkovGameSpec(
        agent_count=config.num_pursuers,
        observation_dim=config.observation_dim,
        action_count=ACTION_COUNT,
        max_episode_steps=config.max_cycles,
        gamma=gamma,
    )


def trace_record(step_index: int, state: GridState, actions: Sequence[int],
                 rewards: Sequence[float]) -> str:
    """One line-delimited JSON record for an episode trace file."""
    return json.dumps(
        {
            "step": step_index,
            "pursuers": [list(p) for p in state.pursuers],
            "evaders": [list(e) for e in state.evaders],
            "alive": [bool(a) for a in state.evader_alive],
            "actions": [int(a) for a in actions],
            "rewards": [float(x) for x in rewards],
        },
        separators=(",", ":"),
    )


class PursuitEnv:
    """Stateful convenience wrapper owning the rng stream across episodes."""

    def __init__(self, config: PursuitConfig, rng):
        config.validate()
        self.config = config
        self._rng = _as_generator(rng)
        self._state: GridState | None = None

    @property
    def state(self) -> GridState:
        if self._state is None:
            raise ContractViolation("reset() has not been called")
        return self._state

    def reset(self) -> list[np.ndarray]:
        self._state, obs = reset(self.config, self._rng)
        return obs

    def step(self, joint_actions: Sequence[int]):
        new_state, rewards, obs, done = step(self.state, joint_actions, self._rng)
        self._state = new_state
        return rewards, obs, done
