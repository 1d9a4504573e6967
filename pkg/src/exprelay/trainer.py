"""Training loop for n Q-learners on one gridworld, with optional relay.

Each iteration runs fixed phases in order: collect a joint rollout fragment,
insert own experiences, compute td-errors and offer experiences to the
channel, drain received experiences, one prioritized learning step per
agent, priority refresh, hard target sync on schedule.  Phases are barriers:
all agents finish one phase before any starts the next, which is what makes
single-threaded runs exactly reproducible.

Run modes: fully independent learners (no channel at all), independent
learners plus the relay channel, and a parameter-sharing baseline where all
agents act with one shared network that receives n gradient steps per
iteration.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import pursuit
from .core import (
    ConfigError,
    ContractViolation,
    Experience,
    ExperienceCodec,
    SelectionStrategy,
    TrainerConfig,
    read_experience_stream,
    td_errors_batch,
    write_experience_stream,
)
from .network import Adam, QNetwork, Sgd, load_network, save_network, sync_target, train_on_batch
from .replay import PrioritizedBuffer
from .sharing import ExperienceSelector, RelayChannel


class RunMode(enum.Enum):
    INDEPENDENT = "independent"
    RELAY = "relay"
    PARAMETER_SHARING = "parameter_sharing"

    @classmethod
    def from_name(cls, name: str) -> "RunMode":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown run mode {name!r} (valid: {valid})") from None


def epsilon_at(cfg: TrainerConfig, env_steps: int) -> float:
    """Linear exploration decay, clamped at epsilon_final."""
    span = cfg.epsilon_initial - cfg.epsilon_final
    return max(cfg.epsilon_final, cfg.epsilon_initial - env_steps * span / cfg.epsilon_decay_steps)


def is_beta_at(cfg: TrainerConfig, env_steps: int) -> float:
    """Importance-weight exponent annealed linearly over the epsilon horizon."""
    frac = min(1.0, env_steps / cfg.epsilon_decay_steps)
    return cfg.is_beta_initial + frac * (cfg.is_beta_final - cfg.is_beta_initial)


@dataclass
class AgentLearner:
    agent_id: int
    online: QNetwork
    target: QNetwork
    optimizer: Adam | Sgd
    buffer: PrioritizedBuffer
    selector: ExperienceSelector | None
    action_rng: np.random.Generator
    sample_rng: np.random.Generator
    last_sync_index: int = 0


@dataclass
class IterationMetrics:
    """What one call to train_iteration hands back for reporting."""

    env_steps: int
    completed_returns: list[np.ndarray] = field(default_factory=list)
    loss: float = 0.0
    mean_abs_td: float = 0.0
    epsilon: float = 0.0
    shared_counts: np.ndarray | None = None
    actual_bandwidth: float = 0.0


def _stack(batch: list[Experience]):
    obs = np.stack([e.obs for e in batch])
    actions = np.array([e.action for e in batch], dtype=np.int64)
    rewards = np.array([e.reward for e in batch], dtype=np.float64)
    next_obs = np.stack([e.next_obs for e in batch])
    dones = np.array([1.0 if e.done else 0.0 for e in batch], dtype=np.float64)
    return obs, actions, rewards, next_obs, dones


class MultiAgentTrainer:
    def __init__(self, env_config: pursuit.PursuitConfig, cfg: TrainerConfig, mode: RunMode):
        env_config.validate()
        cfg.validate()
        self.env_config = env_config
        self.cfg = cfg
        self.mode = mode
        n = env_config.num_pursuers
        self.agent_count = n

        root = np.random.SeedSequence(cfg.seed)
        env_ss, self._eval_ss, *agent_ss = root.spawn(2 + n)
        self.env = pursuit.PursuitEnv(env_config, np.random.default_rng(env_ss))
        self._eval_spawn_count = 0

        obs_dim = env_config.observation_dim
        self.learners: list[AgentLearner] = []
        shared_online = shared_target = shared_opt = None
        for i in range(n):
            param_ss, action_ss, select_ss, sample_ss = agent_ss[i].spawn(4)
            if mode is RunMode.PARAMETER_SHARING:
                if shared_online is None:
                    shared_online = QNetwork(
                        obs_dim, pursuit.ACTION_COUNT, cfg.hidden_sizes,
                        cfg.dueling, np.random.default_rng(param_ss),
                    )
                    shared_target = shared_online.clone()
                    shared_opt = Adam(cfg.learning_rate, cfg.adam_epsilon)
                online, target, optimizer = shared_online, shared_target, shared_opt
            else:
                online = QNetwork(
                    obs_dim, pursuit.ACTION_COUNT, cfg.hidden_sizes,
                    cfg.dueling, np.random.default_rng(param_ss),
                )
                target = online.clone()
                optimizer = Adam(cfg.learning_rate, cfg.adam_epsilon)
            selector = None
            if mode is RunMode.RELAY:
                selector = ExperienceSelector(
                    i, cfg.selection, np.random.default_rng(select_ss), cfg.priority_epsilon
                )
            self.learners.append(
                AgentLearner(
                    agent_id=i,
                    online=online,
                    target=target,
                    optimizer=optimizer,
                    buffer=PrioritizedBuffer(
                        cfg.buffer_capacity, cfg.priority_alpha, cfg.priority_epsilon
                    ),
                    selector=selector,
                    action_rng=np.random.default_rng(action_ss),
                    sample_rng=np.random.default_rng(sample_ss),
                )
            )

        self.channel: RelayChannel | None = None
        if mode is RunMode.RELAY:
            self.channel = RelayChannel(n, ExperienceCodec(obs_dim))

        self.env_steps = 0
        self.iteration = 0
        self._obs: list[np.ndarray] | None = None
        self._episode_returns = np.zeros(n, dtype=np.float64)
        self._episode_done = True

    # -- acting ----------------------------------------------------------

    def _greedy_action(self, learner: AgentLearner, obs: np.ndarray) -> int:
        q = learner.online.forward(obs[None, :])[0]
        return int(np.argmax(q))

    def _act(self, learner: AgentLearner, obs: np.ndarray, epsilon: float) -> int:
        if learner.action_rng.random() < epsilon:
            return int(learner.action_rng.integers(pursuit.ACTION_COUNT))
        return self._greedy_action(learner, obs)

    def collect_rollout(self) -> tuple[list[list[Experience]], list[np.ndarray]]:
        """Advance the environment rollout_fragment_length joint steps.

        Returns per-agent experience lists (in step order) and the per-agent
        return vectors of episodes completed during the fragment.
        """
        cfg = self.cfg
        batches: list[list[Experience]] = [[] for _ in range(self.agent_count)]
        completed: list[np.ndarray] = []
        for _ in range(cfg.rollout_fragment_length):
            if self._episode_done:
                self._obs = self.env.reset()
                self._episode_returns = np.zeros(self.agent_count, dtype=np.float64)
                self._episode_done = False
            epsilon = epsilon_at(cfg, self.env_steps)
            actions = [
                self._act(self.learners[i], self._obs[i], epsilon)
                for i in range(self.agent_count)
            ]
            rewards, next_obs, done = self.env.step(actions)
            for i in range(self.agent_count):
                batches[i].append(
                    Experience(
                        obs=self._obs[i],
                        action=actions[i],
                        reward=float(rewards[i]),
                        next_obs=next_obs[i],
                        done=done,
                        origin_agent=i,
                    )
                )
            self._episode_returns += rewards
            self._obs = next_obs
            self.env_steps += 1
            if done:
                completed.append(self._episode_returns.copy())
                self._episode_done = True
        return batches, completed

    # -- learning --------------------------------------------------------

    def _relay_phase(self, batches: list[list[Experience]]) -> None:
        cfg = self.cfg
        if cfg.selection.strategy is not SelectionStrategy.NONE:
            for learner, batch in zip(self.learners, batches):
                obs, actions, rewards, next_obs, dones = _stack(batch)
                tds = td_errors_batch(
                    obs, actions, rewards, next_obs, dones,
                    learner.online, learner.target, cfg.gamma, cfg.double_q,
                )
                learner.selector.select_and_relay(batch, tds, self.channel)
        for learner in self.learners:
            for exp in self.channel.drain(learner.agent_id):
                hint = exp.td_at_share if cfg.relay_priority_hint else None
                learner.buffer.insert(exp, priority_hint=hint)

    def _learning_phase(self) -> tuple[float, float]:
        cfg = self.cfg
        losses = []
        td_means = []
        threshold = max(cfg.learning_starts, cfg.train_batch_size)
        beta = is_beta_at(cfg, self.env_steps)
        for learner in self.learners:
            if learner.buffer.size < threshold:
                continue
            exps, slot_ids, weights = learner.buffer.sample(
                cfg.train_batch_size, beta, learner.sample_rng
            )
            obs, actions, rewards, next_obs, dones = _stack(exps)
            loss, td_abs = train_on_batch(
                learner.online, learner.target, learner.optimizer,
                obs, actions, rewards, next_obs, dones, weights,
                cfg.gamma, cfg.double_q,
            )
            learner.buffer.update_priorities(slot_ids, td_abs)
            losses.append(loss)
            td_means.append(float(td_abs.mean()))
        loss = float(np.mean(losses)) if losses else 0.0
        mean_td = float(np.mean(td_means)) if td_means else 0.0
        return loss, mean_td

    def _sync_phase(self) -> None:
        sync_index = self.env_steps // self.cfg.target_update_freq
        if self.mode is RunMode.PARAMETER_SHARING:
            lead = self.learners[0]
            if sync_index > lead.last_sync_index:
                sync_target(lead.online, lead.target)
            for learner in self.learners:
                learner.last_sync_index = sync_index
            return
        for learner in self.learners:
            if sync_index > learner.last_sync_index:
                sync_target(learner.online, learner.target)
                learner.last_sync_index = sync_index

    def train_iteration(self) -> IterationMetrics:
        batches, completed = self.collect_rollout()
        for learner, batch in zip(self.learners, batches):
            for exp in batch:
                learner.buffer.insert(exp)
        if self.mode is RunMode.RELAY:
            self._relay_phase(batches)
        loss, mean_td = self._learning_phase()
        self._sync_phase()
        self.iteration += 1

        if self.channel is not None:
            shared = self.channel.shared.copy()
            offered_total = int(self.channel.offered.sum())
            bandwidth = float(shared.sum()) / offered_total if offered_total else 0.0
        else:
            shared = np.zeros(self.agent_count, dtype=np.int64)
            bandwidth = 0.0
        return IterationMetrics(
            env_steps=self.env_steps,
            completed_returns=completed,
            loss=loss,
            mean_abs_td=mean_td,
            epsilon=epsilon_at(self.cfg, self.env_steps),
            shared_counts=shared,
            actual_bandwidth=bandwidth,
        )

    # -- evaluation ------------------------------------------------------

    def evaluate(self, episodes: int) -> tuple[np.ndarray, float]:
        """Greedy rollouts on a fresh environment drawn from the evaluation
        seed stream; training state is untouched."""
        # children are addressed by explicit spawn-key index so that a
        # resumed trainer continues the identical evaluation seed sequence
        child = np.random.SeedSequence(
            entropy=self._eval_ss.entropy,
            spawn_key=self._eval_ss.spawn_key + (self._eval_spawn_count,),
        )
        self._eval_spawn_count += 1
        return evaluate(
            [ln.online for ln in self.learners], self.env_config, episodes,
            np.random.default_rng(child),
        )

    # -- checkpointing ---------------------------------------------------

    def save_checkpoint(self, directory: str) -> None:
        save_checkpoint(self, directory)

    @classmethod
    def load_checkpoint(cls, directory: str) -> "MultiAgentTrainer":
        return load_checkpoint(directory)


def evaluate(
    networks: list[QNetwork],
    env_config: pursuit.PursuitConfig,
    episodes: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Mean undiscounted per-agent returns and mean team return (sum over
    agents) across greedy episodes."""
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    n = env_config.num_pursuers
    if len(networks) != n:
        raise ContractViolation(f"need {n} networks, got {len(networks)}")
    env = pursuit.PursuitEnv(env_config, rng)
    totals = np.zeros((episodes, n), dtype=np.float64)
    for ep in range(episodes):
        obs = env.reset()
        done = False
        while not done:
            actions = [int(np.argmax(networks[i].forward(obs[i][None, :])[0])) for i in range(n)]
            rewards, obs, done = env.step(actions)
            totals[ep] += rewards
    per_agent = totals.mean(axis=0)
    team = float(totals.sum(axis=1).mean())
    return per_agent, team


# -- checkpoint layout ---------------------------------------------------
#
# A checkpoint is a directory written at an iteration boundary (the relay
# channel is empty there, so queues are never serialized):
#   manifest.json           configs, counters, rng states, live episode state
#   agent{i}_online.net     network checkpoints (binary format of network.py)
#   agent{i}_target.net
#   agent{i}_opt.npz        optimizer moment arrays and step count
#   agent{i}_buffer.bin     replay contents as an experience stream
#   agent{i}_buffer.npz     priorities, slot ids, cursors
#   agent{i}_window.npz     selection window ring and running sums

CHECKPOINT_VERSION = 1


def _selection_to_dict(cfg) -> dict:
    return {
        "strategy": cfg.strategy.value,
        "bandwidth_beta": cfg.bandwidth_beta,
        "window_size_k": cfg.window_size_k,
        "gaussian_use_variance": cfg.gaussian_use_variance,
        "stochastic_alpha": cfg.stochastic_alpha,
    }


def _trainer_config_to_dict(cfg: TrainerConfig) -> dict:
    out = {
        name: getattr(cfg, name)
        for name in (
            "learning_rate", "train_batch_size", "rollout_fragment_length",
            "target_update_freq", "buffer_capacity", "gamma",
            "epsilon_initial", "epsilon_final", "epsilon_decay_steps",
            "priority_alpha", "priority_epsilon",
            "is_beta_initial", "is_beta_final",
            "dueling", "double_q", "seed",
            "learning_starts", "relay_priority_hint", "adam_epsilon",
        )
    }
    out["hidden_sizes"] = list(cfg.hidden_sizes)
    out["selection"] = _selection_to_dict(cfg.selection)
    return out


def trainer_config_from_dict(data: dict) -> TrainerConfig:
    from .core import SelectionConfig

    payload = dict(data)
    sel = payload.pop("selection")
    selection = SelectionConfig(
        strategy=SelectionStrategy.from_name(sel["strategy"]),
        bandwidth_beta=sel["bandwidth_beta"],
        window_size_k=sel["window_size_k"],
        gaussian_use_variance=sel["gaussian_use_variance"],
        stochastic_alpha=sel["stochastic_alpha"],
    )
    payload["hidden_sizes"] = tuple(payload["hidden_sizes"])
    return TrainerConfig(selection=selection, **payload)


def _pursuit_config_to_dict(cfg: pursuit.PursuitConfig) -> dict:
    return {
        "grid_width": cfg.grid_width,
        "grid_height": cfg.grid_height,
        "num_pursuers": cfg.num_pursuers,
        "num_evaders": cfg.num_evaders,
        "n_catch": cfg.n_catch,
        "obs_range": cfg.obs_range,
        "catch_reward": cfg.catch_reward,
        "tag_reward": cfg.tag_reward,
        "urgency_reward": cfg.urgency_reward,
        "max_cycles": cfg.max_cycles,
        "obstacle_layout": cfg.obstacle_layout.value,
        "surrounded": cfg.surrounded,
    }


def pursuit_config_from_dict(data: dict) -> pursuit.PursuitConfig:
    payload = dict(data)
    payload["obstacle_layout"] = pursuit.ObstacleLayout(payload["obstacle_layout"])
    return pursuit.PursuitConfig(**payload)


def save_checkpoint(trainer: MultiAgentTrainer, directory: str) -> None:
    if trainer.channel is not None:
        for i in range(trainer.agent_count):
            if trainer.channel.pending_count(i):
                raise ContractViolation("checkpointing requires an empty relay channel")
    os.makedirs(directory, exist_ok=True)
    codec = ExperienceCodec(trainer.env_config.observation_dim)
    state = trainer.env._state

    manifest = {
        "version": CHECKPOINT_VERSION,
        "mode": trainer.mode.value,
        "env_config": _pursuit_config_to_dict(trainer.env_config),
        "trainer_config": _trainer_config_to_dict(trainer.cfg),
        "env_steps": trainer.env_steps,
        "iteration": trainer.iteration,
        "eval_spawn_count": trainer._eval_spawn_count,
        "episode_done": trainer._episode_done,
        "episode_returns": [float(x) for x in trainer._episode_returns],
        "env_rng": trainer.env._rng.bit_generator.state,
        "agents": [],
        "env_state": None,
        "channel": None,
    }
    if trainer.channel is not None:
        manifest["channel"] = {
            "offered": [int(x) for x in trainer.channel.offered],
            "shared": [int(x) for x in trainer.channel.shared],
            "bytes_shared": [int(x) for x in trainer.channel.bytes_shared],
        }
    if state is not None:
        manifest["env_state"] = {
            "pursuers": [list(p) for p in state.pursuers],
            "evaders": [list(e) for e in state.evaders],
            "alive": [bool(a) for a in state.evader_alive],
            "step_counter": state.step_counter,
        }
    for learner in trainer.learners:
        i = learner.agent_id
        entry = {
            "last_sync_index": learner.last_sync_index,
            "action_rng": learner.action_rng.bit_generator.state,
            "sample_rng": learner.sample_rng.bit_generator.state,
            "optimizer_kind": "adam" if isinstance(learner.optimizer, Adam) else "sgd",
            "optimizer_steps": learner.optimizer.step_count,
            "buffer_stale_updates": learner.buffer.stale_update_count,
        }
        if learner.selector is not None:
            entry["select_rng"] = learner.selector.rng.bit_generator.state
        manifest["agents"].append(entry)

        shared_owner = trainer.mode is RunMode.PARAMETER_SHARING and i > 0
        if not shared_owner:
            with open(os.path.join(directory, f"agent{i}_online.net"), "wb") as fh:
                save_network(learner.online, fh)
            with open(os.path.join(directory, f"agent{i}_target.net"), "wb") as fh:
                save_network(learner.target, fh)
            opt = learner.optimizer
            arrays = {}
            if isinstance(opt, Adam) and opt._m is not None:
                arrays = {f"m{j}": a for j, a in enumerate(opt._m)}
                arrays.update({f"v{j}": a for j, a in enumerate(opt._v)})
            np.savez(os.path.join(directory, f"agent{i}_opt.npz"), **arrays)

        buf = learner.buffer
        occupied = [buf._storage[p] for p in range(buf.size)]
        with open(os.path.join(directory, f"agent{i}_buffer.bin"), "wb") as fh:
            write_experience_stream(fh, codec, occupied)
        np.savez(
            os.path.join(directory, f"agent{i}_buffer.npz"),
            priorities=buf.tree.nodes[buf.tree.padded: buf.tree.padded + buf.capacity].copy(),
            slot_ids=buf._slot_ids,
            next_id=np.int64(buf._next_id),
            max_priority=np.float64(buf.max_priority),
        )
        if learner.selector is not None:
            st = learner.selector.stats
            np.savez(
                os.path.join(directory, f"agent{i}_window.npz"),
                ring=st._ring,
                cursor=np.int64(st._cursor),
                count=np.int64(st.count),
                total=np.float64(st._sum),
                total_sq=np.float64(st._sumsq),
            )
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(directory: str) -> MultiAgentTrainer:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest["version"] != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {manifest['version']}")
    env_config = pursuit_config_from_dict(manifest["env_config"])
    cfg = trainer_config_from_dict(manifest["trainer_config"])
    trainer = MultiAgentTrainer(env_config, cfg, RunMode.from_name(manifest["mode"]))

    trainer.env_steps = manifest["env_steps"]
    trainer.iteration = manifest["iteration"]
    trainer._eval_spawn_count = manifest["eval_spawn_count"]
    trainer._episode_done = manifest["episode_done"]
    trainer._episode_returns = np.array(manifest["episode_returns"], dtype=np.float64)
    trainer.env._rng.bit_generator.state = manifest["env_rng"]
    if trainer.channel is not None and manifest.get("channel") is not None:
        counters = manifest["channel"]
        trainer.channel.offered[:] = counters["offered"]
        trainer.channel.shared[:] = counters["shared"]
        trainer.channel.bytes_shared[:] = counters["bytes_shared"]
    if manifest["env_state"] is not None:
        es = manifest["env_state"]
        trainer.env._state = pursuit.GridState(
            config=env_config,
            pursuers=tuple(tuple(p) for p in es["pursuers"]),
            evaders=tuple(tuple(e) for e in es["evaders"]),
            evader_alive=tuple(bool(a) for a in es["alive"]),
            obstacles=pursuit.obstacle_cells(env_config),
            step_counter=es["step_counter"],
        )
        trainer._obs = [
            pursuit.observe(trainer.env._state, i) for i in range(trainer.agent_count)
        ]

    for learner, entry in zip(trainer.learners, manifest["agents"]):
        i = learner.agent_id
        learner.last_sync_index = entry["last_sync_index"]
        learner.action_rng.bit_generator.state = entry["action_rng"]
        learner.sample_rng.bit_generator.state = entry["sample_rng"]
        if learner.selector is not None:
            learner.selector.rng.bit_generator.state = entry["select_rng"]
        learner.buffer.stale_update_count = entry["buffer_stale_updates"]

        shared_owner = trainer.mode is RunMode.PARAMETER_SHARING and i > 0
        if not shared_owner:
            with open(os.path.join(directory, f"agent{i}_online.net"), "rb") as fh:
                loaded = load_network(fh)
            for dst, src in zip(learner.online.params, loaded.params):
                dst[...] = src
            with open(os.path.join(directory, f"agent{i}_target.net"), "rb") as fh:
                loaded = load_network(fh)
            for dst, src in zip(learner.target.params, loaded.params):
                dst[...] = src
            opt = learner.optimizer
            opt.step_count = entry["optimizer_steps"]
            with np.load(os.path.join(directory, f"agent{i}_opt.npz")) as arrays:
                if isinstance(opt, Adam) and arrays.files:
                    count = len(arrays.files) // 2
                    opt._m = [arrays[f"m{j}"].copy() for j in range(count)]
                    opt._v = [arrays[f"v{j}"].copy() for j in range(count)]
        else:
            learner.optimizer.step_count = entry["optimizer_steps"]

        with open(os.path.join(directory, f"agent{i}_buffer.bin"), "rb") as fh:
            experiences = read_experience_stream(fh)
        with np.load(os.path.join(directory, f"agent{i}_buffer.npz")) as arrays:
            priorities = arrays["priorities"]
            slot_ids = arrays["slot_ids"]
            next_id = int(arrays["next_id"])
            max_priority = float(arrays["max_priority"])
        buf = learner.buffer
        for pos, exp in enumerate(experiences):
            buf._storage[pos] = exp
            buf.tree.nodes[buf.tree.padded + pos] = priorities[pos]
        buf.tree.rebuild()
        buf._slot_ids = slot_ids.copy()
        buf._next_id = next_id
        buf.size = len(experiences)
        buf.max_priority = max_priority

        window_path = os.path.join(directory, f"agent{i}_window.npz")
        if learner.selector is not None and os.path.exists(window_path):
            st = learner.selector.stats
            with np.load(window_path) as arrays:
                st._ring = arrays["ring"].copy()
                st._cursor = int(arrays["cursor"])
                st.count = int(arrays["count"])
                st._sum = float(arrays["total"])
                st._sumsq = float(arrays["total_sq"])
    return trainer
