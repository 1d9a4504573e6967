"""Feedforward Q-network with explicit forward/backward passes.

Small enough to verify by finite differences: an MLP trunk of rectified
layers feeding either a single action-value head or a dueling pair of
value/advantage heads, trained on an importance-weighted Huber loss with a
hand-rolled Adam or SGD step.  Parameters live in float32 by default;
float64 is available for gradient checks.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .core import ConfigError, ContractViolation, TrainingDiverged

HUBER_DELTA = 1.0


class QNetwork:
    """MLP state-action value function.

    Parameter order: trunk (W, b) pairs, then for dueling nets the value
    head (W, b) and advantage head (W, b), or a single output head (W, b)
    for plain nets.  He-normal weight init, zero biases.
    """

    def __init__(
        self,
        observation_dim: int,
        action_count: int,
        hidden_sizes: tuple[int, ...] = (128, 128),
        dueling: bool = True,
        rng=0,
        dtype=np.float32,
    ):
        if observation_dim <= 0 or action_count <= 0:
            raise ConfigError("observation_dim and action_count must be positive")
        if not hidden_sizes:
            raise ConfigError("at least one hidden layer is required")
        self.observation_dim = observation_dim
        self.action_count = action_count
        self.hidden_sizes = tuple(hidden_sizes)
        self.dueling = dueling
        self.dtype = np.dtype(dtype)
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.params: list[np.ndarray] = []
        fan_in = observation_dim
        for width in self.hidden_sizes:
            self._add_layer(gen, fan_in, width)
            fan_in = width
        if dueling:
            self._add_layer(gen, fan_in, 1)
            self._add_layer(gen, fan_in, action_count)
        else:
            self._add_layer(gen, fan_in, action_count)

    def _add_layer(self, gen: np.random.Generator, fan_in: int, fan_out: int) -> None:
        scale = np.sqrt(2.0 / fan_in)
        w = (gen.standard_normal((fan_in, fan_out)) * scale).astype(self.dtype)
        b = np.zeros(fan_out, dtype=self.dtype)
        self.params.append(w)
        self.params.append(b)

    # -- forward ---------------------------------------------------------

    def _check_input(self, obs_batch: np.ndarray) -> np.ndarray:
        x = np.asarray(obs_batch, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.observation_dim:
            raise ContractViolation(
                f"expected batch of shape (n, {self.observation_dim}), got {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise ContractViolation("non-finite observation input")
        return x

    def _forward_cached(self, x: np.ndarray):
        """Returns (q, v, advantage, activations); activations[i] is the input
        to trunk layer i, activations[-1] the trunk output."""
        acts = [x]
        h = x
        n_trunk = len(self.hidden_sizes)
        for i in range(n_trunk):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = np.maximum(h @ w + b, 0.0)
            acts.append(h)
        if self.dueling:
            wv, bv = self.params[2 * n_trunk], self.params[2 * n_trunk + 1]
            wa, ba = self.params[2 * n_trunk + 2], self.params[2 * n_trunk + 3]
            v = h @ wv + bv
            adv = h @ wa + ba
            q = v + adv - adv.mean(axis=1, keepdims=True)
            return q, v, adv, acts
        wo, bo = self.params[2 * n_trunk], self.params[2 * n_trunk + 1]
        q = h @ wo + bo
        return q, None, None, acts

    def forward(self, obs_batch: np.ndarray) -> np.ndarray:
        x = self._check_input(obs_batch)
        q, _, _, _ = self._forward_cached(x)
        return q

    def state_value(self, obs_batch: np.ndarray) -> np.ndarray:
        """Value head output (dueling nets only)."""
        if not self.dueling:
            raise ContractViolation("plain network has no value head")
        x = self._check_input(obs_batch)
        _, v, _, _ = self._forward_cached(x)
        return v[:, 0]

    # -- parameter plumbing ---------------------------------------------

    def clone(self) -> "QNetwork":
        other = QNetwork.__new__(QNetwork)
        other.observation_dim = self.observation_dim
        other.action_count = self.action_count
        other.hidden_sizes = self.hidden_sizes
        other.dueling = self.dueling
        other.dtype = self.dtype
        other.params = [p.copy() for p in self.params]
        return other

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        expected = sum(p.size for p in self.params)
        if flat.size != expected:
            raise ContractViolation(f"expected {expected} parameters, got {flat.size}")
        offset = 0
        for p in self.params:
            p[...] = flat[offset: offset + p.size].reshape(p.shape).astype(self.dtype)
            offset += p.size


def sync_target(net: QNetwork, target_net: QNetwork) -> None:
    """Hard-copy ``net``'s parameters into ``target_net``."""
    if [p.shape for p in net.params] != [p.shape for p in target_net.params]:
        raise ContractViolation("architecture mismatch between online and target nets")
    for src, dst in zip(net.params, target_net.params):
        dst[...] = src


# -- optimizers ----------------------------------------------------------


class Sgd:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate
        self.step_count = 0

    def apply(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.step_count += 1
        for p, g in zip(params, grads):
            p -= (self.learning_rate * g).astype(p.dtype)


class Adam:
    """Adaptive-moment optimizer; the epsilon default follows the tuned
    configuration this code base trains with."""

    def __init__(
        self,
        learning_rate: float,
        epsilon: float = 0.00015,
        beta1: float = 0.9,
        beta2: float = 0.999,
    ):
        self.learning_rate = learning_rate
        self.epsilon = epsilon
        self.beta1 = beta1
        self.beta2 = beta2
        self.step_count = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def apply(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self._m, self._v):
            g = g.astype(p.dtype)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p -= (self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)).astype(p.dtype)


# -- training ------------------------------------------------------------


def _huber(err: np.ndarray) -> np.ndarray:
    a = np.abs(err)
    return np.where(a <= HUBER_DELTA, 0.5 * err * err, HUBER_DELTA * (a - 0.5 * HUBER_DELTA))


def _huber_grad(err: np.ndarray) -> np.ndarray:
    return np.clip(err, -HUBER_DELTA, HUBER_DELTA)


def compute_targets(
    net: QNetwork,
    target_net: QNetwork,
    rewards: np.ndarray,
    next_obs: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    double_q: bool,
) -> np.ndarray:
    q_next_target = target_net.forward(next_obs)
    if double_q:
        greedy = np.argmax(net.forward(next_obs), axis=1)
        bootstrap = q_next_target[np.arange(len(greedy)), greedy]
    else:
        bootstrap = q_next_target.max(axis=1)
    not_done = 1.0 - np.asarray(dones, dtype=bootstrap.dtype)
    return np.asarray(rewards, dtype=bootstrap.dtype) + gamma * bootstrap * not_done


def loss_and_gradients(
    net: QNetwork,
    target_net: QNetwork,
    obs: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    next_obs: np.ndarray,
    dones: np.ndarray,
    is_weights: np.ndarray,
    gamma: float,
    double_q: bool,
    fixed_targets: np.ndarray | None = None,
):
    """Loss, parameter gradients and per-sample |td| for one batch.

    The targets are treated as constants (no gradient flows through the
    target network or the double-Q argmax).  ``fixed_targets`` substitutes
    precomputed target values, which finite-difference checks need: without
    it a parameter bump can flip the bootstrap argmax and the loss jumps.
    """
    x = net._check_input(obs)
    n = x.shape[0]
    actions = np.asarray(actions, dtype=np.int64)
    if np.any(is_weights < 0):
        raise ContractViolation("importance weights must be >= 0")

    q, v, adv, acts = net._forward_cached(x)
    q_sa = q[np.arange(n), actions]

    if fixed_targets is None:
        target = compute_targets(net, target_net, rewards, next_obs, dones, gamma, double_q)
    else:
        target = np.asarray(fixed_targets, dtype=q_sa.dtype)

    err = q_sa - target
    w = np.asarray(is_weights, dtype=q_sa.dtype)
    loss = float(np.mean(w * _huber(err)))
    td_abs = np.abs(err).astype(np.float64)

    # d loss / d q_sa
    g_qsa = (w * _huber_grad(err)) / n

    n_trunk = len(net.hidden_sizes)
    grads = [np.zeros_like(p) for p in net.params]
    h = acts[-1]
    if net.dueling:
        a_count = net.action_count
        g_adv = np.zeros((n, a_count), dtype=x.dtype)
        g_adv[np.arange(n), actions] = g_qsa
        g_adv -= (g_qsa / a_count)[:, None]
        g_v = g_qsa[:, None].astype(x.dtype)
        wv = net.params[2 * n_trunk]
        wa = net.params[2 * n_trunk + 2]
        grads[2 * n_trunk] = h.T @ g_v
        grads[2 * n_trunk + 1] = g_v.sum(axis=0)
        grads[2 * n_trunk + 2] = h.T @ g_adv
        grads[2 * n_trunk + 3] = g_adv.sum(axis=0)
        g_h = g_v @ wv.T + g_adv @ wa.T
    else:
        g_q = np.zeros((n, net.action_count), dtype=x.dtype)
        g_q[np.arange(n), actions] = g_qsa
        wo = net.params[2 * n_trunk]
        grads[2 * n_trunk] = h.T @ g_q
        grads[2 * n_trunk + 1] = g_q.sum(axis=0)
        g_h = g_q @ wo.T

    for i in range(n_trunk - 1, -1, -1):
        g_pre = g_h * (acts[i + 1] > 0)
        w_i = net.params[2 * i]
        grads[2 * i] = acts[i].T @ g_pre
        grads[2 * i + 1] = g_pre.sum(axis=0)
        g_h = g_pre @ w_i.T

    return loss, grads, td_abs


def train_on_batch(
    net: QNetwork,
    target_net: QNetwork,
    optimizer,
    obs: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    next_obs: np.ndarray,
    dones: np.ndarray,
    is_weights: np.ndarray,
    gamma: float,
    double_q: bool,
) -> tuple[float, np.ndarray]:
    """One optimizer step; returns (loss, per-sample |td| before the step)."""
    loss, grads, td_abs = loss_and_gradients(
        net, target_net, obs, actions, rewards, next_obs, dones, is_weights, gamma, double_q
    )
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(
                "non-finite gradient in training step", step=optimizer.step_count + 1
            )
    optimizer.apply(net.params, grads)
    return loss, td_abs


# -- checkpoints ---------------------------------------------------------

CHECKPOINT_MAGIC = b"XNET"
CHECKPOINT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHBBIIH")  # magic, version, dueling, dtype code, obs_dim, actions, n_arrays
_DTYPE_CODES = {4: np.dtype(np.float32), 8: np.dtype(np.float64)}


def save_network(net: QNetwork, fh: BinaryIO) -> None:
    """Versioned binary checkpoint: shapes header followed by row-major arrays."""
    fh.write(
        _CKPT_HEAD.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            1 if net.dueling else 0,
            net.dtype.itemsize,
            net.observation_dim,
            net.action_count,
            len(net.params),
        )
    )
    for p in net.params:
        fh.write(struct.pack("<B", p.ndim))
        fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
        fh.write(np.ascontiguousarray(p).tobytes())


def load_network(fh: BinaryIO) -> QNetwork:
    magic, version, dueling, dtype_code, obs_dim, action_count, n_arrays = _CKPT_HEAD.unpack(
        fh.read(_CKPT_HEAD.size)
    )
    if magic != CHECKPOINT_MAGIC:
        raise ContractViolation("not a network checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {version}")
    dtype = _DTYPE_CODES.get(dtype_code)
    if dtype is None:
        raise ContractViolation(f"unknown dtype code {dtype_code}")
    params = []
    for _ in range(n_arrays):
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        data = fh.read(count * dtype.itemsize)
        params.append(np.frombuffer(data, dtype=dtype).reshape(shape).copy())

    head_pairs = 2 if dueling else 1
    weight_shapes = [params[2 * i].shape for i in range((n_arrays // 2) - head_pairs)]
    hidden = tuple(s[1] for s in weight_shapes)
    net = QNetwork.__new__(QNetwork)
    net.observation_dim = obs_dim
    net.action_count = action_count
    net.hidden_sizes = hidden
    net.dueling = bool(dueling)
    net.dtype = dtype
    net.params = params
    return net
