"""Standard deterministic-policy-gradient training: replay buffer, OU
exploration noise, target networks with soft updates, critic regression to
the Bellman target, and the chain-rule actor update.

The critic-regression and actor-update helpers are shared with the ensemble
trainer so the single-pair case reduces to them exactly.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

import numpy as np

from .numerics import (
    AdamState,
    GradientBundle,
    MlpParameters,
    adam_step,
    init_adam,
    init_mlp,
    mlp_backward,
    mlp_forward,
)

log = logging.getLogger(__name__)


@dataclass
class Transition:
    """One experience tuple. Terminal means a true absorbing end, not a
    time-limit cutoff; timeouts bootstrap normally."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class Batch:
    """Columnar batch of transitions."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


class ReplayBuffer:
    """Bounded ring of transitions with uniform i.i.d. sampling.

    Once full, the oldest entry is overwritten. store/sample are guarded by
    a lock so concurrent rollout workers can append while one trainer
    samples.
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self._states = np.zeros((capacity, state_dim))
        self._actions = np.zeros((capacity, action_dim))
        self._rewards = np.zeros(capacity)
        self._next_states = np.zeros((capacity, state_dim))
        self._terminals = np.zeros(capacity)
        self._worker_ids = np.zeros(capacity, dtype=np.int64)
        self._cursor = 0
        self._size = 0
        self._total = 0
        self._lock = threading.Lock()

    @property
    def size(self) -> int:
        return self._size

    @property
    def total_stored(self) -> int:
        """Monotone count of every store() ever made (evictions included)."""
        return self._total

    def __len__(self) -> int:
        return self._size

    def store(self, t: Transition, worker_id: int = 0) -> None:
        state = np.asarray(t.state, dtype=np.float64)
        action = np.asarray(t.action, dtype=np.float64)
        next_state = np.asarray(t.next_state, dtype=np.float64)
        if state.shape != (self.state_dim,) or next_state.shape != (self.state_dim,):
            raise ValueError(f"state shape {state.shape} != ({self.state_dim},)")
        if action.shape != (self.action_dim,):
            raise ValueError(f"action shape {action.shape} != ({self.action_dim},)")
        if np.any(np.abs(action) > 1.0 + 1e-9):
            raise ValueError("action coordinates must lie in [-1, 1]")
        with self._lock:
            i = self._cursor
            self._states[i] = state
            self._actions[i] = action
            self._rewards[i] = t.reward
            self._next_states[i] = next_state
            self._terminals[i] = 1.0 if t.terminal else 0.0
            self._worker_ids[i] = worker_id
            self._cursor = (i + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
            self._total += 1

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        """Uniform i.i.d. with replacement over the current contents."""
        with self._lock:
            if self._size == 0:
                raise ValueError("cannot sample from an empty buffer")
            idx = rng.integers(0, self._size, size=n)
            return Batch(
                self._states[idx].copy(), self._actions[idx].copy(),
                self._rewards[idx].copy(), self._next_states[idx].copy(),
                self._terminals[idx].copy(),
            )

    def transitions(self) -> list[Transition]:
        """Current contents, oldest first (for inspection; O(size))."""
        with self._lock:
            if self._size < self.capacity:
                order = range(self._size)
            else:
                order = [(self._cursor + i) % self.capacity for i in range(self.capacity)]
            return [
                Transition(self._states[i].copy(), self._actions[i].copy(),
                           float(self._rewards[i]), self._next_states[i].copy(),
                           bool(self._terminals[i]))
                for i in order
            ]

    def worker_ids(self) -> np.ndarray:
        with self._lock:
            return self._worker_ids[: self._size].copy()


@dataclass
class DdpgHyperparameters:
    gamma: float = 0.96
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    batch_size: int = 128
    tau: float = 1e-3
    warmup_steps: int = 1000
    noise_theta: float = 0.15
    noise_sigma: float = 0.2
    noise_dt: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class OuNoise:
    """Ornstein-Uhlenbeck process pulled toward zero:
    x <- x + theta * (0 - x) * dt + sigma * sqrt(dt) * N(0, 1)."""

    def __init__(self, dim: int, theta: float = 0.15, sigma: float = 0.2, dt: float = 1.0):
        self.dim = dim
        self.theta = theta
        self.sigma = sigma
        self.dt = dt
        self.x = np.zeros(dim)

    def reset(self) -> None:
        self.x = np.zeros(self.dim)

    def step(self, rng: np.random.Generator) -> np.ndarray:
        self.x = (self.x + self.theta * (0.0 - self.x) * self.dt
                  + self.sigma * np.sqrt(self.dt) * rng.standard_normal(self.dim))
        return self.x.copy()


def ou_noise_step(state: OuNoise, rng: np.random.Generator) -> np.ndarray:
    return state.step(rng)


def make_actor(state_dim: int, action_dim: int, widths=(64, 32),
               hidden_activation: str = "selu",
               rng: np.random.Generator | None = None) -> MlpParameters:
    """Tanh-headed policy network; final layer scaled down so initial actions
    start near zero."""
    return init_mlp([state_dim, *widths, action_dim], hidden_activation, "tanh",
                    rng=rng, final_layer_scale=1e-3)


def make_critic(state_dim: int, action_dim: int, widths=(64, 32),
                hidden_activation: str = "selu",
                rng: np.random.Generator | None = None) -> MlpParameters:
    """Linear-headed action-value network over concatenated (state, action)."""
    return init_mlp([state_dim + action_dim, *widths, 1], hidden_activation, "linear", rng=rng)


def critic_value(critic: MlpParameters, state: np.ndarray, action: np.ndarray) -> float:
    q, _ = mlp_forward(critic, np.concatenate([state, action]))
    return float(q[0])


def soft_update(target: MlpParameters, source: MlpParameters, tau: float) -> MlpParameters:
    """target <- (1 - tau) * target + tau * source, elementwise."""
    if target.layer_dims != source.layer_dims:
        raise ValueError("target/source layer shapes differ")
    return MlpParameters(
        [(1.0 - tau) * tw + tau * sw for tw, sw in zip(target.weights, source.weights)],
        [(1.0 - tau) * tb + tau * sb for tb, sb in zip(target.biases, source.biases)],
        target.hidden_activation,
        target.output_activation,
    )


def bellman_target(t: Transition, target_actor: MlpParameters,
                   target_critic: MlpParameters, gamma: float) -> float:
    """y = r + gamma * (1 - terminal) * Q_target(s', mu_target(s'))."""
    mu, _ = mlp_forward(target_actor, t.next_state)
    q = critic_value(target_critic, np.asarray(t.next_state, dtype=np.float64), mu)
    return float(t.reward + gamma * (0.0 if t.terminal else 1.0) * q)


def bellman_targets(batch: Batch, target_actor: MlpParameters,
                    target_critic: MlpParameters, gamma: float) -> np.ndarray:
    """Batched bellman_target."""
    mu, _ = mlp_forward(target_actor, batch.next_states)
    q, _ = mlp_forward(target_critic, np.concatenate([batch.next_states, mu], axis=1))
    return batch.rewards + gamma * (1.0 - batch.terminals) * q[:, 0]


def critic_regression_step(
    critic: MlpParameters, adam: AdamState,
    states: np.ndarray, actions: np.ndarray, targets: np.ndarray, lr: float,
) -> tuple[MlpParameters, AdamState, float]:
    """One Adam step of mean-squared-error regression toward the targets."""
    q, cache = mlp_forward(critic, np.concatenate([states, actions], axis=1))
    diff = q[:, 0] - targets
    loss = float(np.mean(diff * diff))
    upstream = (2.0 / len(targets)) * diff[:, None]
    grads = mlp_backward(critic, cache, upstream)
    critic, adam = adam_step(critic, grads, adam, lr)
    return critic, adam, loss


def actor_objective_and_gradient(
    actor: MlpParameters, critics: list[MlpParameters], states: np.ndarray,
) -> tuple[float, GradientBundle]:
    """Batch-mean of the critics' average score of the actor's own actions,
    and its exact gradient w.r.t. the actor parameters via dQ/da . dmu/dtheta."""
    batch = len(states)
    actions, actor_cache = mlp_forward(actor, states)
    x = np.concatenate([states, actions], axis=1)
    state_dim = states.shape[1]
    upstream = np.full((batch, 1), 1.0 / batch)
    q_acc = np.zeros(batch)
    da_acc = np.zeros_like(actions)
    for critic in critics:
        q, cache = mlp_forward(critic, x)
        q_acc += q[:, 0]
        da_acc += mlp_backward(critic, cache, upstream).input_gradient[:, state_dim:]
    q_acc /= len(critics)
    da_acc /= len(critics)
    objective = float(np.mean(q_acc))
    return objective, mlp_backward(actor, actor_cache, da_acc)


def actor_ascent_step(
    actor: MlpParameters, adam: AdamState, critics: list[MlpParameters],
    states: np.ndarray, lr: float,
) -> tuple[MlpParameters, AdamState, float]:
    """One Adam step ascending the deterministic policy-gradient objective."""
    objective, grads = actor_objective_and_gradient(actor, critics, states)
    descent = GradientBundle([-g for g in grads.weight_grads],
                             [-g for g in grads.bias_grads],
                             -grads.input_gradient)
    actor, adam = adam_step(actor, descent, adam, lr)
    return actor, adam, objective


@dataclass
class TrainStepResult:
    critic_loss: float
    actor_objective: float


class DdpgAgent:
    """One actor-critic pair with target networks and Adam optimizers."""

    def __init__(self, state_dim: int, action_dim: int,
                 hp: DdpgHyperparameters | None = None,
                 widths=(64, 32), hidden_activation: str = "selu",
                 rng: np.random.Generator | None = None):
        rng = np.random.default_rng() if rng is None else rng
        self.hp = hp or DdpgHyperparameters()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.widths = tuple(widths)
        self.hidden_activation = hidden_activation
        self.actor = make_actor(state_dim, action_dim, widths, hidden_activation, rng)
        self.critic = make_critic(state_dim, action_dim, widths, hidden_activation, rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_adam = init_adam(self.actor)
        self.critic_adam = init_adam(self.critic)

    def action(self, state: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.actor, state)
        return out

    def train_step(self, buffer: ReplayBuffer,
                   rng: np.random.Generator) -> TrainStepResult | None:
        """One critic regression step, one actor ascent step, then soft
        target updates. Returns None (no-op) while the buffer is too small."""
        hp = self.hp
        if buffer.size < hp.batch_size:
            log.debug("buffer %d < batch %d, skipping train step", buffer.size, hp.batch_size)
            return None
        batch = buffer.sample(hp.batch_size, rng)
        y = bellman_targets(batch, self.target_actor, self.target_critic, hp.gamma)
        self.critic, self.critic_adam, critic_loss = critic_regression_step(
            self.critic, self.critic_adam, batch.states, batch.actions, y, hp.critic_lr)
        self.actor, self.actor_adam, actor_objective = actor_ascent_step(
            self.actor, self.actor_adam, [self.critic], batch.states, hp.actor_lr)
        self.target_actor = soft_update(self.target_actor, self.actor, hp.tau)
        self.target_critic = soft_update(self.target_critic, self.critic, hp.tau)
        return TrainStepResult(critic_loss, actor_objective)
