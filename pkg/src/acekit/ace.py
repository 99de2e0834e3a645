"""Ensemble action selection and joint ensemble training.

At inference, every actor proposes an action for the current state, each
proposal is scored by the average of the critics, and the highest-scoring
proposal is executed (ties go to the lowest actor index). Training shares
one replay buffer: the critics regress to a Bellman target that bootstraps
through the best proposal at the next state, and every actor takes a
policy-gradient step whether or not its proposal was selected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ddpg import (
    Batch,
    DdpgHyperparameters,
    ReplayBuffer,
    Transition,
    actor_ascent_step,
    critic_regression_step,
    make_actor,
    make_critic,
    soft_update,
)
from .numerics import MlpParameters, init_adam, mlp_forward

SELECTION_MODES = ("argmax_mean_critic", "single_actor_passthrough")


@dataclass
class EnsemblePolicy:
    """N actor parameter sets plus M critic parameter sets with selection
    logic. M = 0 (no scoring, plain single-actor inference) is allowed only
    for N = 1."""

    actors: list[MlpParameters]
    critics: list[MlpParameters]
    selection_mode: str = "argmax_mean_critic"

    def __post_init__(self):
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode: {self.selection_mode!r}")
        n, m = len(self.actors), len(self.critics)
        if n < 1:
            raise ValueError("need at least one actor")
        if m == 0 and n != 1:
            raise ValueError("critic-less ensembles are only allowed with a single actor")
        if m == 0 and self.selection_mode == "argmax_mean_critic":
            raise ValueError("argmax_mean_critic requires at least one critic")
        state_dim = self.actors[0].input_dim
        action_dim = self.actors[0].output_dim
        for j, a in enumerate(self.actors):
            if a.input_dim != state_dim or a.output_dim != action_dim:
                raise ValueError(f"actor {j} dims ({a.input_dim}->{a.output_dim}) "
                                 f"differ from actor 0 ({state_dim}->{action_dim})")
        for k, c in enumerate(self.critics):
            if c.input_dim != state_dim + action_dim or c.output_dim != 1:
                raise ValueError(f"critic {k} must map {state_dim + action_dim} -> 1, "
                                 f"got {c.input_dim} -> {c.output_dim}")

    @property
    def n_actors(self) -> int:
        return len(self.actors)

    @property
    def n_critics(self) -> int:
        return len(self.critics)

    @property
    def state_dim(self) -> int:
        return self.actors[0].input_dim

    @property
    def action_dim(self) -> int:
        return self.actors[0].output_dim


def make_ensemble(actors: Sequence[MlpParameters],
                  critics: Sequence[MlpParameters]) -> EnsemblePolicy:
    """Build an EnsemblePolicy, choosing the selection mode from the counts."""
    mode = "single_actor_passthrough" if len(critics) == 0 else "argmax_mean_critic"
    return EnsemblePolicy(list(actors), list(critics), mode)


@dataclass
class SelectionTrace:
    """Diagnostic record of one selection: what was proposed, how each
    proposal scored, and which index won. Scores are None in passthrough
    mode (no critics)."""

    proposed_actions: np.ndarray
    scores: np.ndarray | None
    chosen_index: int
    chosen_score: float | None


def propose_actions(ens: EnsemblePolicy, state: np.ndarray) -> np.ndarray:
    """Each actor's deterministic proposal, in actor order: (N, action_dim)."""
    return np.stack([mlp_forward(a, state)[0] for a in ens.actors])


def score_action(critics: Sequence[MlpParameters], state: np.ndarray,
                 action: np.ndarray) -> float:
    """Average critic value of (state, action)."""
    if len(critics) == 0:
        raise ValueError("cannot score an action without critics")
    x = np.concatenate([state, action])
    total = 0.0
    for c in critics:
        q, _ = mlp_forward(c, x)
        total += float(q[0])
    return total / len(critics)


def select_action(ens: EnsemblePolicy, state: np.ndarray) -> tuple[np.ndarray, SelectionTrace]:
    """Pick the proposal with the highest mean critic score.

    Deterministic; exact ties resolve to the lowest actor index. In
    passthrough mode the single actor's action is returned unscored, which
    makes A1C0 inference identical to plain DDPG.
    """
    if ens.selection_mode == "single_actor_passthrough":
        action, _ = mlp_forward(ens.actors[0], state)
        return action, SelectionTrace(action[None, :], None, 0, None)
    proposals = propose_actions(ens, state)
    scores = np.array([score_action(ens.critics, state, a) for a in proposals])
    chosen = int(np.argmax(scores))
    return proposals[chosen], SelectionTrace(proposals, scores, chosen, float(scores[chosen]))


def ace_bellman_target(t: Transition, actors: Sequence[MlpParameters],
                       target_critic_eval: Callable[[np.ndarray, np.ndarray], float],
                       gamma: float) -> float:
    """Bellman target that bootstraps through the best next-state proposal:
    y = r + gamma * (1 - terminal) * max_j Q(s', mu_j(s'))."""
    if len(actors) < 1:
        raise ValueError("need at least one actor")
    next_state = np.asarray(t.next_state, dtype=np.float64)
    best = -np.inf
    for a in actors:
        mu, _ = mlp_forward(a, next_state)
        q = float(target_critic_eval(next_state, mu))
        if q > best:
            best = q
    return float(t.reward + gamma * (0.0 if t.terminal else 1.0) * best)


def mean_critic_eval(critics: Sequence[MlpParameters]) -> Callable[[np.ndarray, np.ndarray], float]:
    """Adapter: a (state, action) -> mean critic value callable."""
    return lambda state, action: score_action(critics, state, action)


def ace_bellman_targets(batch: Batch, target_actors: Sequence[MlpParameters],
                        target_critics: Sequence[MlpParameters],
                        gamma: float) -> np.ndarray:
    """Batched ace_bellman_target using mean target-critic scoring."""
    scores = np.full((len(batch), len(target_actors)), -np.inf)
    for j, actor in enumerate(target_actors):
        mu, _ = mlp_forward(actor, batch.next_states)
        x = np.concatenate([batch.next_states, mu], axis=1)
        acc = np.zeros(len(batch))
        for critic in target_critics:
            q, _ = mlp_forward(critic, x)
            acc += q[:, 0]
        scores[:, j] = acc / len(target_critics)
    best = scores.max(axis=1)
    return batch.rewards + gamma * (1.0 - batch.terminals) * best


@dataclass
class AceStepResult:
    critic_losses: list[float]
    actor_objectives: list[float]


class AceTrainer:
    """Joint training of N actors and M critics against one replay buffer.

    Every actor is updated at every step against the mean of the online
    critics, regardless of whose proposal drove the behavior policy; every
    critic regresses to the shared ensemble-aware target. With N = M = 1
    each train step is operation-for-operation the plain DDPG train step.
    """

    def __init__(self, state_dim: int, action_dim: int, n_actors: int, n_critics: int,
                 hp: DdpgHyperparameters | None = None,
                 member_widths: Sequence[Sequence[int]] | None = None,
                 hidden_activation: str = "selu",
                 rng: np.random.Generator | None = None):
        if n_actors < 1:
            raise ValueError("need at least one actor")
        if n_critics < 1:
            raise ValueError("joint ensemble training needs at least one critic")
        rng = np.random.default_rng() if rng is None else rng
        self.hp = hp or DdpgHyperparameters()
        self.state_dim = state_dim
        self.action_dim = action_dim
        widths_of = lambda i: tuple(member_widths[i % len(member_widths)]) if member_widths else (64, 32)
        self.actors = [make_actor(state_dim, action_dim, widths_of(j), hidden_activation, rng)
                       for j in range(n_actors)]
        self.critics = [make_critic(state_dim, action_dim, widths_of(m), hidden_activation, rng)
                        for m in range(n_critics)]
        self.target_actors = [a.copy() for a in self.actors]
        self.target_critics = [c.copy() for c in self.critics]
        self.actor_adams = [init_adam(a) for a in self.actors]
        self.critic_adams = [init_adam(c) for c in self.critics]

    def policy(self) -> EnsemblePolicy:
        """Current online networks as an inference-time ensemble."""
        return make_ensemble(self.actors, self.critics)

    def behavior_action(self, state: np.ndarray, noise, rng: np.random.Generator) -> np.ndarray:
        """Ensemble-selected action with exploration noise added after
        selection, clipped back into bounds."""
        action, _ = select_action(self.policy(), state)
        return np.clip(action + noise.step(rng), -1.0, 1.0)

    def train_step(self, buffer: ReplayBuffer,
                   rng: np.random.Generator) -> AceStepResult | None:
        hp = self.hp
        if buffer.size < hp.batch_size:
            return None
        batch = buffer.sample(hp.batch_size, rng)
        y = ace_bellman_targets(batch, self.target_actors, self.target_critics, hp.gamma)
        critic_losses = []
        for m in range(len(self.critics)):
            self.critics[m], self.critic_adams[m], loss = critic_regression_step(
                self.critics[m], self.critic_adams[m],
                batch.states, batch.actions, y, hp.critic_lr)
            critic_losses.append(loss)
        actor_objectives = []
        for j in range(len(self.actors)):
            self.actors[j], self.actor_adams[j], obj = actor_ascent_step(
                self.actors[j], self.actor_adams[j], self.critics,
                batch.states, hp.actor_lr)
            actor_objectives.append(obj)
        for m in range(len(self.critics)):
            self.target_critics[m] = soft_update(self.target_critics[m], self.critics[m], hp.tau)
        for j in range(len(self.actors)):
            self.target_actors[j] = soft_update(self.target_actors[j], self.actors[j], hp.tau)
        return AceStepResult(critic_losses, actor_objectives)
