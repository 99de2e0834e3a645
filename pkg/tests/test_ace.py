"""Ensemble selection and the ensemble-aware Bellman machinery."""

import numpy as np
import pytest

from acekit.ace import (
    AceTrainer,
    EnsemblePolicy,
    ace_bellman_target,
    ace_bellman_targets,
    make_ensemble,
    mean_critic_eval,
    propose_actions,
    score_action,
    select_action,
)
from acekit.ddpg import (
    Batch,
    DdpgAgent,
    DdpgHyperparameters,
    ReplayBuffer,
    Transition,
    bellman_target,
    make_actor,
    make_critic,
)
from acekit.numerics import MlpParameters, mlp_forward


def constant_actor(state_dim, values):
    """Actor whose output is tanh(bias) regardless of the state."""
    values = np.asarray(values, dtype=np.float64)
    w = np.zeros((len(values), state_dim))
    return MlpParameters([w], [np.arctanh(values)], output_activation="tanh")


def constant_critic(state_dim, action_dim, value):
    return MlpParameters([np.zeros((1, state_dim + action_dim))], [np.full(1, value)],
                         output_activation="linear")


def action_weighted_critic(state_dim, action_weights):
    """Critic scoring w . action, ignoring the state."""
    aw = np.asarray(action_weights, dtype=np.float64)
    w = np.concatenate([np.zeros(state_dim), aw])[None, :]
    return MlpParameters([w], [np.zeros(1)], output_activation="linear")


class TestProposeActions:
    def test_single_actor_is_plain_inference(self):
        rng = np.random.default_rng(0)
        actor = make_actor(3, 2, (4,), rng=rng)
        ens = make_ensemble([actor], [make_critic(3, 2, (4,), rng=rng)])
        state = rng.normal(size=3)
        props = propose_actions(ens, state)
        assert props.shape == (1, 2)
        np.testing.assert_array_equal(props[0], mlp_forward(actor, state)[0])

    def test_copies_of_one_actor_propose_identically(self):
        rng = np.random.default_rng(1)
        actor = make_actor(3, 2, (4,), rng=rng)
        ens = make_ensemble([actor] * 4, [make_critic(3, 2, (4,), rng=rng)])
        props = propose_actions(ens, rng.normal(size=3))
        for row in props[1:]:
            np.testing.assert_array_equal(row, props[0])

    def test_order_matches_actor_order(self):
        rng = np.random.default_rng(2)
        actors = [make_actor(3, 2, (4,), rng=rng) for _ in range(10)]
        ens = make_ensemble(actors, [make_critic(3, 2, (4,), rng=rng)])
        state = rng.normal(size=3)
        props = propose_actions(ens, state)
        assert props.shape == (10, 2)
        for j, actor in enumerate(actors):
            np.testing.assert_array_equal(props[j], mlp_forward(actor, state)[0])

    def test_proposals_within_bounds(self):
        rng = np.random.default_rng(3)
        actors = [make_actor(3, 2, (4,), rng=rng) for _ in range(5)]
        ens = make_ensemble(actors, [make_critic(3, 2, (4,), rng=rng)])
        props = propose_actions(ens, rng.normal(size=3) * 10)
        assert np.all(np.abs(props) <= 1.0)


class TestScoreAction:
    def test_single_critic_exact(self):
        rng = np.random.default_rng(4)
        critic = make_critic(2, 1, (4,), rng=rng)
        s, a = rng.normal(size=2), rng.uniform(-1, 1, size=1)
        q, _ = mlp_forward(critic, np.concatenate([s, a]))
        assert score_action([critic], s, a) == q[0]

    def test_two_critics_average(self):
        critics = [constant_critic(2, 1, 2.0), constant_critic(2, 1, 4.0)]
        assert score_action(critics, np.zeros(2), np.zeros(1)) == 3.0

    def test_constant_ensemble_average_is_constant(self):
        critics = [constant_critic(2, 1, -1.5)] * 7
        assert score_action(critics, np.ones(2), np.zeros(1)) == -1.5

    def test_no_critics_rejected(self):
        with pytest.raises(ValueError):
            score_action([], np.zeros(2), np.zeros(1))


class TestSelectAction:
    def test_argmax_picks_highest_score(self):
        actors = [constant_actor(1, [0.31]), constant_actor(1, [0.20]),
                  constant_actor(1, [0.54])]
        critic = action_weighted_critic(1, [10.0])  # scores ~ [3.1, 2.0, 5.4]
        ens = make_ensemble(actors, [critic])
        action, trace = select_action(ens, np.zeros(1))
        assert trace.chosen_index == 2
        assert trace.chosen_score == trace.scores[2]
        np.testing.assert_array_equal(action, trace.proposed_actions[2])

    def test_exact_tie_breaks_to_lowest_index(self):
        actors = [constant_actor(1, [0.5]), constant_actor(1, [0.5]),
                  constant_actor(1, [-0.5])]
        ens = make_ensemble(actors, [action_weighted_critic(1, [1.0])])
        _, trace = select_action(ens, np.zeros(1))
        assert trace.chosen_index == 0

    def test_passthrough_bit_matches_plain_ddpg(self):
        rng = np.random.default_rng(5)
        actor = make_actor(4, 2, (6,), rng=rng)
        ens = make_ensemble([actor], [])
        assert ens.selection_mode == "single_actor_passthrough"
        for _ in range(50):
            state = rng.normal(size=4)
            chosen, trace = select_action(ens, state)
            np.testing.assert_array_equal(chosen, mlp_forward(actor, state)[0])
            assert trace.chosen_index == 0 and trace.scores is None

    def test_identical_actors_choice_independent_of_critics(self):
        rng = np.random.default_rng(6)
        actor = make_actor(3, 2, (4,), rng=rng)
        state = rng.normal(size=3)
        for critic_seed in range(3):
            crng = np.random.default_rng(critic_seed)
            ens = make_ensemble([actor] * 5, [make_critic(3, 2, (4,), rng=crng)])
            action, _ = select_action(ens, state)
            np.testing.assert_array_equal(action, mlp_forward(actor, state)[0])

    def test_argmax_invariant_under_increasing_transform(self):
        # scaling the linear output layer by a > 0 and shifting its bias is a
        # strictly increasing transform of every critic score
        rng = np.random.default_rng(7)
        actors = [make_actor(3, 2, (4,), rng=rng) for _ in range(6)]
        critics = [make_critic(3, 2, (4,), rng=rng) for _ in range(3)]
        ens = make_ensemble(actors, critics)
        for a, c in ((2.0, 0.0), (0.5, -3.0), (10.0, 7.0)):
            transformed = []
            for q in critics:
                t = q.copy()
                t.weights[-1] = t.weights[-1] * a
                t.biases[-1] = t.biases[-1] * a + c
                transformed.append(t)
            ens2 = make_ensemble(actors, transformed)
            for _ in range(20):
                state = rng.normal(size=3)
                _, tr1 = select_action(ens, state)
                _, tr2 = select_action(ens2, state)
                assert tr1.chosen_index == tr2.chosen_index

    def test_adding_an_actor_never_decreases_chosen_score(self):
        rng = np.random.default_rng(8)
        actors = [make_actor(3, 2, (4,), rng=rng) for _ in range(5)]
        critics = [make_critic(3, 2, (4,), rng=rng)]
        for _ in range(20):
            state = rng.normal(size=3)
            prev = None
            for n in range(1, 6):
                _, trace = select_action(make_ensemble(actors[:n], critics), state)
                if prev is not None:
                    assert trace.chosen_score >= prev
                prev = trace.chosen_score

    def test_chosen_score_equals_explicit_max(self):
        rng = np.random.default_rng(9)
        for n in range(1, 5):
            actors = [make_actor(2, 1, (3,), rng=rng) for _ in range(n)]
            critics = [make_critic(2, 1, (3,), rng=rng) for _ in range(n)]
            ens = make_ensemble(actors, critics)
            state = rng.normal(size=2)
            _, trace = select_action(ens, state)
            explicit = max(score_action(critics, state, mlp_forward(a, state)[0])
                           for a in actors)
            assert trace.chosen_score == explicit


class TestEnsembleValidation:
    def test_criticless_multi_actor_rejected(self):
        rng = np.random.default_rng(10)
        actors = [make_actor(2, 1, (3,), rng=rng) for _ in range(2)]
        with pytest.raises(ValueError):
            make_ensemble(actors, [])

    def test_actor_dim_mismatch_rejected(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ValueError):
            make_ensemble([make_actor(2, 1, (3,), rng=rng),
                           make_actor(3, 1, (3,), rng=rng)],
                          [make_critic(2, 1, (3,), rng=rng)])

    def test_critic_dim_mismatch_rejected(self):
        rng = np.random.default_rng(12)
        with pytest.raises(ValueError):
            make_ensemble([make_actor(2, 1, (3,), rng=rng)],
                          [make_critic(5, 2, (3,), rng=rng)])

    def test_unknown_mode_rejected(self):
        rng = np.random.default_rng(13)
        with pytest.raises(ValueError):
            EnsemblePolicy([make_actor(2, 1, (3,), rng=rng)], [], "vote")


class TestAceBellmanTarget:
    def test_cited_arithmetic_two_actors(self):
        actors = [constant_actor(2, [0.1]), constant_actor(2, [0.9])]

        def eval_fn(state, action):
            return 5.0 if action[0] < 0.5 else 7.0

        t = Transition(np.zeros(2), np.zeros(1), 1.0, np.zeros(2), False)
        y = ace_bellman_target(t, actors, eval_fn, 0.96)
        assert y == pytest.approx(7.72, rel=1e-12)

    def test_single_actor_reduces_to_bellman_target(self):
        rng = np.random.default_rng(14)
        actor = make_actor(3, 2, (4,), rng=rng)
        critic = make_critic(3, 2, (4,), rng=rng)
        for _ in range(100):
            t = Transition(rng.normal(size=3), rng.uniform(-1, 1, size=2),
                           float(rng.normal()), rng.normal(size=3),
                           bool(rng.integers(2)))
            y_ace = ace_bellman_target(t, [actor], mean_critic_eval([critic]), 0.96)
            y_ddpg = bellman_target(t, actor, critic, 0.96)
            assert y_ace == y_ddpg  # bit-identical

    def test_dominates_any_single_member(self):
        rng = np.random.default_rng(15)
        actors = [make_actor(3, 1, (4,), rng=rng) for _ in range(4)]
        critic = make_critic(3, 1, (4,), rng=rng)
        ev = mean_critic_eval([critic])
        for _ in range(25):
            t = Transition(rng.normal(size=3), rng.uniform(-1, 1, size=1),
                           float(rng.normal()), rng.normal(size=3), False)
            y = ace_bellman_target(t, actors, ev, 0.96)
            for a in actors:
                assert y >= ace_bellman_target(t, [a], ev, 0.96)

    def test_batched_matches_brute_force(self):
        rng = np.random.default_rng(16)
        for n in (1, 2, 3, 4):
            actors = [make_actor(2, 1, (3,), rng=rng) for _ in range(n)]
            critics = [make_critic(2, 1, (3,), rng=rng) for _ in range(n)]
            ts = [Transition(rng.normal(size=2), rng.uniform(-1, 1, size=1),
                             float(rng.normal()), rng.normal(size=2),
                             bool(rng.integers(2))) for _ in range(8)]
            batch = Batch(np.stack([t.state for t in ts]),
                          np.stack([t.action for t in ts]),
                          np.array([t.reward for t in ts]),
                          np.stack([t.next_state for t in ts]),
                          np.array([float(t.terminal) for t in ts]))
            ys = ace_bellman_targets(batch, actors, critics, 0.96)
            for i, t in enumerate(ts):
                # explicit max over per-actor mean critic values
                best = -np.inf
                for a in actors:
                    mu, _ = mlp_forward(a, t.next_state)
                    val = score_action(critics, t.next_state, mu)
                    best = val if val > best else best
                expected = t.reward + 0.96 * (0.0 if t.terminal else 1.0) * best
                assert ys[i] == pytest.approx(expected, abs=1e-12)


class TestAceTrainer:
    def fill(self, buf, rng, n, sd, ad):
        for _ in range(n):
            buf.store(Transition(rng.normal(size=sd), rng.uniform(-1, 1, size=ad),
                                 float(rng.normal()), rng.normal(size=sd), False))

    def test_reduces_to_ddpg_for_single_pair(self):
        hp = DdpgHyperparameters(batch_size=8, warmup_steps=0)
        agent = DdpgAgent(2, 1, hp, widths=(6,), rng=np.random.default_rng(17))
        trainer = AceTrainer(2, 1, 1, 1, hp, member_widths=[(6,)],
                             rng=np.random.default_rng(99))
        trainer.actors[0] = agent.actor.copy()
        trainer.critics[0] = agent.critic.copy()
        trainer.target_actors[0] = agent.target_actor.copy()
        trainer.target_critics[0] = agent.target_critic.copy()
        from acekit.numerics import init_adam
        trainer.actor_adams[0] = init_adam(trainer.actors[0])
        trainer.critic_adams[0] = init_adam(trainer.critics[0])
        buf = ReplayBuffer(64, 2, 1)
        self.fill(buf, np.random.default_rng(18), 32, 2, 1)
        rng_a = np.random.default_rng(19)
        rng_b = np.random.default_rng(19)
        for _ in range(5):
            ra = agent.train_step(buf, rng_a)
            rb = trainer.train_step(buf, rng_b)
            assert ra.critic_loss == rb.critic_losses[0]
            assert ra.actor_objective == rb.actor_objectives[0]
        for wa, wb in zip(agent.actor.weights, trainer.actors[0].weights):
            np.testing.assert_array_equal(wa, wb)
        for wa, wb in zip(agent.target_critic.weights, trainer.target_critics[0].weights):
            np.testing.assert_array_equal(wa, wb)

    def test_every_actor_updated_each_step(self):
        trainer = AceTrainer(2, 1, 3, 3, DdpgHyperparameters(batch_size=8),
                             rng=np.random.default_rng(20))
        buf = ReplayBuffer(64, 2, 1)
        self.fill(buf, np.random.default_rng(21), 32, 2, 1)
        before = [a.copy() for a in trainer.actors]
        result = trainer.train_step(buf, np.random.default_rng(22))
        assert len(result.actor_objectives) == 3
        for old, new in zip(before, trainer.actors):
            changed = any(np.any(ow != nw) for ow, nw in zip(old.weights, new.weights))
            assert changed

    def test_insufficient_buffer_is_noop(self):
        trainer = AceTrainer(2, 1, 2, 2, DdpgHyperparameters(batch_size=64),
                             rng=np.random.default_rng(23))
        buf = ReplayBuffer(64, 2, 1)
        self.fill(buf, np.random.default_rng(24), 8, 2, 1)
        assert trainer.train_step(buf, np.random.default_rng(25)) is None

    def test_chosen_index_distribution_reproducible(self):
        def histogram(seed):
            trainer = AceTrainer(3, 2, 4, 4, DdpgHyperparameters(batch_size=8),
                                 rng=np.random.default_rng(seed))
            buf = ReplayBuffer(128, 3, 2)
            self.fill(buf, np.random.default_rng(26), 64, 3, 2)
            for _ in range(5):
                trainer.train_step(buf, np.random.default_rng(27))
            ens = trainer.policy()
            srng = np.random.default_rng(28)
            counts = np.zeros(4, dtype=int)
            for _ in range(50):
                _, trace = select_action(ens, srng.normal(size=3))
                counts[trace.chosen_index] += 1
            return counts

        np.testing.assert_array_equal(histogram(29), histogram(29))

    def test_heterogeneous_widths(self):
        trainer = AceTrainer(2, 1, 3, 3, DdpgHyperparameters(batch_size=4),
                             member_widths=[(4,), (6,), (8,)],
                             rng=np.random.default_rng(30))
        widths = [a.weights[0].shape[0] for a in trainer.actors]
        assert widths == [4, 6, 8]
        buf = ReplayBuffer(64, 2, 1)
        self.fill(buf, np.random.default_rng(31), 16, 2, 1)
        assert trainer.train_step(buf, np.random.default_rng(32)) is not None
