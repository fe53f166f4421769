import numpy as np
import pytest

import deadend as de
from deadend.errors import NonTabularData, ShapeMismatch
from deadend.mdp import Terminal
from deadend.solve import bellman_backup

from test_mdp import make_traj


def bias_only_qnet(values, kind, input_dim=4):
    """Network whose output is a fixed vector regardless of input."""
    net = de.QNetwork(input_dim, len(values), kind, hidden=4,
                      rng=np.random.default_rng(0))
    for layer in net.net.layers:
        layer.w[...] = 0.0
        layer.b[...] = 0.0
    net.net.layers[-1].b[...] = np.asarray(values, dtype=float)
    return net


class TestTabularQLearning:
    def test_positive_only_dataset_leaves_d_table_at_zero(self):
        trajs = [make_traj(Terminal.POSITIVE, 3, f"p{i}") for i in range(20)]
        q = de.tabular_q_learning(trajs, 4, 1, de.DualKind.D, sweeps=5)
        assert np.all(q.values == 0.0)

    def test_zero_learning_rate_keeps_initialization(self):
        trajs = [make_traj(Terminal.NEGATIVE, 3, f"n{i}") for i in range(5)]
        q = de.tabular_q_learning(trajs, 4, 1, de.DualKind.D, lr=0.0, sweeps=3)
        assert np.all(q.values == 0.0)

    def test_values_clamped_to_range_every_update(self, lifegate):
        trajs = de.rollout_behavior(
            lifegate, de.uniform_policy(lifegate), 500, seed=3, max_len=200
        )
        seen = []
        de.tabular_q_learning(
            lifegate and trajs, lifegate.n_states, lifegate.n_actions,
            de.DualKind.D, lr=0.5, sweeps=3, seed=0,
            sweep_callback=lambda i, q: seen.append(q),
        )
        for q in seen:
            assert q.min() >= -1.0 and q.max() <= 0.0

    def test_bellman_residual_trends_down_after_burn_in(self, lifegate):
        trajs = de.rollout_behavior(
            lifegate, de.uniform_policy(lifegate), 3000, seed=7, max_len=200
        )
        residuals = []

        def track(_, q):
            residuals.append(
                float(np.abs(bellman_backup(lifegate, de.DualKind.D, q) - q).max())
            )

        de.tabular_q_learning(
            trajs, lifegate.n_states, lifegate.n_actions, de.DualKind.D,
            sweeps=12, seed=1, visit_decay=True, sweep_callback=track,
        )
        # stochastic updates wiggle; demand a downward envelope after sweep 3
        assert all(b <= a + 0.01 for a, b in zip(residuals[3:], residuals[4:]))
        assert residuals[-1] < residuals[3]

    def test_obs_cohort_rejected(self):
        spec = de.CohortSpec(seed=0)
        g = de.generate_mdp(spec)
        emitter = de.emit_observations(g.mdp, spec)
        trajs = de.rollout_behavior(g.mdp, de.uniform_policy(g.mdp), 3, seed=0,
                                    emitter=emitter)
        with pytest.raises(NonTabularData):
            de.tabular_q_learning(trajs, g.mdp.n_states, g.mdp.n_actions, de.DualKind.D)


class TestDoubleQTargets:
    def test_target_reads_target_net_at_online_argmax(self):
        online = bias_only_qnet([-0.8, -0.1, -0.5], de.DualKind.D)  # argmax: 1
        target = bias_only_qnet([-0.0, -0.6, -0.2], de.DualKind.D)
        x_next = np.zeros((2, 4))
        rewards = np.array([0.0, -1.0])
        terminal = np.array([False, True])
        y = de.double_q_targets(online, target, rewards, terminal, x_next, de.DualKind.D)
        # non-terminal: r + target[argmax online] = 0 + (-0.6), never max(target) = 0
        assert y[0] == pytest.approx(-0.6)
        # terminal: bare reward
        assert y[1] == pytest.approx(-1.0)

    def test_targets_clamped_to_kind_range(self):
        online = bias_only_qnet([-1.0, -0.9], de.DualKind.D)
        target = bias_only_qnet([-0.9, -0.8], de.DualKind.D)
        y = de.double_q_targets(
            online, target, np.array([-1.0]), np.array([False]),
            np.zeros((1, 4)), de.DualKind.D,
        )
        assert y[0] == -1.0  # -1 + -0.8 clamps up to the range floor


@pytest.fixture(scope="module")
def small_cohort():
    spec = de.CohortSpec(n_states=20, n_actions=3, dead_end_fraction=0.2,
                         obs_dim=6, obs_noise_sd=0.05, seed=17)
    g = de.generate_mdp(spec)
    emitter = de.emit_observations(g.mdp, spec)
    trajs = de.rollout_behavior(g.mdp, de.uniform_policy(g.mdp), 1500,
                                seed=4, max_len=18, emitter=emitter)
    cfg = de.EncoderConfig(embed_dim=16, window=3, hidden=(32,), lr=2e-3,
                           epochs=10, batch=64)
    model, _ = de.train_sc(trajs[:1200], cfg, seed=2)
    return g, model.encoder, trajs


class TestFitDoubleQ:

    def test_separates_dead_entering_from_safe_pairs_held_out(self, small_cohort):
        g, encoder, trajs = small_cohort
        buffers = de.TransitionBuffers.build(trajs[:1200])
        cfg = de.DQNConfig(hidden=32, lr=1e-3, target_sync=250, updates=2500)
        net, curve = de.fit_double_q(buffers, encoder, cfg, de.DualKind.D, seed=0)
        assert len(curve) == 2500
        dead = g.truth.dead_ends
        danger = np.zeros(g.mdp.n_states)
        danger[list(dead)] = 1.0
        enter, safe = [], []
        for traj in trajs[1200:]:
            q = net.q_values(np.atleast_2d(encoder.encode_trajectory(traj)))
            for tr, row in zip(traj.transitions, q):
                mass = float(g.mdp.transition[tr.latent_state, tr.action] @ danger)
                if mass > 0.5:
                    enter.append(row[tr.action])
                elif mass == 0.0:
                    safe.append(row[tr.action])
        assert np.mean(enter) < np.mean(safe) - 0.1

    def test_no_negative_outcomes_keep_d_values_near_zero(self, small_cohort):
        g, encoder, trajs = small_cohort
        positives = [t for t in trajs[:600] if t.outcome == Terminal.POSITIVE]
        buffers = de.TransitionBuffers.build(positives)
        cfg = de.DQNConfig(hidden=32, lr=1e-3, target_sync=250, updates=800)
        with pytest.raises(de.errors.EmptyBuffer):
            de.fit_double_q(buffers, encoder, cfg, de.DualKind.D, seed=1)
        with pytest.warns(UserWarning, match="no negative"):
            net, _ = de.fit_double_q(buffers, encoder, cfg, de.DualKind.D, seed=1,
                                     fallback_to_main=True)
        emb = np.vstack([encoder.encode_trajectory(t) for t in positives[:50]])
        assert net.q_values(emb).min() >= -0.05

    def test_same_seed_bitwise_identical_weights(self, small_cohort):
        g, encoder, trajs = small_cohort
        buffers = de.TransitionBuffers.build(trajs[:300])
        cfg = de.DQNConfig(hidden=16, lr=1e-3, target_sync=100, updates=300)
        nets = [
            de.fit_double_q(buffers, encoder, cfg, de.DualKind.R, seed=33)[0]
            for _ in range(2)
        ]
        for a, b in zip(nets[0].parameters(), nets[1].parameters()):
            assert np.array_equal(a, b)


class TestQValues:
    def test_exact_lifegate_yellow_row_is_all_minus_one(self, layout, lifegate,
                                                        lifegate_solution):
        q_d, _, _, _ = lifegate_solution
        yellow = de.cells_of_kind(layout, "y")
        row = de.q_values(q_d, yellow[0])
        assert np.allclose(row, -1.0, atol=1e-6)

    def test_network_outputs_clamped_both_kinds(self):
        over = bias_only_qnet([1.2, 0.5], de.DualKind.R)
        assert np.array_equal(de.q_values(over, np.zeros(4)), [1.0, 0.5])
        stray = bias_only_qnet([0.3, -0.4], de.DualKind.D)
        assert np.array_equal(de.q_values(stray, np.zeros(4)), [0.0, -0.4])

    def test_dimension_checks(self, lifegate_solution):
        q_d, _, _, _ = lifegate_solution
        with pytest.raises(ShapeMismatch):
            de.q_values(q_d, np.zeros(3))
        with pytest.raises(ShapeMismatch):
            de.q_values(q_d, 10_000)
        net = bias_only_qnet([0.0, 0.0], de.DualKind.D)
        with pytest.raises(ShapeMismatch):
            de.q_values(net, np.zeros(9))
