import math

import numpy as np
import pytest

import deadend as de
from deadend.errors import NonTabularData, ShapeMismatch
from deadend.mdp import TabularMDP, Terminal, Trajectory, Transition


def deterministic_machine(seed=0, n_states=8, n_actions=3):
    """Fully deterministic dynamics so next-observation error can reach zero."""
    rng = np.random.default_rng(seed)
    t = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states - 2):
        for a in range(n_actions):
            if rng.random() < 0.35:
                nxt = n_states - 2 if rng.random() < 0.5 else n_states - 1
            else:
                nxt = int(rng.integers(0, n_states))
            t[s, a, nxt] = 1.0
    t[n_states - 2, :, n_states - 2] = 1.0
    t[n_states - 1, :, n_states - 1] = 1.0
    kinds = np.zeros(n_states, dtype=np.int8)
    kinds[n_states - 2] = Terminal.NEGATIVE
    kinds[n_states - 1] = Terminal.POSITIVE
    return TabularMDP(n_states, n_actions, t, kinds)


def constant_obs_cohort(n=40, dim=4, value=0.7):
    out = []
    for i in range(n):
        transitions = []
        for k in range(3):
            last = k == 2
            transitions.append(
                Transition(
                    np.full(dim, value), k % 2, 0.0,
                    None if last else np.full(dim, value),
                    Terminal.POSITIVE if last else Terminal.NONE, k,
                )
            )
        out.append(Trajectory(f"c{i}", transitions, Terminal.POSITIVE))
    return out


@pytest.fixture(scope="module")
def det_cohort():
    mdp = deterministic_machine()
    spec = de.CohortSpec(n_states=8, n_actions=3, obs_dim=6, obs_noise_sd=0.0, seed=3)
    emitter = de.emit_observations(mdp, spec)
    trajs = de.rollout_behavior(
        mdp, de.uniform_policy(mdp), 400, seed=1, max_len=18, emitter=emitter
    )
    return trajs[:320], trajs[320:]


class TestWindows:
    def test_episode_start_padding_is_zero_obs_null_action(self, det_cohort):
        train, _ = det_cohort
        traj = train[0]
        w = de.build_window(traj, 0, window=3, obs_dim=6, n_actions=3)
        slot = 6 + 3 + 1
        # two padded slots: zero observation, one-hot on the null-action index
        for k in range(2):
            assert np.all(w[k * slot : k * slot + 6] == 0.0)
            assert w[k * slot + 6 + 3] == 1.0
        # the real slot carries the first observation and the null prev action
        assert np.allclose(w[2 * slot : 2 * slot + 6], traj.transitions[0].state_or_obs)
        assert w[2 * slot + 6 + 3] == 1.0

    def test_prev_action_occupies_its_one_hot_slot(self, det_cohort):
        train, _ = det_cohort
        traj = next(t for t in train if len(t) >= 2)
        w = de.build_window(traj, 1, window=2, obs_dim=6, n_actions=3)
        slot = 6 + 3 + 1
        a0 = traj.transitions[0].action
        assert w[slot + 6 + a0] == 1.0

    def test_tabular_states_rejected(self):
        tr = Transition(0, 0, 0.0, None, Terminal.POSITIVE, 0)
        traj = Trajectory("t", [tr], Terminal.POSITIVE)
        with pytest.raises(NonTabularData):
            de.build_window(traj, 0, window=2, obs_dim=3, n_actions=2)


class TestEncode:
    def test_same_window_same_embedding(self, det_cohort):
        train, _ = det_cohort
        cfg = de.EncoderConfig(embed_dim=8, window=2, hidden=(16,), epochs=1)
        enc = de.HistoryEncoder(cfg, obs_dim=6, n_actions=3, rng=np.random.default_rng(0))
        w = enc.windows(train[0])[0]
        assert np.array_equal(enc.encode(w), enc.encode(w.copy()))

    def test_one_hot_bypass_matches_state_indices(self):
        enc = de.OneHotEncoder(5)
        assert np.array_equal(enc.encode(3), np.eye(5)[3])
        batch = enc.encode(np.array([0, 4]))
        assert np.array_equal(batch, np.eye(5)[[0, 4]])
        with pytest.raises(ShapeMismatch):
            enc.encode(np.array([7]))

    def test_wrong_window_width_rejected(self):
        cfg = de.EncoderConfig(embed_dim=4, window=2, hidden=(8,), epochs=1)
        enc = de.HistoryEncoder(cfg, obs_dim=3, n_actions=2, rng=np.random.default_rng(0))
        with pytest.raises(ShapeMismatch):
            enc.encode(np.zeros(7))


class TestTrainSC:
    def test_deterministic_dynamics_are_exactly_learnable(self, det_cohort):
        train, val = det_cohort
        cfg = de.EncoderConfig(
            embed_dim=16, window=2, hidden=(128,), lr=3e-3, epochs=400, batch=64
        )
        model, curve = de.train_sc(train, cfg, seed=5)
        assert curve[-1] < curve[0]
        assert de.validation_mse(model, val) < 1e-3
        assert model.identity_gap <= 1e-9

    def test_constant_observations_reach_the_constant_predictor_floor(self):
        cohort = constant_obs_cohort(dim=4)
        cfg = de.EncoderConfig(embed_dim=8, window=2, hidden=(16,), lr=1e-2,
                               epochs=40, batch=64)
        model, curve = de.train_sc(cohort, cfg, seed=0)
        floor = 0.5 * 4 * math.log(2 * math.pi)
        assert curve[-1] == pytest.approx(floor, abs=1e-3)
        # descends toward the floor; Adam wiggles near convergence
        assert all(b <= a + 5e-3 for a, b in zip(curve[5:], curve[6:]))
        assert curve[-1] <= curve[5]

    def test_histories_differing_in_last_action_embed_apart(self, det_cohort):
        train, _ = det_cohort
        cfg = de.EncoderConfig(embed_dim=16, window=2, hidden=(64,), lr=3e-3,
                               epochs=50, batch=64)
        model, _ = de.train_sc(train, cfg, seed=6)
        traj = next(t for t in train if len(t) >= 2)
        w = de.build_window(traj, 1, 2, 6, 3)
        w2 = w.copy()
        slot = 6 + 3 + 1
        a0 = traj.transitions[0].action
        w2[slot + 6 + a0] = 0.0
        w2[slot + 6 + ((a0 + 1) % 3)] = 1.0
        gap = np.abs(model.encoder.encode(w) - model.encoder.encode(w2)).max()
        assert gap > 1e-6

    def test_nll_mse_identity_holds_per_batch(self, det_cohort):
        train, _ = det_cohort
        cfg = de.EncoderConfig(embed_dim=8, window=2, hidden=(16,), epochs=1)
        rng = np.random.default_rng(0)
        enc = de.HistoryEncoder(cfg, obs_dim=6, n_actions=3, rng=rng)
        from deadend.net import MLP
        model = de.SCModel(encoder=enc, decoder=MLP((8 + 3, 16, 6), rng))
        traj = train[0]
        windows = enc.windows(traj)[:1]
        nll, _ = model.loss_and_grads((windows, np.array([0]),
                                       np.asarray([traj.transitions[0].state_or_obs])))
        pred = model.predict_next(windows, np.array([0]))
        err = float(((pred - traj.transitions[0].state_or_obs) ** 2).sum())
        assert nll == pytest.approx(0.5 * 6 * math.log(2 * math.pi) + 0.5 * err, abs=1e-9)
        assert model.identity_gap <= 1e-9

    def test_tabular_cohort_rejected(self):
        tr = Transition(0, 0, 0.0, None, Terminal.POSITIVE, 0)
        trajs = [Trajectory("t", [tr], Terminal.POSITIVE)]
        with pytest.raises(NonTabularData):
            de.train_sc(trajs, de.EncoderConfig(epochs=1), seed=0)


class TestCheckpoint:
    def test_encoder_checkpoint_roundtrip(self, det_cohort, tmp_path):
        train, _ = det_cohort
        cfg = de.EncoderConfig(embed_dim=8, window=2, hidden=(16,), epochs=2)
        model, _ = de.train_sc(train, cfg, seed=1)
        path = tmp_path / "encoder.json"
        model.encoder.save(path)
        again = de.HistoryEncoder.load(path)
        w = model.encoder.windows(train[0])
        assert np.array_equal(model.encoder.encode(w), again.encode(w))
        assert again.config == model.encoder.config
