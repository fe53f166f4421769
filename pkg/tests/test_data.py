import numpy as np
import pytest

import deadend as de
from deadend.errors import EmptyBuffer, EmptyCohort, ParseError
from deadend.mdp import Terminal

from test_mdp import make_traj


def cohort_of(n_pos: int, n_neg: int, length: int = 3) -> list[de.Trajectory]:
    out = [make_traj(Terminal.POSITIVE, length, f"p{i}") for i in range(n_pos)]
    out += [make_traj(Terminal.NEGATIVE, length, f"n{i}") for i in range(n_neg)]
    return out


class TestSplit:
    def test_75_5_20_with_stratified_negatives(self):
        trajs = cohort_of(900, 100)
        train, val, test = de.split(trajs, de.SplitSpec(seed=0))
        assert (len(train), len(val), len(test)) == (750, 50, 200)
        neg = lambda group: sum(1 for t in group if t.outcome == Terminal.NEGATIVE)
        assert abs(neg(train) - 75) <= 1
        assert abs(neg(val) - 5) <= 1
        assert abs(neg(test) - 20) <= 1

    def test_partition_is_exact_and_disjoint(self):
        trajs = cohort_of(37, 13)
        train, val, test = de.split(trajs, de.SplitSpec(seed=5))
        ids = [t.id for t in train + val + test]
        assert sorted(ids) == sorted(t.id for t in trajs)
        assert len(set(ids)) == len(ids)

    def test_same_seed_same_membership(self):
        trajs = cohort_of(50, 10)
        a = de.split(trajs, de.SplitSpec(seed=9))
        b = de.split(trajs, de.SplitSpec(seed=9))
        assert [[t.id for t in g] for g in a] == [[t.id for t in g] for g in b]

    def test_single_trajectory_lands_in_train_with_warning(self):
        with pytest.warns(UserWarning, match="degenerate"):
            train, val, test = de.split(cohort_of(1, 0), de.SplitSpec(seed=0))
        assert len(train) == 1 and not val and not test

    def test_empty_cohort_rejected(self):
        with pytest.raises(EmptyCohort):
            de.split([], de.SplitSpec())

    def test_bad_fractions_rejected(self):
        with pytest.raises(ValueError):
            de.SplitSpec(train=0.8, val=0.1, test=0.2)


class TestStratifiedMinibatch:
    def test_batch_is_62_plus_2(self):
        buffers = de.TransitionBuffers.build(cohort_of(10, 3))
        rng = np.random.default_rng(0)
        batch = de.stratified_minibatch(buffers, rng)
        assert len(batch) == 64
        tail = set(buffers.terminal_negative)
        assert all(entry in tail for entry in batch[62:])
        # last transitions of negative trajectories only
        for ti, si in batch[62:]:
            traj = buffers.trajectories[ti]
            assert traj.outcome == Terminal.NEGATIVE
            assert si == len(traj.transitions) - 1

    def test_single_negative_fills_both_slots(self):
        buffers = de.TransitionBuffers.build(cohort_of(5, 1))
        batch = de.stratified_minibatch(buffers, np.random.default_rng(1))
        assert batch[62] == batch[63] == buffers.terminal_negative[0]

    def test_fixed_stream_reproduces_batches(self):
        buffers = de.TransitionBuffers.build(cohort_of(10, 3))
        seqs = []
        for _ in range(2):
            rng = np.random.default_rng(42)
            seqs.append([de.stratified_minibatch(buffers, rng) for _ in range(5)])
        assert seqs[0] == seqs[1]

    def test_empty_negative_buffer_fails_unless_fallback(self):
        buffers = de.TransitionBuffers.build(cohort_of(5, 0))
        with pytest.raises(EmptyBuffer):
            de.stratified_minibatch(buffers, np.random.default_rng(0))
        with pytest.warns(UserWarning, match="no negative outcomes"):
            batch = de.stratified_minibatch(
                buffers, np.random.default_rng(0), fallback_to_main=True
            )
        assert len(batch) == 64

    def test_buffer_invariant_negatives_present(self):
        buffers = de.TransitionBuffers.build(cohort_of(4, 2, length=2))
        assert len(buffers.main) == 12
        assert len(buffers.terminal_negative) == 2


class TestJsonl:
    def test_tabular_roundtrip_lossless(self, tmp_path):
        trajs = cohort_of(3, 2)
        path = tmp_path / "t.jsonl"
        de.save_jsonl(path, trajs)
        again = de.load_jsonl(path)
        assert again == trajs

    def test_observation_roundtrip_lossless(self, tmp_path):
        spec = de.CohortSpec(n_states=10, n_actions=2, seed=0)
        g = de.generate_mdp(spec)
        emitter = de.emit_observations(g.mdp, spec)
        trajs = de.rollout_behavior(
            g.mdp, de.uniform_policy(g.mdp), 20, seed=1, emitter=emitter
        )
        path = tmp_path / "obs.jsonl"
        de.save_jsonl(path, trajs)
        assert de.load_jsonl(path) == trajs

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        good = (
            '{"id": "a", "outcome": "positive", "steps": '
            '[{"state": 0, "action": 0, "reward": 0.0, "terminal": "positive"}]}'
        )
        path.write_text(good + "\n" + good + "\n{broken\n")
        with pytest.raises(ParseError) as err:
            de.load_jsonl(path)
        assert err.value.line == 3

    def test_empty_file_is_empty_cohort(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert de.load_jsonl(path) == []
