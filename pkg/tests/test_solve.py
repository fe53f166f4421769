import numpy as np
import pytest

import deadend as de
from deadend.errors import NonTerminatingRegion, StaleInputs
from deadend.mdp import Terminal
from deadend.solve import bellman_backup

from conftest import chain_mdp, tiny_random_mdp, two_outcome_mdp
import oracles


def self_loop_trap_mdp() -> de.TabularMDP:
    """State 0 can loop forever (action 0) or die (action 1); formally valid
    but termination is not almost sure."""
    t = np.zeros((2, 2, 2))
    t[0, 0, 0] = 1.0
    t[0, 1, 1] = 1.0
    t[1, :, 1] = 1.0
    return de.TabularMDP(2, 2, t, np.array([0, 2], dtype=np.int8))


class TestValueIteration:
    def test_two_step_chain_hits_minus_one(self):
        q = de.value_iteration(chain_mdp(2), de.DualKind.D, tol=1e-12)
        # hand evaluation: both chain states reach death with certainty
        assert q.values[0, 0] == pytest.approx(-1.0, abs=1e-9)
        assert q.values[1, 0] == pytest.approx(-1.0, abs=1e-9)
        assert q.values[2, 0] == 0.0

    def test_all_positive_world_gives_zero_d_table(self):
        q = de.value_iteration(chain_mdp(3, Terminal.POSITIVE), de.DualKind.D)
        assert np.all(q.values == 0.0)

    def test_matches_policy_enumeration_oracle(self):
        for seed in range(8):
            mdp = tiny_random_mdp(seed)
            for kind in (de.DualKind.D, de.DualKind.R):
                got = de.value_iteration(mdp, kind, tol=1e-12).values
                want = oracles.enumerate_q_star(mdp, kind)
                assert np.abs(got - want).max() < 1e-8, f"seed {seed} kind {kind}"

    def test_improper_mdp_rejected_before_solving(self):
        with pytest.raises(NonTerminatingRegion):
            de.value_iteration(self_loop_trap_mdp(), de.DualKind.D)

    def test_clamped_sweeps_keep_d_values_non_positive(self, lifegate):
        q = np.zeros((lifegate.n_states, lifegate.n_actions))
        for _ in range(30):
            q = bellman_backup(lifegate, de.DualKind.D, q)
            assert q.max() <= 0.0
            assert q.min() >= -1.0

    def test_qtable_range_enforced(self):
        with pytest.raises(ValueError):
            de.QTable(np.array([[0.5]]), de.DualKind.D)
        with pytest.raises(ValueError):
            de.QTable(np.array([[-0.5]]), de.DualKind.R)


class TestClassification:
    def test_lifegate_dead_ends_are_exactly_the_yellow_cells(self, layout, lifegate):
        sets = de.classify_special_states(lifegate)
        assert sets.dead_ends == frozenset(de.cells_of_kind(layout, "y"))

    def test_no_negative_terminal_means_no_dead_ends(self):
        mdp = chain_mdp(3, Terminal.POSITIVE)
        sets = de.classify_special_states(mdp)
        assert sets.dead_ends == frozenset()
        assert sets.rescues == frozenset({0, 1, 2})

    def test_matches_value_function_characterization(self):
        # dead iff Q_D = -1 for all treatments; rescue iff max Q_R = 1
        for seed in range(30):
            mdp = tiny_random_mdp(seed, n_states=8, n_actions=3)
            sets = de.classify_special_states(mdp)
            q_d = de.value_iteration(mdp, de.DualKind.D, tol=1e-12).values
            q_r = de.value_iteration(mdp, de.DualKind.R, tol=1e-12).values
            for s in map(int, mdp.nonterminal_states):
                assert (s in sets.dead_ends) == bool(np.all(q_d[s] <= -1 + 1e-8))
                assert (s in sets.rescues) == bool(q_r[s].max() >= 1 - 1e-8)

    def test_matches_brute_force_definition(self):
        for seed in range(6):
            mdp = tiny_random_mdp(seed)
            sets = de.classify_special_states(mdp)
            assert sets.dead_ends == frozenset(oracles.dead_ends_by_definition(mdp))
            assert sets.rescues == frozenset(oracles.rescues_by_definition(mdp))

    def test_membership_depends_only_on_support(self):
        mdp = tiny_random_mdp(1)
        sets = de.classify_special_states(mdp)
        # re-weight every row without changing its support
        rng = np.random.default_rng(0)
        t = mdp.transition.copy()
        scale = rng.uniform(0.2, 5.0, size=t.shape)
        t = t * scale
        t /= t.sum(axis=2, keepdims=True)
        again = de.TabularMDP(mdp.n_states, mdp.n_actions, t, mdp.terminal_kind)
        assert de.classify_special_states(again) == sets

    def test_trap_region_raises(self):
        with pytest.raises(NonTerminatingRegion):
            de.classify_special_states(self_loop_trap_mdp())

    def test_sets_disjoint_and_nonterminal(self):
        for seed in range(10):
            mdp = tiny_random_mdp(seed, n_states=10, n_actions=3)
            sets = de.classify_special_states(mdp)
            assert not (sets.dead_ends & sets.rescues)
            terminal = set(map(int, mdp.terminal_states))
            assert not (sets.dead_ends & terminal)
            assert not (sets.rescues & terminal)


class TestConfirmTermination:
    def test_lifegate_yellow_drift_terminates(self, layout, lifegate):
        yellow = set(de.cells_of_kind(layout, "y"))
        assert de.confirm_termination(lifegate, yellow, "worst_case")

    def test_black_region_terminates_under_death_drift(self, layout, lifegate):
        black = set(de.cells_of_kind(layout, "."))
        assert de.confirm_termination(lifegate, black, "worst_case")

    def test_pure_self_loop_fails_worst_case(self):
        assert not de.confirm_termination(self_loop_trap_mdp(), {0}, "worst_case")

    def test_empty_set_is_trivially_confirmed(self, lifegate):
        assert de.confirm_termination(lifegate, set(), "worst_case")


class TestOutcomeProbabilities:
    def test_all_successors_dead_gives_certainty(self, layout, lifegate, lifegate_solution):
        q_d, q_r, sets, probs = lifegate_solution
        # the cell directly left of the corridor, pushed right: everything dead
        index = de.state_index(layout)
        s = index[(3, 4)]
        right = 3
        assert probs.p_dead[s, right] == pytest.approx(1.0, abs=1e-12)
        assert probs.f_neg[s, right] == 0.0
        assert probs.m_neg[s, right] == 0.0

    def test_decomposition_identity_on_random_mdps(self):
        for seed in range(25):
            mdp = tiny_random_mdp(seed, n_states=12, n_actions=3)
            sets = de.classify_special_states(mdp)
            q_d = de.value_iteration(mdp, de.DualKind.D)
            q_r = de.value_iteration(mdp, de.DualKind.R)
            probs = de.outcome_probabilities(mdp, sets, q_d, q_r)
            nonterm = mdp.terminal_kind == Terminal.NONE
            lhs_d = -q_d.values[nonterm]
            rhs_d = (probs.p_dead + probs.f_neg + probs.m_neg)[nonterm]
            assert np.abs(lhs_d - rhs_d).max() < 1e-6
            lhs_r = q_r.values[nonterm]
            rhs_r = (probs.p_rescue + probs.f_pos + probs.m_pos)[nonterm]
            assert np.abs(lhs_r - rhs_r).max() < 1e-6

    def test_m_terms_match_linear_solve_oracle(self):
        mdp = two_outcome_mdp()
        sets = de.classify_special_states(mdp)
        q_d = de.value_iteration(mdp, de.DualKind.D)
        q_r = de.value_iteration(mdp, de.DualKind.R)
        probs = de.outcome_probabilities(mdp, sets, q_d, q_r)
        greedy = q_d.values.argmax(axis=1)
        mort = oracles.policy_outcome_prob(mdp, greedy, Terminal.NEGATIVE)
        assert mort[0] == 0.0  # greedy avoids the death branch entirely
        assert probs.m_neg.max() == 0.0

    def test_certain_death_consequence(self):
        # wherever q_d = -1, every positive-probability successor is dead or negative
        for seed in range(10):
            mdp = tiny_random_mdp(seed, n_states=10, n_actions=3)
            sets = de.classify_special_states(mdp)
            q_d = de.value_iteration(mdp, de.DualKind.D, tol=1e-12)
            dead_or_neg = np.zeros(mdp.n_states, dtype=bool)
            dead_or_neg[list(sets.dead_ends)] = True
            dead_or_neg[mdp.terminal_kind == Terminal.NEGATIVE] = True
            for s in map(int, mdp.nonterminal_states):
                for a in range(mdp.n_actions):
                    if q_d.values[s, a] <= -1 + 1e-8:
                        support = np.flatnonzero(mdp.transition[s, a] > 0)
                        assert dead_or_neg[support].all()

    def test_dimension_mismatch_rejected(self, lifegate, lifegate_solution):
        q_d, q_r, sets, _ = lifegate_solution
        small = de.QTable(np.zeros((2, 2)), de.DualKind.D)
        with pytest.raises(StaleInputs):
            de.outcome_probabilities(lifegate, sets, small, q_r)
        with pytest.raises(StaleInputs):
            de.outcome_probabilities(lifegate, sets, q_r, q_r)


class TestTheoremReport:
    def test_lifegate_full_suite_passes(self, lifegate):
        report = de.verify_theorem1(lifegate)
        assert report.all_passed
        assert report.n_dead_ends == 10
        assert -1 < report.delta_d < 0
        assert 0 < report.delta_r < 1
        # the unsecurable states are exactly the dead-ends
        assert len(report.certified_dead_states) == 10

    def test_no_dead_ends_is_vacuous_t3(self):
        mdp = chain_mdp(3, Terminal.POSITIVE)
        report = de.verify_theorem1(mdp)
        assert report.all_passed
        assert report.delta_d is None
        t3 = next(c for c in report.checks if c.name.startswith("T3"))
        assert "vacuous" in t3.detail

    def test_report_serializes_and_prints(self, lifegate):
        report = de.verify_theorem1(lifegate)
        doc = report.to_json_dict()
        assert doc["all_passed"] is True
        assert len(doc["checks"]) == len(report.checks)
        text = report.text()
        assert "T1" in text and "T5" in text

    def test_rescue_floor_check_passes_with_exact_values(self):
        mdp = two_outcome_mdp()
        report = de.verify_theorem1(mdp, rescue_floor=True)
        t6 = next(c for c in report.checks if c.name.startswith("T6"))
        assert t6.passed
