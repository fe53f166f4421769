"""Synthetic cohorts: random episodic MDPs with a planted, oracle-verified
dead-end region, Gaussian observation emitters on top (making them POMDPs),
and seeded offline rollouts under configurable behavior policies. Stands in
for a clinical cohort at desk scale.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import save_jsonl
from .errors import GenerationFailed, NonTerminatingRegion, OutOfRange, YieldTooLow
from .mdp import TabularMDP, Terminal, Trajectory, Transition
from .solve import SpecialStateSets, classify_special_states, termination_probabilities

log = logging.getLogger(__name__)

# Generator shape constants; outcome rates under these are locked by tests.
_LEAK = 0.05
_P_POS_EDGE = 0.35
_P_NEG_EDGE = 0.10
_P_DEAD_EDGE = 0.30


@dataclass(frozen=True)
class CohortSpec:
    """Knobs for one synthetic cohort. max_len=18 mirrors a 72h stay cut
    into 4h steps."""

    n_states: int = 30
    n_actions: int = 4
    dead_end_fraction: float = 0.15
    branching: int = 3
    obs_dim: int = 8
    obs_noise_sd: float = 0.05
    max_len: int = 18
    seed: int = 0

    def __post_init__(self):
        if min(self.n_states, self.n_actions, self.branching, self.obs_dim, self.max_len) < 1:
            raise ValueError("counts must be positive")
        if self.n_states < 4:
            raise ValueError("need at least 4 states (two terminals plus dynamics)")
        if not 0.0 <= self.dead_end_fraction < 1.0:
            raise ValueError(f"dead_end_fraction {self.dead_end_fraction} outside [0, 1)")
        if self.obs_noise_sd < 0:
            raise ValueError("obs_noise_sd must be non-negative")


@dataclass(frozen=True)
class GeneratedMDP:
    """A generated process with its oracle ground truth attached."""

    mdp: TabularMDP
    truth: SpecialStateSets
    planted_dead_ends: frozenset[int]
    neg_terminal: int
    pos_terminal: int


def _random_row(rng, n_states, successors):
    row = np.zeros(n_states)
    weights = rng.random(len(successors)) + 0.1
    row[list(successors)] = weights / weights.sum()
    return row


def _try_generate(spec: CohortSpec, seed: int) -> GeneratedMDP:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xA,)))
    n = spec.n_states
    neg_t, pos_t = n - 2, n - 1
    interior = np.arange(n - 2)
    n_dead = int(round(spec.dead_end_fraction * len(interior)))
    planted = frozenset(
        int(s) for s in rng.choice(interior, size=n_dead, replace=False)
    ) if n_dead else frozenset()

    transition = np.zeros((n, spec.n_actions, n))
    dead_pool = sorted(planted) + [neg_t]
    safe_pool = [s for s in interior if s not in planted]
    for s in interior:
        for a in range(spec.n_actions):
            if s in planted:
                # Closed under every action: planted region or the negative terminal.
                k = min(spec.branching, len(dead_pool))
                succ = set(rng.choice(dead_pool, size=k, replace=False).tolist())
            else:
                k = min(spec.branching, len(safe_pool))
                succ = set(rng.choice(safe_pool, size=k, replace=False).tolist())
                if planted and rng.random() < _P_DEAD_EDGE:
                    succ.add(int(rng.choice(sorted(planted))))
                if rng.random() < _P_POS_EDGE:
                    succ.add(pos_t)
                if rng.random() < _P_NEG_EDGE:
                    succ.add(neg_t)
            transition[s, a] = _random_row(rng, n, succ)
    transition[neg_t, :, neg_t] = 1.0
    transition[pos_t, :, pos_t] = 1.0

    terminal_kind = np.zeros(n, dtype=np.int8)
    terminal_kind[neg_t] = Terminal.NEGATIVE
    terminal_kind[pos_t] = Terminal.POSITIVE

    # Properness: bleed a terminal leak into any state that might never finish.
    for _ in range(n + 1):
        mdp = TabularMDP(n, spec.n_actions, transition, terminal_kind)
        p_term = termination_probabilities(mdp, "worst_case")
        stuck = [int(s) for s in interior if p_term[s] < 1 - 1e-9]
        if not stuck:
            break
        for s in stuck:
            target = neg_t if s in planted else pos_t
            transition[s] *= 1.0 - _LEAK
            transition[s, :, target] += _LEAK
    else:
        raise GenerationFailed("could not make the chain proper")

    truth = classify_special_states(mdp)
    if not planted <= truth.dead_ends:
        raise GenerationFailed("planted region escaped the dead-end fixed point")
    if spec.dead_end_fraction == 0 and truth.dead_ends:
        raise GenerationFailed("accidental dead-ends in a zero-fraction spec")
    return GeneratedMDP(mdp, truth, planted, neg_t, pos_t)


def generate_mdp(spec: CohortSpec, max_attempts: int = 20) -> GeneratedMDP:
    """Random sparse proper MDP with a planted dead-end region of roughly
    ``dead_end_fraction``, oracle classification attached.

    Deterministic in the seed; retries with derived seeds when a draw fails
    its own checks, and raises GenerationFailed once the budget is spent.
    """
    last = None
    for attempt in range(max_attempts):
        try:
            return _try_generate(spec, spec.seed + 7919 * attempt)
        except (GenerationFailed, NonTerminatingRegion) as exc:
            last = exc
    raise GenerationFailed(f"no valid MDP after {max_attempts} attempts: {last}")


@dataclass(frozen=True)
class ObservationEmitter:
    """Stationary per-state Gaussian emissions with well-separated means."""

    means: np.ndarray  # (n_states, obs_dim)
    noise_sd: float

    def observe(self, state: int, rng: np.random.Generator) -> np.ndarray:
        mean = self.means[state]
        if self.noise_sd == 0:
            return mean.copy()
        return mean + rng.normal(0.0, self.noise_sd, size=mean.shape)

    @property
    def obs_dim(self) -> int:
        return self.means.shape[1]

    def to_json_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "noise_sd": self.noise_sd,
            "means": self.means.tolist(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ObservationEmitter":
        doc = json.loads(Path(path).read_text())
        return cls(np.asarray(doc["means"], dtype=np.float64), float(doc["noise_sd"]))


def emit_observations(
    mdp: TabularMDP, spec: CohortSpec, min_separation: float = 0.5
) -> ObservationEmitter:
    """Assign each state a fixed mean vector (rejection-sampled to keep all
    pairwise distances above ``min_separation``) plus independent noise."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(0xB,)))
    means = np.zeros((mdp.n_states, spec.obs_dim))
    for s in range(mdp.n_states):
        for _ in range(1000):
            cand = rng.normal(0.0, 1.0, size=spec.obs_dim)
            if s == 0 or np.linalg.norm(means[:s] - cand, axis=1).min() >= min_separation:
                means[s] = cand
                break
        else:
            raise GenerationFailed(
                f"could not separate {mdp.n_states} means by {min_separation} "
                f"in {spec.obs_dim} dimensions"
            )
    means.setflags(write=False)
    return ObservationEmitter(means=means, noise_sd=spec.obs_noise_sd)


# -- behavior policies ----------------------------------------------------------


def uniform_policy(mdp: TabularMDP) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def epsilon_greedy_policy(q_values: np.ndarray, eps: float) -> np.ndarray:
    """eps-uniform around the greedy treatment of a value table."""
    if not 0.0 <= eps <= 1.0:
        raise OutOfRange(f"eps={eps} outside [0, 1]")
    n_states, n_actions = q_values.shape
    pi = np.full((n_states, n_actions), eps / n_actions)
    pi[np.arange(n_states), q_values.argmax(axis=1)] += 1.0 - eps
    return pi


def harmful_biased_policy(
    mdp: TabularMDP, sets: SpecialStateSets, bias: float = 3.0
) -> np.ndarray:
    """Extra mass on treatments whose successors sit in dead-ends or the
    negative terminal; stresses the flagging analyses."""
    danger_vec = np.zeros(mdp.n_states)
    danger_vec[list(sets.dead_ends)] = 1.0
    danger_vec[mdp.terminal_kind == Terminal.NEGATIVE] = 1.0
    weight = 1.0 + bias * (mdp.transition @ danger_vec)
    return weight / weight.sum(axis=1, keepdims=True)


# -- rollouts --------------------------------------------------------------------


def rollout_behavior(
    mdp: TabularMDP,
    policy: np.ndarray,
    n_trajectories: int,
    seed: int,
    max_len: int = 18,
    emitter: ObservationEmitter | None = None,
    start_states: np.ndarray | None = None,
    max_retries: int = 100,
    id_prefix: str = "traj",
) -> list[Trajectory]:
    """Simulate terminated trajectories under a behavior policy.

    Runs that fail to terminate within ``max_len`` steps are discarded and
    regenerated from a fresh per-slot child seed (every retained trajectory
    terminates); the discard count is logged. Child seeds are a counter-based
    split of the master seed, so output is independent of scheduling.
    """
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise OutOfRange(f"policy shape {policy.shape}")
    rows = policy.sum(axis=1)
    if np.abs(rows - 1.0).max() > 1e-9 or (policy < -1e-12).any():
        raise OutOfRange("policy rows must be distributions")
    if start_states is None:
        start_states = mdp.nonterminal_states
    start_states = np.asarray(start_states, dtype=int)

    trajectories: list[Trajectory] = []
    discarded = 0
    for i in range(n_trajectories):
        for attempt in range(max_retries):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(i, attempt))
            )
            traj = _simulate_one(
                mdp, policy, rng, max_len, emitter, start_states, f"{id_prefix}-{i}"
            )
            if traj is not None:
                trajectories.append(traj)
                break
            discarded += 1
        else:
            raise YieldTooLow(
                f"trajectory slot {i}: no termination within {max_len} steps "
                f"after {max_retries} attempts"
            )
    if discarded:
        log.info("discarded %d truncated rollouts", discarded)
    return trajectories


def _simulate_one(mdp, policy, rng, max_len, emitter, start_states, traj_id):
    s = int(start_states[rng.integers(len(start_states))])
    states = [s]
    actions = []
    for _ in range(max_len):
        a = int(rng.choice(mdp.n_actions, p=policy[s]))
        s = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
        actions.append(a)
        states.append(s)
        if mdp.is_terminal(s):
            break
    outcome = Terminal(mdp.terminal_kind[states[-1]])
    if outcome == Terminal.NONE:
        return None

    n_steps = len(actions)
    if emitter is not None:
        observed = [emitter.observe(states[t], rng) for t in range(n_steps)]
    transitions = []
    for t in range(n_steps):
        terminal = Terminal(mdp.terminal_kind[states[t + 1]])
        reward = {Terminal.NONE: 0.0, Terminal.POSITIVE: 1.0, Terminal.NEGATIVE: -1.0}[terminal]
        if emitter is None:
            cur: int | np.ndarray = states[t]
            nxt = states[t + 1] if terminal == Terminal.NONE else None
        else:
            cur = observed[t]
            nxt = observed[t + 1] if terminal == Terminal.NONE else None
        transitions.append(
            Transition(
                state_or_obs=cur,
                action=actions[t],
                reward=reward,
                next_state_or_obs=nxt,
                terminal=terminal,
                step_index=t,
                latent_state=states[t] if emitter is not None else None,
            )
        )
    return Trajectory(id=traj_id, transitions=transitions, outcome=outcome)


# -- cohort bundle -----------------------------------------------------------------


def save_bundle(
    out_dir: str | Path,
    generated: GeneratedMDP,
    emitter: ObservationEmitter | None,
    trajectories: list[Trajectory],
) -> None:
    """Write mdp.json, truth.json, trajectories.jsonl and, when observations
    are emitted, emissions.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    generated.mdp.save(out / "mdp.json")
    generated.truth.save(out / "truth.json")
    if emitter is not None:
        emitter.save(out / "emissions.json")
    save_jsonl(out / "trajectories.jsonl", trajectories)
