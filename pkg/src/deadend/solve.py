"""Exact machinery: clamped undiscounted value iteration for the dual
processes, greatest-fixed-point classification of dead-end/rescue states,
brute-force outcome probabilities, and the numerical theorem checks that tie
them together.

Everything here treats the transition tensor as ground truth; nothing is
learned. The solvers double as oracles for the offline learners.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import DeadEndState, NoConvergence, NonTerminatingRegion, StaleInputs
from .flags import secure_policy
from .mdp import DualKind, TabularMDP, Terminal, validate_mdp

TERMINATION_TOL = 1e-9


@dataclass(frozen=True)
class QTable:
    """State-treatment values of one dual process, range-locked per kind."""

    values: np.ndarray  # (n_states, n_actions)
    kind: DualKind

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        lo, hi = self.kind.value_range
        if v.min(initial=lo) < lo - 1e-12 or v.max(initial=hi) > hi + 1e-12:
            raise ValueError(
                f"Q values outside [{lo}, {hi}] for kind {self.kind.value}"
            )
        v = np.clip(v, lo, hi)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def state_values(self) -> np.ndarray:
        return self.values.max(axis=1)

    def to_json_dict(self) -> dict:
        return {"kind": self.kind.value, "values": self.values.tolist()}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "QTable":
        doc = json.loads(Path(path).read_text())
        return cls(np.asarray(doc["values"], dtype=np.float64), DualKind(doc["kind"]))


@dataclass(frozen=True)
class SpecialStateSets:
    """Dead-end and rescue memberships; disjoint, never terminal."""

    dead_ends: frozenset[int]
    rescues: frozenset[int]

    def __post_init__(self):
        if self.dead_ends & self.rescues:
            raise ValueError("a state cannot be both dead-end and rescue")

    def to_json_dict(self) -> dict:
        return {
            "dead_ends": sorted(self.dead_ends),
            "rescues": sorted(self.rescues),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SpecialStateSets":
        doc = json.loads(Path(path).read_text())
        return cls(frozenset(doc["dead_ends"]), frozenset(doc["rescues"]))


@dataclass(frozen=True)
class OutcomeProbs:
    """Per (state, treatment): the six outcome-probability components.

    ``p_dead``/``p_rescue`` are one-step masses into the special sets,
    ``f_neg``/``f_pos`` one-step masses into the terminals, and
    ``m_neg``/``m_pos`` the residual probabilities of the outcome under the
    greedy policy of the matching value table.
    """

    p_dead: np.ndarray
    f_neg: np.ndarray
    m_neg: np.ndarray
    p_rescue: np.ndarray
    f_pos: np.ndarray
    m_pos: np.ndarray

    def __post_init__(self):
        for name in ("p_dead", "f_neg", "m_neg", "p_rescue", "f_pos", "m_pos"):
            arr = getattr(self, name)
            if arr.min(initial=0.0) < -1e-9 or arr.max(initial=1.0) > 1 + 1e-9:
                raise ValueError(f"{name} outside [0,1]")
        for trio in (("p_dead", "f_neg", "m_neg"), ("p_rescue", "f_pos", "m_pos")):
            total = sum(getattr(self, n) for n in trio)
            if total.max(initial=0.0) > 1 + 1e-9:
                raise ValueError(f"{'+'.join(trio)} exceeds 1")


def _dual_reward_vector(mdp: TabularMDP, kind: DualKind) -> np.ndarray:
    """Reward of entering each successor state under the dual design."""
    r = np.zeros(mdp.n_states)
    if kind is DualKind.D:
        r[mdp.terminal_kind == Terminal.NEGATIVE] = -1.0
    else:
        r[mdp.terminal_kind == Terminal.POSITIVE] = 1.0
    return r


def bellman_backup(mdp: TabularMDP, kind: DualKind, q: np.ndarray) -> np.ndarray:
    """One clamped optimality sweep of the dual process (discount 1)."""
    nonterm = mdp.terminal_kind == Terminal.NONE
    v = q.max(axis=1) * nonterm  # terminal values pinned at zero
    target = mdp.transition @ (_dual_reward_vector(mdp, kind) + v)
    target[~nonterm, :] = 0.0
    lo, hi = kind.value_range
    return np.clip(target, lo, hi)


def termination_probabilities(
    mdp: TabularMDP,
    mode: Literal["worst_case", "witness_policy"] = "worst_case",
    members: frozenset[int] | set[int] | None = None,
    max_iters: int = 1_000_000,
) -> np.ndarray:
    """Fixed point of the per-state termination probability.

    worst_case minimizes over treatments (termination under every policy).
    witness_policy maximizes over the rescue-witness treatments of the
    ``members`` set (treatments whose full support stays inside members union
    positive terminals); non-member states are pinned at zero.
    """
    nonterm = mdp.terminal_kind == Terminal.NONE
    term_ind = (~nonterm).astype(np.float64)
    if mode == "witness_policy":
        member = np.zeros(mdp.n_states, dtype=bool)
        if members:
            member[list(members)] = True
        allowed = member | (mdp.terminal_kind == Terminal.POSITIVE)
        witness = mdp.transition @ allowed.astype(np.float64) >= 1 - 1e-9  # (s, a)
        witness[~member, :] = False
    elif mode != "worst_case":
        raise ValueError(f"unknown mode {mode!r}")

    p = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        q_next = mdp.transition @ (term_ind + p * nonterm)  # (s, a)
        if mode == "worst_case":
            p_next = q_next.min(axis=1)
        else:
            p_next = np.where(witness, q_next, 0.0).max(axis=1)
            p_next[~member] = 0.0
        p_next[~nonterm] = 0.0
        if np.abs(p_next - p).max() < 1e-12:
            return p_next
        p = p_next
    return p


def confirm_termination(
    mdp: TabularMDP,
    states: frozenset[int] | set[int],
    mode: Literal["worst_case", "witness_policy"],
    tol: float = TERMINATION_TOL,
) -> bool:
    """Check that termination is almost sure from ``states``.

    worst_case demands it under every policy; witness_policy restricts each
    state in ``states`` to its rescue-witness treatments and takes the best
    of them. True iff the fixed point is >= 1 - tol on every given state.
    """
    states = frozenset(int(s) for s in states)
    if not states:
        return True
    nonterm = mdp.terminal_kind == Terminal.NONE
    for s in states:
        if not nonterm[s]:
            raise ValueError(f"state {s} is terminal")
    p = termination_probabilities(mdp, mode, members=states)
    idx = sorted(states)
    return bool(np.all(p[idx] >= 1 - tol))


def value_iteration(
    mdp: TabularMDP,
    kind: DualKind,
    tol: float = 1e-9,
    max_sweeps: int = 100_000,
) -> QTable:
    """Solve the dual process exactly by clamped value iteration from zero.

    Termination must be almost sure under every policy (the undiscounted
    operator is not a contraction), so the worst-case termination fixed point
    is confirmed first; failure raises NonTerminatingRegion rather than
    returning a table with ambiguous semantics.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    validate_mdp(mdp).raise_if_invalid()
    nonterm = set(int(s) for s in mdp.nonterminal_states)
    if not confirm_termination(mdp, nonterm, "worst_case"):
        raise NonTerminatingRegion(
            "termination is not almost sure under every policy; "
            "undiscounted value iteration rejected",
            states=sorted(nonterm),
        )
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_sweeps):
        q_next = bellman_backup(mdp, kind, q)
        residual = float(np.abs(q_next - q).max())
        q = q_next
        if residual < tol:
            return QTable(q, kind)
    raise NoConvergence(
        f"Bellman residual {residual:.3e} >= tol {tol:.3e} after {max_sweeps} sweeps",
        residual=residual,
    )


def classify_special_states(mdp: TabularMDP) -> SpecialStateSets:
    """Greatest-fixed-point dead-end/rescue sets, then a.s.-termination checks.

    Dead-ends: largest set D of non-terminal states such that every treatment
    keeps full mass inside D union negative terminals. Rescues: largest set R
    such that some treatment keeps full mass inside R union positive
    terminals. Membership depends only on transition support. Both sets must
    then terminate almost surely (worst case for D, best witness for R);
    otherwise the w.p.1 semantics do not apply and NonTerminatingRegion is
    raised.
    """
    validate_mdp(mdp).raise_if_invalid()
    t = mdp.transition
    nonterm = mdp.terminal_kind == Terminal.NONE
    neg = mdp.terminal_kind == Terminal.NEGATIVE
    pos = mdp.terminal_kind == Terminal.POSITIVE

    dead = nonterm.copy()
    while True:
        allowed = (dead | neg).astype(np.float64)
        keep = (t @ allowed >= 1 - 1e-9).all(axis=1) & dead
        if (keep == dead).all():
            break
        dead = keep

    rescue = nonterm.copy()
    while True:
        allowed = (rescue | pos).astype(np.float64)
        keep = (t @ allowed >= 1 - 1e-9).any(axis=1) & rescue
        if (keep == rescue).all():
            break
        rescue = keep

    dead_set = frozenset(int(s) for s in np.flatnonzero(dead))
    rescue_set = frozenset(int(s) for s in np.flatnonzero(rescue))
    if not confirm_termination(mdp, dead_set, "worst_case"):
        raise NonTerminatingRegion(
            "dead-end fixed point contains states that may never terminate",
            states=sorted(dead_set),
        )
    if not confirm_termination(mdp, rescue_set, "witness_policy"):
        raise NonTerminatingRegion(
            "rescue fixed point contains states whose witness policies may never recover",
            states=sorted(rescue_set),
        )
    return SpecialStateSets(dead_ends=dead_set, rescues=rescue_set)


def _greedy_outcome_prob(
    mdp: TabularMDP,
    q: np.ndarray,
    outcome: Terminal,
    tol: float,
    max_iters: int = 1_000_000,
) -> np.ndarray:
    """P(eventually hit ``outcome`` | greedy w.r.t. q), per state.

    Linear fixed point solved by iteration; greedy ties break to the lowest
    treatment index.
    """
    greedy = q.argmax(axis=1)
    rows = mdp.transition[np.arange(mdp.n_states), greedy, :]  # (s, s')
    hit = (mdp.terminal_kind == outcome).astype(np.float64)
    nonterm = mdp.terminal_kind == Terminal.NONE
    p = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        p_next = rows @ (hit + p * nonterm)
        p_next[~nonterm] = 0.0
        delta = np.abs(p_next - p).max()
        p = p_next
        if delta < tol:
            break
    return p


def outcome_probabilities(
    mdp: TabularMDP,
    sets: SpecialStateSets,
    q_d: QTable,
    q_r: QTable,
    tol: float = 1e-9,
) -> OutcomeProbs:
    """Brute-force decomposition of the dual values from the transition tensor.

    This is the independent side of the Lemma-style identity
    -Q_D = P_D + F_D + M_D (and its R mirror): the one-step masses come
    straight off the tensor and the residual terms from greedy outcome
    probabilities solved as linear fixed points.
    """
    shape = (mdp.n_states, mdp.n_actions)
    if q_d.values.shape != shape or q_r.values.shape != shape:
        raise StaleInputs(
            f"Q tables shaped {q_d.values.shape}/{q_r.values.shape}, MDP wants {shape}"
        )
    if q_d.kind is not DualKind.D or q_r.kind is not DualKind.R:
        raise StaleInputs("q_d must be kind D and q_r kind R")
    bad = [s for s in sets.dead_ends | sets.rescues if s >= mdp.n_states]
    if bad:
        raise StaleInputs(f"special states {bad} out of range for this MDP")

    t = mdp.transition
    dead = np.zeros(mdp.n_states)
    dead[list(sets.dead_ends)] = 1.0
    rescue = np.zeros(mdp.n_states)
    rescue[list(sets.rescues)] = 1.0
    neg = (mdp.terminal_kind == Terminal.NEGATIVE).astype(np.float64)
    pos = (mdp.terminal_kind == Terminal.POSITIVE).astype(np.float64)
    nonterm = (mdp.terminal_kind == Terminal.NONE).astype(np.float64)

    mort = _greedy_outcome_prob(mdp, q_d.values, Terminal.NEGATIVE, tol)
    recov = _greedy_outcome_prob(mdp, q_r.values, Terminal.POSITIVE, tol)

    return OutcomeProbs(
        p_dead=t @ dead,
        f_neg=t @ neg,
        m_neg=t @ (mort * nonterm * (1.0 - dead)),
        p_rescue=t @ rescue,
        f_pos=t @ pos,
        m_pos=t @ (recov * nonterm * (1.0 - rescue)),
    )


# -- theorem verification ------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    margin: float | None = None


@dataclass
class TheoremReport:
    """Record of the numerical checks plus realized separation margins."""

    checks: list[CheckResult]
    delta_d: float | None
    delta_r: float | None
    n_dead_ends: int
    n_rescues: int
    certified_dead_states: list[int] = field(default_factory=list)
    tie_break: str = "greedy ties break to the lowest treatment index"

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_json_dict(self) -> dict:
        return {
            "all_passed": self.all_passed,
            "checks": [
                {
                    "name": c.name,
                    "passed": c.passed,
                    "detail": c.detail,
                    "margin": c.margin,
                }
                for c in self.checks
            ],
            "delta_d": self.delta_d,
            "delta_r": self.delta_r,
            "n_dead_ends": self.n_dead_ends,
            "n_rescues": self.n_rescues,
            "certified_dead_states": self.certified_dead_states,
            "tie_break": self.tie_break,
        }

    def text(self) -> str:
        lines = [
            f"dead-ends: {self.n_dead_ends}   rescues: {self.n_rescues}",
            f"empirical thresholds: delta_D={_fmt(self.delta_d)} delta_R={_fmt(self.delta_r)}",
            f"tie break: {self.tie_break}",
        ]
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            margin = "" if c.margin is None else f"  margin={c.margin:.6g}"
            lines.append(f"[{status}] {c.name}: {c.detail}{margin}")
        lines.append("all checks passed" if self.all_passed else "SOME CHECKS FAILED")
        return "\n".join(lines)


def _fmt(x: float | None) -> str:
    return "undefined" if x is None else f"{x:.6g}"


def _biconditional(
    name: str, lhs: np.ndarray, rhs: np.ndarray, mask: np.ndarray
) -> CheckResult:
    agree = (lhs == rhs) | ~mask
    n_bad = int((~agree).sum())
    return CheckResult(
        name=name,
        passed=n_bad == 0,
        detail=(
            f"{int(mask.sum())} pairs checked, {n_bad} biconditional failures"
        ),
    )


def verify_theorem1(
    mdp: TabularMDP,
    policy: np.ndarray | None = None,
    rescue_floor: bool = False,
    tol: float = 1e-6,
    vi_tol: float = 1e-9,
    security_tol: float = 1e-9,
) -> TheoremReport:
    """Run the full dual-route suite on one MDP and record every check.

    T1/T2: the certainty biconditionals between full outcome mass and extreme
    values. T3/T4: existence of separating thresholds, realized as the
    cluster-gap midpoints between the certain pairs and the nearest others.
    T5: the secured policy (default uniform) respects the pointwise security
    bound against brute-force probabilities. T6 is checked only on request.
    Failures are recorded, never raised.
    """
    validate_mdp(mdp).raise_if_invalid()
    sets = classify_special_states(mdp)
    q_d = value_iteration(mdp, DualKind.D, tol=vi_tol)
    q_r = value_iteration(mdp, DualKind.R, tol=vi_tol)
    probs = outcome_probabilities(mdp, sets, q_d, q_r, tol=vi_tol)

    nonterm_mask = (mdp.terminal_kind == Terminal.NONE)[:, None]
    nonterm_mask = np.broadcast_to(nonterm_mask, q_d.values.shape)

    certain_d = probs.p_dead + probs.f_neg >= 1 - tol
    extreme_d = q_d.values <= -1 + tol
    certain_r = probs.p_rescue + probs.f_pos >= 1 - tol
    extreme_r = q_r.values >= 1 - tol

    checks = [
        _biconditional("T1 (P_D+F_D=1 <=> Q_D=-1)", certain_d, extreme_d, nonterm_mask),
        _biconditional("T2 (P_R+F_R=1 <=> Q_R=1)", certain_r, extreme_r, nonterm_mask),
    ]

    # Lemma-style decomposition, both sides, every non-terminal pair.
    dev_d = np.abs(-q_d.values - (probs.p_dead + probs.f_neg + probs.m_neg))
    dev_r = np.abs(q_r.values - (probs.p_rescue + probs.f_pos + probs.m_pos))
    dev = float(np.where(nonterm_mask, np.maximum(dev_d, dev_r), 0.0).max())
    checks.append(
        CheckResult(
            name="decomposition (-Q = P + F + M, both kinds)",
            passed=dev < tol,
            detail=f"max deviation {dev:.3e}",
            margin=tol - dev,
        )
    )

    # T3/T4: empirical separating thresholds from the value cluster gaps.
    def gap_midpoint(values, certain, extreme_at):
        inside = values[certain & nonterm_mask]
        outside = values[~certain & nonterm_mask]
        if inside.size == 0 or outside.size == 0:
            return None, None
        if extreme_at < 0:  # D side: certain cluster at -1, others above
            margin = float(outside.min() - inside.max())
            midpoint = float(inside.max() + margin / 2)
        else:  # R side: certain cluster at 1, others below
            margin = float(inside.min() - outside.max())
            midpoint = float(inside.min() - margin / 2)
        return margin, midpoint

    margin_d, delta_d = gap_midpoint(q_d.values, certain_d, -1.0)
    margin_r, delta_r = gap_midpoint(q_r.values, certain_r, 1.0)
    checks.append(
        CheckResult(
            name="T3 (threshold delta_D exists)",
            passed=margin_d is None or margin_d > 0,
            detail=(
                "vacuous (no certain pairs or no others)"
                if margin_d is None
                else f"cluster gap {margin_d:.6g}, midpoint {_fmt(delta_d)}"
            ),
            margin=margin_d,
        )
    )
    checks.append(
        CheckResult(
            name="T4 (threshold delta_R exists)",
            passed=margin_r is None or margin_r > 0,
            detail=(
                "vacuous (no certain pairs or no others)"
                if margin_r is None
                else f"cluster gap {margin_r:.6g}, midpoint {_fmt(delta_r)}"
            ),
            margin=margin_r,
        )
    )

    # T5: secure the supplied (or uniform) policy with exact caps, then check
    # pointwise against the brute-force certainty.
    if policy is None:
        policy = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    elif policy.shape != q_d.values.shape:
        raise StaleInputs(f"policy shape {policy.shape} != {q_d.values.shape}")

    certified_dead: list[int] = []
    violations = 0
    worst = 0.0
    checked = 0
    floor_violations = 0
    for s in np.flatnonzero(mdp.terminal_kind == Terminal.NONE):
        try:
            secured = secure_policy(policy[s], q_d.values[s])
        except DeadEndState:
            certified_dead.append(int(s))
            continue
        bound = 1.0 - (probs.p_dead[s] + probs.f_neg[s])
        excess = secured - bound
        worst = max(worst, float(excess.max()))
        violations += int((excess > security_tol).sum())
        checked += mdp.n_actions
        if rescue_floor:
            premise = secured >= q_r.values[s]
            floor_violations += int(
                (premise & (secured < probs.p_rescue[s] + probs.f_pos[s] - security_tol)).sum()
            )
    checks.append(
        CheckResult(
            name="T5 (secured policy within 1-lambda)",
            passed=violations == 0,
            detail=(
                f"{checked} pairs checked, {violations} violations, "
                f"worst excess {worst:.3e}, {len(certified_dead)} states unsecurable"
            ),
            margin=-worst,
        )
    )
    if rescue_floor:
        checks.append(
            CheckResult(
                name="T6 (rescue floor where premise holds)",
                passed=floor_violations == 0,
                detail=f"{floor_violations} violations",
            )
        )

    return TheoremReport(
        checks=checks,
        delta_d=delta_d,
        delta_r=delta_r,
        n_dead_ends=len(sets.dead_ends),
        n_rescues=len(sets.rescues),
        certified_dead_states=certified_dead,
    )
