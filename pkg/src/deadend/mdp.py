"""Episodic tabular MDPs with positive/negative terminals and the dual
reward construction.

The base process carries no reward function of its own. Rewards exist only
through :class:`DualKind`: the D-process pays -1 exactly on transitions into
negative terminals, the R-process pays +1 exactly on transitions into
positive terminals, zero everywhere else, both undiscounted. Optimal values
of these two processes are outcome probabilities, which is what everything
downstream consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np

from .errors import InvalidMDP, Unterminated

PROB_TOL = 1e-9


class Terminal(IntEnum):
    """Per-state terminal label. NONE marks ordinary (non-terminal) states."""

    NONE = 0
    POSITIVE = 1
    NEGATIVE = 2

    @classmethod
    def from_name(cls, name: str) -> "Terminal":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown terminal kind {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


class DualKind(Enum):
    """Which of the two reward designs an MDP or value function follows."""

    D = "D"
    R = "R"

    @property
    def value_range(self) -> tuple[float, float]:
        return (-1.0, 0.0) if self is DualKind.D else (0.0, 1.0)

    def reward_into(self, terminal: Terminal) -> float:
        if self is DualKind.D:
            return -1.0 if terminal is Terminal.NEGATIVE else 0.0
        return 1.0 if terminal is Terminal.POSITIVE else 0.0


@dataclass(frozen=True)
class TabularMDP:
    """Full transition/terminal specification of an episodic process.

    ``transition`` is indexed (state, action, next_state). Rows within
    tolerance of stochastic are renormalized exactly at construction;
    out-of-tolerance rows are left untouched for :func:`validate_mdp` to
    report. ``dual`` is set by :func:`build_dual_mdp` and selects the reward
    design; the base process has ``dual=None`` and no rewards.

    Instances are immutable after construction (arrays are write-locked) and
    safe for concurrent read-only use.
    """

    n_states: int
    n_actions: int
    transition: np.ndarray
    terminal_kind: np.ndarray
    discount: float = 1.0
    dual: DualKind | None = None

    def __post_init__(self):
        def own(source, dtype):
            arr = np.ascontiguousarray(np.asarray(source, dtype=dtype))
            if arr is source and arr.flags.writeable:
                arr = arr.copy()  # never write-lock an array the caller still owns
            return arr

        t = own(self.transition, np.float64)
        k = own(self.terminal_kind, np.int8)
        if t.shape != (self.n_states, self.n_actions, self.n_states):
            raise InvalidMDP(
                f"transition tensor shape {t.shape} does not match "
                f"({self.n_states}, {self.n_actions}, {self.n_states})"
            )
        if k.shape != (self.n_states,):
            raise InvalidMDP(f"terminal_kind shape {k.shape} != ({self.n_states},)")
        sums = t.sum(axis=2)
        # Renormalize rows inside tolerance but skip ones already at 1 within
        # float dust, so construction is idempotent and round-trips bit-exactly.
        fix = (np.abs(sums - 1.0) <= PROB_TOL) & (np.abs(sums - 1.0) > 1e-12)
        if fix.any():
            t = t.copy()
            t[fix] /= sums[fix][..., None]
        t.setflags(write=False)
        k.setflags(write=False)
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "terminal_kind", k)

    # -- structure -----------------------------------------------------------

    def is_terminal(self, s: int) -> bool:
        return self.terminal_kind[s] != Terminal.NONE

    @property
    def terminal_states(self) -> np.ndarray:
        return np.flatnonzero(self.terminal_kind != Terminal.NONE)

    @property
    def nonterminal_states(self) -> np.ndarray:
        return np.flatnonzero(self.terminal_kind == Terminal.NONE)

    def reward(self, s: int, a: int, s_next: int) -> float:
        """Dual reward of the (s, a, s') transition; zero out of terminals."""
        if self.dual is None or self.is_terminal(s):
            return 0.0
        return self.dual.reward_into(Terminal(self.terminal_kind[s_next]))

    # -- serialization ---------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "terminal_kind": [Terminal(k).label for k in self.terminal_kind],
            "transition": self.transition.tolist(),
            "discount": self.discount,
            "dual": None if self.dual is None else self.dual.value,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True) + "\n")

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TabularMDP":
        try:
            kinds = np.array(
                [Terminal.from_name(k) for k in doc["terminal_kind"]], dtype=np.int8
            )
            dual = doc.get("dual")
            return cls(
                n_states=int(doc["n_states"]),
                n_actions=int(doc["n_actions"]),
                transition=np.asarray(doc["transition"], dtype=np.float64),
                terminal_kind=kinds,
                discount=float(doc.get("discount", 1.0)),
                dual=None if dual is None else DualKind(dual),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidMDP(f"bad MDP document: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "TabularMDP":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


@dataclass
class Transition:
    """One offline experience tuple.

    ``state_or_obs`` / ``next_state_or_obs`` hold a state index (tabular) or
    an observation vector (partially observed). ``next_state_or_obs`` is None
    exactly when ``terminal`` is not NONE: the wire schema records no
    post-terminal observation. ``latent_state`` is diagnostic metadata set by
    simulators in observation mode; it is excluded from equality and never
    serialized.
    """

    state_or_obs: int | np.ndarray
    action: int
    reward: float
    next_state_or_obs: int | np.ndarray | None
    terminal: Terminal
    step_index: int
    latent_state: int | None = field(default=None, compare=False)

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            same(self.state_or_obs, other.state_or_obs)
            and self.action == other.action
            and self.reward == other.reward
            and same(self.next_state_or_obs, other.next_state_or_obs)
            and self.terminal == other.terminal
            and self.step_index == other.step_index
        )


@dataclass
class Trajectory:
    """Ordered transitions with an outcome label matching the final terminal."""

    id: str
    transitions: list[Transition]
    outcome: Terminal

    def __post_init__(self):
        if len(self.transitions) < 1:
            raise ValueError(f"trajectory {self.id}: needs at least one transition")
        last = self.transitions[-1].terminal
        if self.outcome not in (Terminal.POSITIVE, Terminal.NEGATIVE):
            raise ValueError(f"trajectory {self.id}: outcome must be positive or negative")
        if last != self.outcome:
            raise ValueError(
                f"trajectory {self.id}: outcome {self.outcome.label} does not match "
                f"final terminal {Terminal(last).label}"
            )
        for tr in self.transitions[:-1]:
            if tr.terminal != Terminal.NONE:
                raise ValueError(
                    f"trajectory {self.id}: terminal transition before the last step"
                )

    def __len__(self) -> int:
        return len(self.transitions)


# -- validation ----------------------------------------------------------------


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    message: str
    where: tuple = ()


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[ValidationIssue, ...]

    @property
    def ok(self) -> bool:
        return not self.issues

    def raise_if_invalid(self) -> None:
        if not self.ok:
            head = "; ".join(i.message for i in self.issues[:5])
            more = "" if len(self.issues) <= 5 else f" (+{len(self.issues) - 5} more)"
            raise InvalidMDP(head + more)


def validate_mdp(mdp: TabularMDP) -> ValidationReport:
    """Check row stochasticity, absorbing terminals, and terminal reachability.

    An empty report means valid. Reachability means: from every state there
    is at least one positive-probability path, over any actions, into some
    terminal state.
    """
    issues: list[ValidationIssue] = []
    t = mdp.transition
    if (t < -1e-12).any():
        s, a, s2 = np.unravel_index(int(np.argmin(t)), t.shape)
        issues.append(
            ValidationIssue(
                "negative_probability",
                f"transition({s},{a},{s2}) = {t[s, a, s2]:.3g} is negative",
                (int(s), int(a), int(s2)),
            )
        )
    sums = t.sum(axis=2)
    bad = np.argwhere(np.abs(sums - 1.0) > PROB_TOL)
    for s, a in bad[:50]:
        issues.append(
            ValidationIssue(
                "row_sum",
                f"transition row ({s},{a}) sums to {sums[s, a]:.12g}",
                (int(s), int(a)),
            )
        )

    terminals = mdp.terminal_states
    if terminals.size == 0:
        issues.append(ValidationIssue("no_terminal", "MDP has no terminal state"))
    for s in terminals:
        if not np.allclose(t[s, :, s], 1.0, atol=PROB_TOL):
            issues.append(
                ValidationIssue(
                    "non_absorbing_terminal",
                    f"terminal state {s} is not absorbing under every action",
                    (int(s),),
                )
            )

    if terminals.size > 0 and not bad.size:
        # Reverse reachability over support edges: which states can reach a terminal.
        support = t.max(axis=1) > 0.0  # (s, s') reachable under some action
        reach = np.zeros(mdp.n_states, dtype=bool)
        reach[terminals] = True
        frontier = True
        while frontier:
            new = reach | (support & reach[None, :]).any(axis=1)
            frontier = (new != reach).any()
            reach = new
        for s in np.flatnonzero(~reach):
            issues.append(
                ValidationIssue(
                    "terminal_unreachable",
                    f"no positive-probability path from state {s} to any terminal",
                    (int(s),),
                )
            )
    return ValidationReport(tuple(issues))


# -- operations ------------------------------------------------------------------


def build_dual_mdp(mdp: TabularMDP, kind: DualKind) -> TabularMDP:
    """Rewrite the reward design per ``kind`` and force discount 1.

    Dynamics are shared, not copied: the returned process references the same
    transition tensor bit for bit.
    """
    validate_mdp(mdp).raise_if_invalid()
    return TabularMDP(
        n_states=mdp.n_states,
        n_actions=mdp.n_actions,
        transition=mdp.transition,
        terminal_kind=mdp.terminal_kind,
        discount=1.0,
        dual=kind,
    )


def trajectory_return(traj: Trajectory, kind: DualKind) -> float:
    """Undiscounted sum of dual rewards along a terminated trajectory.

    Equals -1 (D) on negative outcomes, +1 (R) on positive ones, 0 otherwise.
    """
    if traj.transitions[-1].terminal == Terminal.NONE:
        raise Unterminated(f"trajectory {traj.id} does not terminate")
    return float(
        sum(kind.reward_into(Terminal(tr.terminal)) for tr in traj.transitions)
    )


