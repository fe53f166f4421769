"""Decision layer: red/yellow flags for states and treatments, the security
filter capping treatment probabilities by 1 + Q_D, and the pointwise
certification of filtered policies against brute-force outcome probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DeadEndState, EmptyRow, OutOfRange
from .mdp import TabularMDP, Terminal


class Level(Enum):
    NONE = "none"
    YELLOW = "yellow"
    RED = "red"

    @property
    def rank(self) -> int:
        return {"none": 0, "yellow": 1, "red": 2}[self.value]


class Basis(Enum):
    STATE_MEDIAN = "state_median"
    TREATMENT = "treatment"


@dataclass(frozen=True)
class FlagLevel:
    level: Level
    basis: Basis


@dataclass(frozen=True)
class Thresholds:
    """Concurrent flag thresholds; red must be at least as strict as yellow."""

    red_d: float = -0.25
    red_r: float = 0.75
    yellow_d: float = -0.15
    yellow_r: float = 0.85

    def __post_init__(self):
        if not (-1.0 < self.red_d <= self.yellow_d < 0.0):
            raise ValueError(
                f"need -1 < red_d <= yellow_d < 0, got {self.red_d}, {self.yellow_d}"
            )
        if not (0.0 < self.red_r <= self.yellow_r < 1.0):
            raise ValueError(
                f"need 0 < red_r <= yellow_r < 1, got {self.red_r}, {self.yellow_r}"
            )

    def to_json_dict(self) -> dict:
        return {
            "red": {"d": self.red_d, "r": self.red_r},
            "yellow": {"d": self.yellow_d, "r": self.yellow_r},
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Thresholds":
        return cls(
            red_d=doc["red"]["d"],
            red_r=doc["red"]["r"],
            yellow_d=doc["yellow"]["d"],
            yellow_r=doc["yellow"]["r"],
        )


def _level(qd: float, qr: float, th: Thresholds) -> Level:
    # Concurrent rule: both value functions must violate their thresholds.
    if qd < th.red_d and qr < th.red_r:
        return Level.RED
    if qd < th.yellow_d and qr < th.yellow_r:
        return Level.YELLOW
    return Level.NONE


def flag_state(
    qd_row: np.ndarray, qr_row: np.ndarray, th: Thresholds = Thresholds()
) -> FlagLevel:
    """Flag a state from the medians of its Q rows (both must violate)."""
    qd_row = np.asarray(qd_row, dtype=float)
    qr_row = np.asarray(qr_row, dtype=float)
    if qd_row.size == 0 or qr_row.size == 0:
        raise EmptyRow("cannot flag a state with an empty value row")
    if qd_row.size != qr_row.size:
        raise EmptyRow(f"row lengths differ: {qd_row.size} vs {qr_row.size}")
    return FlagLevel(
        _level(float(np.median(qd_row)), float(np.median(qr_row)), th),
        Basis.STATE_MEDIAN,
    )


def flag_treatment(qd: float, qr: float, th: Thresholds = Thresholds()) -> FlagLevel:
    """Flag a single treatment from its own pair of values."""
    if not (-1.0 - 1e-9 <= qd <= 0.0 + 1e-9):
        raise OutOfRange(f"qd={qd} outside [-1, 0]")
    if not (0.0 - 1e-9 <= qr <= 1.0 + 1e-9):
        raise OutOfRange(f"qr={qr} outside [0, 1]")
    return FlagLevel(_level(qd, qr, th), Basis.TREATMENT)


def secure_policy(pi_row: np.ndarray, qd_row: np.ndarray) -> np.ndarray:
    """Cap each treatment probability at 1 + Q_D and re-form a distribution.

    Clipped excess is redistributed proportionally to the current mass of
    unsaturated treatments (uniformly if they hold no mass), repeating until
    every coordinate respects its cap; the fixed point arrives in at most
    n_actions rounds. Raises DeadEndState when the caps cannot carry a full
    distribution.
    """
    pi = np.asarray(pi_row, dtype=np.float64).copy()
    qd = np.asarray(qd_row, dtype=np.float64)
    if pi.shape != qd.shape or pi.ndim != 1 or pi.size == 0:
        raise EmptyRow(f"bad row shapes {pi.shape} vs {qd.shape}")
    if abs(pi.sum() - 1.0) > 1e-9 or (pi < -1e-12).any():
        raise OutOfRange(f"policy row is not a distribution (sum {pi.sum():.12g})")
    if (qd < -1.0 - 1e-9).any() or (qd > 1e-9).any():
        raise OutOfRange("qd row outside [-1, 0]")

    caps = np.clip(1.0 + qd, 0.0, 1.0)
    if caps.sum() < 1.0 - 1e-12:
        raise DeadEndState(
            f"security caps sum to {caps.sum():.6g} < 1; no compliant distribution exists"
        )

    saturated = np.zeros_like(pi, dtype=bool)
    for _ in range(pi.size):
        over = pi > caps + 1e-15
        if not over.any():
            break
        saturated |= over
        pi[saturated] = caps[saturated]
        deficit = 1.0 - pi.sum()
        if deficit <= 1e-15:
            break
        free = ~saturated
        weights = pi[free]
        total = weights.sum()
        if total > 0:
            pi[free] += deficit * weights / total
        else:
            pi[free] += deficit / free.sum()
    return pi


@dataclass
class SecurityReport:
    """Pointwise certification outcome for one policy matrix."""

    checked_pairs: int
    violations: list[tuple[int, int, float]]  # (state, action, excess)
    unsecured_states: list[int]
    eps: float
    max_excess: float

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checked_pairs": self.checked_pairs,
            "violations": [list(v) for v in self.violations],
            "unsecured_states": self.unsecured_states,
            "eps": self.eps,
            "max_excess": self.max_excess,
        }


def certify_security(
    mdp: TabularMDP,
    policy: np.ndarray,
    probs,
    eps: float = 0.0,
    tol: float = 1e-9,
) -> SecurityReport:
    """Check pi(s,a) <= 1 - (1-eps) * (P_D + F_D) at every non-terminal pair.

    eps=0 is the exact security bound; positive eps is the degraded
    guarantee when certainly-fatal values have only converged to -(1-eps).
    Rows of NaN mark states the filter could not secure; they are reported,
    not checked. Violations are listed, never raised.
    """
    policy = np.asarray(policy, dtype=np.float64)
    shape = (mdp.n_states, mdp.n_actions)
    if policy.shape != shape:
        raise OutOfRange(f"policy shape {policy.shape} != {shape}")
    if not 0.0 <= eps <= 1.0:
        raise OutOfRange(f"eps={eps} outside [0, 1]")

    violations: list[tuple[int, int, float]] = []
    unsecured: list[int] = []
    checked = 0
    max_excess = -np.inf
    lam = probs.p_dead + probs.f_neg
    for s in np.flatnonzero(mdp.terminal_kind == Terminal.NONE):
        row = policy[s]
        if np.isnan(row).any():
            unsecured.append(int(s))
            continue
        bound = 1.0 - (1.0 - eps) * lam[s]
        excess = row - bound
        max_excess = max(max_excess, float(excess.max()))
        for a in np.flatnonzero(excess > tol):
            violations.append((int(s), int(a), float(excess[a])))
        checked += mdp.n_actions
    return SecurityReport(
        checked_pairs=checked,
        violations=violations,
        unsecured_states=unsecured,
        eps=eps,
        max_excess=float(max_excess) if checked else 0.0,
    )
