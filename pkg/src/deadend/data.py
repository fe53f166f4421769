"""Offline dataset store: trajectory serialization, outcome-stratified
splits, transition buffers, and the 62+2 stratified minibatch scheme that
augments every batch with terminal transitions of negative-outcome
trajectories.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyBuffer, EmptyCohort, ParseError
from .mdp import Terminal, Trajectory, Transition

BATCH_MAIN = 62
BATCH_TAIL = 2


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.75
    val: float = 0.05
    test: float = 0.20
    seed: int = 0

    def __post_init__(self):
        total = self.train + self.val + self.test
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {total!r}, not 1")
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split fractions must be non-negative")


def split(
    trajectories: list[Trajectory], spec: SplitSpec = SplitSpec()
) -> tuple[list[Trajectory], list[Trajectory], list[Trajectory]]:
    """Partition at trajectory granularity, stratified by outcome.

    Each outcome group is shuffled and cut proportionally (round to nearest,
    remainder to test), so every split's negative-outcome rate matches the
    cohort's within rounding. Deterministic in the seed.
    """
    if not trajectories:
        raise EmptyCohort("no trajectories to split")
    rng = np.random.default_rng(spec.seed)
    train: list[Trajectory] = []
    val: list[Trajectory] = []
    test: list[Trajectory] = []
    for outcome in (Terminal.POSITIVE, Terminal.NEGATIVE):
        group = [t for t in trajectories if t.outcome == outcome]
        if not group:
            continue
        order = rng.permutation(len(group))
        n = len(group)
        n_train = int(round(spec.train * n))
        n_val = int(round(spec.val * n))
        n_val = min(n_val, n - n_train)
        train.extend(group[i] for i in order[:n_train])
        val.extend(group[i] for i in order[n_train : n_train + n_val])
        test.extend(group[i] for i in order[n_train + n_val :])
    if not val or not test:
        warnings.warn(
            f"degenerate split: train={len(train)} val={len(val)} test={len(test)}",
            stacklevel=2,
        )
    return train, val, test


@dataclass(frozen=True)
class TransitionBuffers:
    """Index buffers over a cohort: every transition, plus the last
    transition of each negative-outcome trajectory for augmentation.

    Entries are (trajectory index, step index) pairs so that consumers can
    rebuild history windows around each sampled transition.
    """

    trajectories: tuple[Trajectory, ...]
    main: tuple[tuple[int, int], ...]
    terminal_negative: tuple[tuple[int, int], ...]

    @classmethod
    def build(cls, trajectories: list[Trajectory]) -> "TransitionBuffers":
        if not trajectories:
            raise EmptyCohort("cannot build buffers from an empty cohort")
        main = []
        tail = []
        for ti, traj in enumerate(trajectories):
            for si in range(len(traj.transitions)):
                main.append((ti, si))
            if traj.outcome == Terminal.NEGATIVE:
                tail.append((ti, len(traj.transitions) - 1))
        return cls(tuple(trajectories), tuple(main), tuple(tail))

    def transition(self, entry: tuple[int, int]) -> Transition:
        ti, si = entry
        return self.trajectories[ti].transitions[si]


def stratified_minibatch(
    buffers: TransitionBuffers,
    rng: np.random.Generator,
    fallback_to_main: bool = False,
) -> list[tuple[int, int]]:
    """Draw 62 uniform entries from main plus 2 from the negative-terminal
    buffer, with replacement, main first.

    With an empty augmentation buffer the call fails unless the caller opts
    into plain 64-draw batches (logged once per process via warnings).
    """
    if not buffers.main:
        raise EmptyBuffer("main buffer is empty")
    if not buffers.terminal_negative:
        if not fallback_to_main:
            raise EmptyBuffer(
                "terminal-negative buffer is empty; pass fallback_to_main=True "
                "to sample plain batches"
            )
        warnings.warn("no negative outcomes: sampling 64 main draws", stacklevel=2)
        idx = rng.integers(0, len(buffers.main), size=BATCH_MAIN + BATCH_TAIL)
        return [buffers.main[i] for i in idx]
    idx_main = rng.integers(0, len(buffers.main), size=BATCH_MAIN)
    idx_tail = rng.integers(0, len(buffers.terminal_negative), size=BATCH_TAIL)
    batch = [buffers.main[i] for i in idx_main]
    batch.extend(buffers.terminal_negative[i] for i in idx_tail)
    return batch


# -- trajectory wire format -----------------------------------------------------


def _step_to_doc(tr: Transition) -> dict:
    doc: dict = {}
    if isinstance(tr.state_or_obs, (int, np.integer)):
        doc["state"] = int(tr.state_or_obs)
    else:
        doc["obs"] = np.asarray(tr.state_or_obs, dtype=float).tolist()
    doc["action"] = int(tr.action)
    doc["reward"] = float(tr.reward)
    doc["terminal"] = Terminal(tr.terminal).label
    return doc


def _traj_from_doc(doc: dict) -> Trajectory:
    steps = doc["steps"]
    if not isinstance(steps, list) or not steps:
        raise ValueError("steps must be a non-empty list")
    raw = []
    for step in steps:
        if "state" in step:
            state: int | np.ndarray = int(step["state"])
        elif "obs" in step:
            state = np.asarray(step["obs"], dtype=np.float64)
        else:
            raise ValueError("step needs 'state' or 'obs'")
        raw.append(
            (state, int(step["action"]), float(step["reward"]),
             Terminal.from_name(step["terminal"]))
        )
    transitions = []
    for i, (state, action, reward, terminal) in enumerate(raw):
        nxt = raw[i + 1][0] if terminal == Terminal.NONE and i + 1 < len(raw) else None
        transitions.append(
            Transition(
                state_or_obs=state,
                action=action,
                reward=reward,
                next_state_or_obs=nxt,
                terminal=terminal,
                step_index=i,
            )
        )
    return Trajectory(
        id=str(doc["id"]),
        transitions=transitions,
        outcome=Terminal.from_name(doc["outcome"]),
    )


def save_jsonl(path: str | Path, trajectories: list[Trajectory]) -> None:
    """One JSON object per line: {"id", "outcome", "steps": [...]}."""
    with open(path, "w") as fh:
        for traj in trajectories:
            doc = {
                "id": traj.id,
                "outcome": traj.outcome.label,
                "steps": [_step_to_doc(tr) for tr in traj.transitions],
            }
            fh.write(json.dumps(doc, sort_keys=True))
            fh.write("\n")


def load_jsonl(path: str | Path) -> list[Trajectory]:
    """Inverse of :func:`save_jsonl`; ParseError carries the failing line."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(_traj_from_doc(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
    return out
