"""Life-Gate: a drift-driven gridworld whose yellow corridor is an
inescapable dead-end region.

Cells are walls (#), ordinary black cells (.), dead-end yellow cells (y),
life gates (L, positive terminals) and death gates (D, negative terminals).
From a black cell every action is overridden by a forced move to the right
with probability ``death_drift``; otherwise the chosen cardinal move happens
(walls block, a blocked move leaves the agent in place). Yellow cells ignore
the action entirely: right with probability ``deadend_drift_right``, stay
otherwise. The agent observes only its position, never the cell color.

The shipped default layout is a reconstruction (the original map exists only
as a picture); its geometry is versioned in ``layouts/default.txt`` and all
quantitative tests reference that file.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InvalidLayout
from .mdp import TabularMDP, Terminal

WALL, BLACK, YELLOW, LIFE, DEATH = "#", ".", "y", "L", "D"
CELL_CHARS = {WALL, BLACK, YELLOW, LIFE, DEATH}

# Action order fixed: up, down, left, right, stay.
ACTIONS = ("up", "down", "left", "right", "stay")
MOVES = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1), "stay": (0, 0)}
N_ACTIONS = len(ACTIONS)


@dataclass(frozen=True)
class LifeGateLayout:
    """Grid geometry plus the two drift probabilities."""

    rows: tuple[str, ...]
    death_drift: float = 0.4
    deadend_drift_right: float = 0.7

    def __post_init__(self):
        if not self.rows:
            raise InvalidLayout("empty layout")
        widths = {len(r) for r in self.rows}
        if len(widths) != 1:
            raise InvalidLayout(f"ragged rows: widths {sorted(widths)}")
        chars = set("".join(self.rows))
        if not chars <= CELL_CHARS:
            raise InvalidLayout(f"unknown cell characters {sorted(chars - CELL_CHARS)}")
        joined = "".join(self.rows)
        if LIFE not in joined or DEATH not in joined:
            raise InvalidLayout("layout needs at least one life gate and one death gate")
        for name in ("death_drift", "deadend_drift_right"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidLayout(f"{name}={p} outside [0, 1]")

    @property
    def height(self) -> int:
        return len(self.rows)

    @property
    def width(self) -> int:
        return len(self.rows[0])

    def cell(self, r: int, c: int) -> str:
        if 0 <= r < self.height and 0 <= c < self.width:
            return self.rows[r][c]
        return WALL  # outside the grid behaves like wall

    @classmethod
    def from_text(cls, text: str, **drifts) -> "LifeGateLayout":
        rows = tuple(line for line in text.splitlines() if line.strip())
        return cls(rows=rows, **drifts)

    @classmethod
    def from_file(cls, path: str | Path, **drifts) -> "LifeGateLayout":
        return cls.from_text(Path(path).read_text(), **drifts)

    @classmethod
    def default(cls, **drifts) -> "LifeGateLayout":
        text = resources.files("deadend.layouts").joinpath("default.txt").read_text()
        return cls.from_text(text, **drifts)


def state_index(layout: LifeGateLayout) -> dict[tuple[int, int], int]:
    """Row-major state numbering over non-wall cells; shared by build/render."""
    index: dict[tuple[int, int], int] = {}
    for r in range(layout.height):
        for c in range(layout.width):
            if layout.cell(r, c) != WALL:
                index[(r, c)] = len(index)
    return index


def build_lifegate(layout: LifeGateLayout) -> TabularMDP:
    """One state per non-wall cell; gates are absorbing terminals."""
    index = state_index(layout)
    n = len(index)
    transition = np.zeros((n, N_ACTIONS, n))
    terminal_kind = np.zeros(n, dtype=np.int8)

    def target(r: int, c: int, move: str) -> tuple[int, int]:
        dr, dc = MOVES[move]
        nr, nc = r + dr, c + dc
        if layout.cell(nr, nc) == WALL:
            return r, c  # hitting a wall has no effect
        return nr, nc

    for (r, c), s in index.items():
        kind = layout.cell(r, c)
        if kind == LIFE:
            terminal_kind[s] = Terminal.POSITIVE
            transition[s, :, s] = 1.0
            continue
        if kind == DEATH:
            terminal_kind[s] = Terminal.NEGATIVE
            transition[s, :, s] = 1.0
            continue
        if kind == YELLOW:
            # Action-independent drift toward the death gates.
            drift = index[target(r, c, "right")]
            stay = index[(r, c)]
            p = layout.deadend_drift_right
            for a in range(N_ACTIONS):
                transition[s, a, drift] += p
                transition[s, a, stay] += 1.0 - p
            continue
        # Black cell: forced right-drift composed with the chosen move.
        drift = index[target(r, c, "right")]
        p = layout.death_drift
        for a, action in enumerate(ACTIONS):
            transition[s, a, drift] += p
            transition[s, a, index[target(r, c, action)]] += 1.0 - p

    return TabularMDP(
        n_states=n,
        n_actions=N_ACTIONS,
        transition=transition,
        terminal_kind=terminal_kind,
        discount=1.0,
    )


def cells_of_kind(layout: LifeGateLayout, kind: str) -> list[int]:
    """State indices of all cells with the given character."""
    index = state_index(layout)
    return [s for (r, c), s in index.items() if layout.cell(r, c) == kind]


def render_value_grid(layout: LifeGateLayout, values: np.ndarray) -> str:
    """Grid-shaped CSV of per-state values with walls marked '#'."""
    values = np.asarray(values, dtype=float)
    index = state_index(layout)
    if values.shape != (len(index),):
        raise DimensionMismatch(
            f"{values.shape[0] if values.ndim == 1 else values.shape} values "
            f"for {len(index)} non-wall cells"
        )
    lines = []
    for r in range(layout.height):
        row = []
        for c in range(layout.width):
            if layout.cell(r, c) == WALL:
                row.append("#")
            else:
                row.append(f"{values[index[(r, c)]]:.6g}")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
