"""Cohort-level analyses over flagged trajectories: flag emergence by time
before the terminal, flag-duration distributions, series aligned on the
first raised flag, and the administered-vs-best value gap.

All aggregations are pure functions of a :class:`FlaggedCohort`; rendering
lives in the separate plotting package and never recomputes statistics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadIndex, EmptyRow, NoEligibleTrajectories, ShapeMismatch
from .flags import Level, Thresholds
from .mdp import Terminal, Trajectory

CRITERIA = ("d", "r", "full")
BASES = ("median", "admin")


@dataclass(frozen=True)
class AlignmentWindow:
    """Steps kept before/after the first flag (6/4 = 24h/16h at 4h steps)."""

    pre_steps: int = 6
    post_steps: int = 4

    def __post_init__(self):
        if self.pre_steps < 0 or self.post_steps < 0:
            raise ValueError("window lengths must be non-negative")


@dataclass
class FlaggedCohort:
    """Trajectories with their per-step value rows and flag thresholds."""

    trajectories: list[Trajectory]
    qd: list[np.ndarray]  # per trajectory, (n_steps, n_actions)
    qr: list[np.ndarray]
    thresholds: Thresholds

    def __post_init__(self):
        if not (len(self.trajectories) == len(self.qd) == len(self.qr)):
            raise ShapeMismatch("trajectories and value rows misaligned")
        for traj, d, r in zip(self.trajectories, self.qd, self.qr):
            if d.shape != r.shape or d.shape[0] != len(traj.transitions):
                raise ShapeMismatch(f"value rows misaligned for trajectory {traj.id}")

    # -- per-step statistics ---------------------------------------------------

    def stat(self, ti: int, si: int, basis: str) -> tuple[float, float]:
        if basis == "median":
            return (
                float(np.median(self.qd[ti][si])),
                float(np.median(self.qr[ti][si])),
            )
        action = self.trajectories[ti].transitions[si].action
        return float(self.qd[ti][si][action]), float(self.qr[ti][si][action])

    def level(self, ti: int, si: int, criterion: str = "full",
              basis: str = "median") -> Level:
        d_stat, r_stat = self.stat(ti, si, basis)
        th = self.thresholds
        d_red, d_yellow = d_stat < th.red_d, d_stat < th.yellow_d
        r_red, r_yellow = r_stat < th.red_r, r_stat < th.yellow_r
        if criterion == "d":
            return Level.RED if d_red else Level.YELLOW if d_yellow else Level.NONE
        if criterion == "r":
            return Level.RED if r_red else Level.YELLOW if r_yellow else Level.NONE
        if criterion == "full":
            if d_red and r_red:
                return Level.RED
            if d_yellow and r_yellow:
                return Level.YELLOW
            return Level.NONE
        raise ValueError(f"unknown criterion {criterion!r}")

    def state_flags(self, ti: int) -> list[Level]:
        return [self.level(ti, si) for si in range(len(self.trajectories[ti]))]

    # -- flag report CSV ---------------------------------------------------------

    def to_csv(self, path: str | Path) -> None:
        lines = ["traj_id,step,flag_state,flag_treatment,qd_median,qr_median,qd_admin,qr_admin"]
        for ti, traj in enumerate(self.trajectories):
            for si in range(len(traj.transitions)):
                med_d, med_r = self.stat(ti, si, "median")
                adm_d, adm_r = self.stat(ti, si, "admin")
                lines.append(
                    f"{traj.id},{si},{self.level(ti, si, 'full', 'median').value},"
                    f"{self.level(ti, si, 'full', 'admin').value},"
                    f"{med_d!r},{med_r!r},{adm_d!r},{adm_r!r}"
                )
        Path(path).write_text("\n".join(lines) + "\n")

    def save_values(self, path: str | Path) -> None:
        """Full value rows, one JSON object per step (analyze-stage input)."""
        with open(path, "w") as fh:
            for ti, traj in enumerate(self.trajectories):
                for si in range(len(traj.transitions)):
                    fh.write(json.dumps({
                        "traj_id": traj.id,
                        "step": si,
                        "qd": self.qd[ti][si].tolist(),
                        "qr": self.qr[ti][si].tolist(),
                    }, sort_keys=True))
                    fh.write("\n")

    @classmethod
    def from_values_file(cls, trajectories: list[Trajectory], path: str | Path,
                         thresholds: Thresholds) -> "FlaggedCohort":
        rows: dict[str, dict[int, tuple[list, list]]] = {}
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                doc = json.loads(line)
                rows.setdefault(doc["traj_id"], {})[doc["step"]] = (doc["qd"], doc["qr"])
        qd, qr = [], []
        for traj in trajectories:
            if traj.id not in rows:
                raise ShapeMismatch(f"no value rows for trajectory {traj.id}")
            per = rows[traj.id]
            qd.append(np.array([per[s][0] for s in range(len(traj.transitions))]))
            qr.append(np.array([per[s][1] for s in range(len(traj.transitions))]))
        return cls(trajectories, qd, qr, thresholds)


def flag_with_tables(trajectories, qd_table, qr_table,
                     thresholds: Thresholds = Thresholds()) -> FlaggedCohort:
    """Value rows per step from exact/tabular Q tables (state-indexed cohort)."""
    qd, qr = [], []
    for traj in trajectories:
        states = [tr.state_or_obs for tr in traj.transitions]
        qd.append(qd_table.values[states])
        qr.append(qr_table.values[states])
    return FlaggedCohort(list(trajectories), qd, qr, thresholds)


def flag_with_networks(trajectories, encoder, qd_net, qr_net,
                       thresholds: Thresholds = Thresholds()) -> FlaggedCohort:
    """Value rows per step from learned networks on encoder embeddings."""
    qd, qr = [], []
    for traj in trajectories:
        emb = np.atleast_2d(encoder.encode_trajectory(traj))
        qd.append(qd_net.q_values(emb))
        qr.append(qr_net.q_values(emb))
    return FlaggedCohort(list(trajectories), qd, qr, thresholds)


# -- flag emergence ----------------------------------------------------------------


def flag_emergence(flagged: FlaggedCohort, max_horizon: int = 18) -> list[dict]:
    """Share of trajectories at each flag level, bucketed by steps before the
    terminal, split by outcome and reported for every criterion/basis pair.

    Bucket -k holds, among trajectories of length >= k, the flag level at the
    step k steps before the recorded terminal. Percentages within a row
    partition and sum to 100.
    """
    rows = []
    for k in range(1, max_horizon + 1):
        for outcome in (Terminal.POSITIVE, Terminal.NEGATIVE):
            eligible = [
                ti for ti, t in enumerate(flagged.trajectories)
                if t.outcome == outcome and len(t.transitions) >= k
            ]
            if not eligible:
                continue
            for criterion in CRITERIA:
                for basis in BASES:
                    counts = {lvl: 0 for lvl in Level}
                    for ti in eligible:
                        si = len(flagged.trajectories[ti].transitions) - k
                        counts[flagged.level(ti, si, criterion, basis)] += 1
                    n = len(eligible)
                    rows.append({
                        "bucket": -k,
                        "outcome": outcome.label,
                        "criterion": criterion,
                        "basis": basis,
                        "n": n,
                        "pct_none": 100.0 * counts[Level.NONE] / n,
                        "pct_yellow": 100.0 * counts[Level.YELLOW] / n,
                        "pct_red": 100.0 * counts[Level.RED] / n,
                    })
    return rows


# -- flag duration -----------------------------------------------------------------


def _max_run(levels: list[Level], at_least: Level) -> int:
    best = run = 0
    for lvl in levels:
        run = run + 1 if lvl.rank >= at_least.rank else 0
        best = max(best, run)
    return best


def flag_duration(flagged: FlaggedCohort, max_k: int = 6) -> list[dict]:
    """Distribution of maximal consecutive red runs plus the end-of-stay and
    start-of-stay flag measures, per outcome group (state flags).
    """
    per_outcome: dict[str, list[list[Level]]] = {"positive": [], "negative": []}
    for ti, traj in enumerate(flagged.trajectories):
        per_outcome[traj.outcome.label].append(flagged.state_flags(ti))

    rows = []
    for outcome, flag_lists in per_outcome.items():
        if not flag_lists:
            continue
        runs = [_max_run(levels, Level.RED) for levels in flag_lists]
        for d in range(1, max(runs, default=0) + 1):
            denom = sum(1 for levels in flag_lists if len(levels) >= d)
            num = sum(1 for r in runs if r == d)
            rows.append({
                "outcome": outcome, "measure": "max_red_run", "k": d,
                "numerator": num, "denominator": denom,
                "pct": 100.0 * num / denom if denom else 0.0,
            })
        for k in range(1, max_k + 1):
            with_len = [lv for lv in flag_lists if len(lv) >= k]
            denom = len(with_len)
            measures = {
                "ends_on_red": sum(
                    1 for lv in with_len if all(x == Level.RED for x in lv[-k:])
                ),
                "ends_on_yellow": sum(
                    1 for lv in with_len
                    if all(x.rank >= Level.YELLOW.rank for x in lv[-k:])
                ),
                "starts_no_flag": sum(
                    1 for lv in with_len if all(x == Level.NONE for x in lv[:k])
                ),
            }
            for measure, num in measures.items():
                rows.append({
                    "outcome": outcome, "measure": measure, "k": k,
                    "numerator": num, "denominator": denom,
                    "pct": 100.0 * num / denom if denom else 0.0,
                })
    return rows


# -- first-flag alignment ------------------------------------------------------------


def first_flag_step(flagged: FlaggedCohort, ti: int) -> int | None:
    for si, lvl in enumerate(flagged.state_flags(ti)):
        if lvl.rank >= Level.YELLOW.rank:
            return si
    return None


def first_flag_alignment(
    flagged: FlaggedCohort,
    features: list[int] | None = None,
    window: AlignmentWindow = AlignmentWindow(),
) -> list[dict]:
    """Mean and sd of the value series (and optional observation features)
    aligned on the first raised flag, per outcome group.

    Keeps exactly the trajectories with >= pre_steps before their first flag
    and >= post_steps after it; flags too early or too late are excluded.
    """
    offsets = list(range(-window.pre_steps, window.post_steps + 1))
    eligible: dict[str, list[tuple[int, int]]] = {"positive": [], "negative": []}
    for ti, traj in enumerate(flagged.trajectories):
        f = first_flag_step(flagged, ti)
        if f is None:
            continue
        if f < window.pre_steps or f + window.post_steps > len(traj.transitions) - 1:
            continue
        eligible[traj.outcome.label].append((ti, f))
    if not any(eligible.values()):
        raise NoEligibleTrajectories(
            f"no trajectory has {window.pre_steps} steps before and "
            f"{window.post_steps} after its first flag"
        )

    def series_value(ti: int, si: int, name: str) -> float:
        if name == "v_d":
            return flagged.stat(ti, si, "median")[0]
        if name == "v_r":
            return flagged.stat(ti, si, "median")[1]
        if name == "q_d_admin":
            return flagged.stat(ti, si, "admin")[0]
        if name == "q_r_admin":
            return flagged.stat(ti, si, "admin")[1]
        dim = int(name.removeprefix("obs"))
        return float(flagged.trajectories[ti].transitions[si].state_or_obs[dim])

    names = ["v_d", "v_r", "q_d_admin", "q_r_admin"]
    if features:
        names.extend(f"obs{d}" for d in features)

    rows = []
    for outcome, members in eligible.items():
        if not members:
            continue
        for name in names:
            for off in offsets:
                vals = np.array([
                    series_value(ti, f + off, name) for ti, f in members
                ])
                rows.append({
                    "outcome": outcome, "series": name, "offset": off,
                    "n": len(vals),
                    "mean": float(vals.mean()),
                    "sd": float(vals.std(ddof=0)),
                })
    return rows


# -- value gap ----------------------------------------------------------------------


def value_gap(
    q_row: np.ndarray, administered: int, k_frac: float = 0.2
) -> tuple[float, float, float]:
    """(max, ceil(k_frac*n)-th largest, administered) values of one row."""
    q_row = np.asarray(q_row, dtype=float)
    if q_row.size == 0:
        raise EmptyRow("empty value row")
    if not 0 <= administered < q_row.size:
        raise BadIndex(f"administered treatment {administered} outside row of {q_row.size}")
    if not 0 < k_frac <= 1:
        raise BadIndex(f"k_frac {k_frac} outside (0, 1]")
    k = math.ceil(k_frac * q_row.size)
    ranked = np.sort(q_row)[::-1]
    return float(ranked[0]), float(ranked[k - 1]), float(q_row[administered])


def value_gap_rows(flagged: FlaggedCohort, k_frac: float = 0.2) -> list[dict]:
    """Per-step value-gap records for both value functions."""
    rows = []
    for ti, traj in enumerate(flagged.trajectories):
        for si, tr in enumerate(traj.transitions):
            for kind, table in (("D", flagged.qd[ti]), ("R", flagged.qr[ti])):
                mx, kth, adm = value_gap(table[si], tr.action, k_frac)
                rows.append({
                    "traj_id": traj.id, "step": si, "outcome": traj.outcome.label,
                    "kind": kind, "maximum": mx, "kth_best": kth, "administered": adm,
                })
    return rows


# -- CSV emission ----------------------------------------------------------------------


def write_csv(path: str | Path, rows: list[dict], columns: list[str]) -> None:
    """Deterministic CSV: fixed column order, repr-formatted floats."""
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            v = row[col]
            cells.append(repr(float(v)) if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


EMERGENCE_COLUMNS = ["bucket", "outcome", "criterion", "basis", "n",
                     "pct_none", "pct_yellow", "pct_red"]
DURATION_COLUMNS = ["outcome", "measure", "k", "numerator", "denominator", "pct"]
ALIGNMENT_COLUMNS = ["outcome", "series", "offset", "n", "mean", "sd"]
VALUE_GAP_COLUMNS = ["traj_id", "step", "outcome", "kind",
                     "maximum", "kth_best", "administered"]
