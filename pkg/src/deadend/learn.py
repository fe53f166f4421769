"""Offline estimation of the dual value functions.

Two routes: plain tabular Q-learning over shuffled dataset sweeps, and a
fitted double-Q network on encoder embeddings fed by the 62+2 stratified
minibatches. Both run undiscounted with the dual rewards reconstructed from
terminal labels, and both keep every value inside the kind's legal range --
updates clamp the table cell, network targets and reported outputs are
clamped before use.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import TransitionBuffers, stratified_minibatch
from .errors import Diverged, NonTabularData, ShapeMismatch
from .mdp import DualKind, Terminal, Trajectory
from .net import MLP, Adam
from .solve import QTable


@dataclass(frozen=True)
class DQNConfig:
    hidden: int = 64
    lr: float = 1e-4
    batch: int = 64  # 62 main + 2 terminal-negative, fixed by the sampler
    target_sync: int = 2000
    updates: int = 20000

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.target_sync < 1 or self.updates < 1 or self.hidden < 1:
            raise ValueError("bad target_sync/updates/hidden")


class QNetwork:
    """One hidden ReLU layer onto one value per treatment, range-locked."""

    def __init__(self, input_dim: int, n_actions: int, kind: DualKind,
                 hidden: int = 64, rng: np.random.Generator | None = None,
                 net: MLP | None = None):
        self.input_dim = input_dim
        self.n_actions = n_actions
        self.kind = kind
        self.hidden = hidden
        self.net = net if net is not None else MLP(
            (input_dim, hidden, n_actions), rng or np.random.default_rng(0)
        )

    def q_values(self, x: np.ndarray) -> np.ndarray:
        """Clamped per-treatment values for one embedding or a batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        lo, hi = self.kind.value_range
        out = np.clip(self.net.forward(x), lo, hi)
        return out[0] if single else out

    def parameters(self) -> list[np.ndarray]:
        return self.net.parameters()

    def loss_and_grads(self, batch, reduction: str = "mean"):
        """Squared error of the chosen treatments against fixed targets."""
        x, actions, targets = batch
        q = self.net.forward(x)
        picked = q[np.arange(len(actions)), actions]
        err = picked - targets
        n = len(actions) if reduction == "mean" else 1
        loss = float((err**2).sum()) / n
        gq = np.zeros_like(q)
        gq[np.arange(len(actions)), actions] = 2.0 * err / n
        self.net.backward(gq)
        return loss, self.net.gradients()

    def to_json_dict(self) -> dict:
        return {
            "config": {
                "input_dim": self.input_dim,
                "n_actions": self.n_actions,
                "kind": self.kind.value,
                "hidden": self.hidden,
                "kind_of_model": "q_network",
            },
            "layers": self.net.to_layer_docs(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "QNetwork":
        doc = json.loads(Path(path).read_text())
        cfg = doc["config"]
        return cls(
            input_dim=cfg["input_dim"],
            n_actions=cfg["n_actions"],
            kind=DualKind(cfg["kind"]),
            hidden=cfg["hidden"],
            net=MLP.from_layer_docs(doc["layers"]),
        )


def _flatten_tabular(dataset: list[Trajectory]):
    s, a, term, s_next = [], [], [], []
    for traj in dataset:
        for tr in traj.transitions:
            if not isinstance(tr.state_or_obs, (int, np.integer)):
                raise NonTabularData("tabular Q-learning needs state indices")
            s.append(int(tr.state_or_obs))
            a.append(tr.action)
            term.append(int(tr.terminal))
            s_next.append(
                int(tr.next_state_or_obs) if tr.terminal == Terminal.NONE else -1
            )
    return s, a, term, s_next


def tabular_q_learning(
    dataset: list[Trajectory],
    n_states: int,
    n_actions: int,
    kind: DualKind,
    lr: float = 0.1,
    sweeps: int = 10,
    seed: int = 0,
    visit_decay: bool = False,
    decay_power: float = 0.77,
    sweep_callback=None,
) -> QTable:
    """Q-learning over shuffled sweeps of an offline tabular dataset.

    Zero-initialized, undiscounted, dual rewards from the terminal labels,
    every touched cell clamped to the kind's range. ``visit_decay`` switches
    the constant step size to the polynomial visit schedule
    1 / N(s,a)**decay_power (1/N itself mixes stale bootstrapped targets far
    too slowly). The optional ``sweep_callback(sweep_index, q_copy)`` fires
    after each sweep; the copy is safe to keep.
    """
    s_arr, a_arr, term_arr, nxt_arr = _flatten_tabular(dataset)
    n = len(s_arr)
    rng = np.random.default_rng(seed)
    lo, hi = kind.value_range
    reward_of = {int(t): kind.reward_into(Terminal(t)) for t in
                 (Terminal.NONE, Terminal.POSITIVE, Terminal.NEGATIVE)}

    ql = [[0.0] * n_actions for _ in range(n_states)]  # lists keep the loop cheap
    vl = [[0] * n_actions for _ in range(n_states)]
    for sweep in range(sweeps):
        order = rng.permutation(n)
        for k in order:
            s, a, t, s2 = s_arr[k], a_arr[k], term_arr[k], nxt_arr[k]
            target = reward_of[t]
            if t == int(Terminal.NONE):
                target += max(ql[s2])
            if visit_decay:
                vl[s][a] += 1
                alpha = 1.0 / vl[s][a] ** decay_power
            else:
                alpha = lr
            val = ql[s][a] + alpha * (target - ql[s][a])
            ql[s][a] = lo if val < lo else hi if val > hi else val
        if sweep_callback is not None:
            sweep_callback(sweep, np.array(ql))
    return QTable(np.array(ql), kind)


def dataset_visit_counts(
    dataset: list[Trajectory], n_states: int, n_actions: int
) -> np.ndarray:
    """How often each (state, treatment) pair occurs in the dataset."""
    s, a, _, _ = _flatten_tabular(dataset)
    counts = np.zeros((n_states, n_actions), dtype=np.int64)
    np.add.at(counts, (s, a), 1)
    return counts


def double_q_targets(
    online: QNetwork,
    target: QNetwork,
    rewards: np.ndarray,
    terminal: np.ndarray,
    x_next: np.ndarray,
    kind: DualKind,
) -> np.ndarray:
    """Bootstrapped targets: reward alone where terminal, otherwise the
    target network read at the online network's argmax, clamped to range."""
    lo, hi = kind.value_range
    greedy = online.q_values(x_next).argmax(axis=1)
    boot = target.q_values(x_next)[np.arange(len(greedy)), greedy]
    return np.clip(rewards + np.where(terminal, 0.0, boot), lo, hi)


def fit_double_q(
    buffers: TransitionBuffers,
    encoder,
    config: DQNConfig,
    kind: DualKind,
    seed: int = 0,
    fallback_to_main: bool = False,
) -> tuple[QNetwork, list[float]]:
    """Fitted double-Q on frozen encoder embeddings.

    Per update: draw a stratified minibatch; terminal rows take the bare dual
    reward as target, the rest bootstrap with the target network evaluated at
    the online network's argmax (both read through the clamp); the summed
    target is clamped again before the squared-error loss. The target network
    copies the online weights every ``target_sync`` updates. An empty
    negative-terminal buffer raises unless ``fallback_to_main`` opts into
    plain batches.
    """
    trajectories = buffers.trajectories
    embeddings = [np.atleast_2d(encoder.encode_trajectory(t)) for t in trajectories]
    embed_dim = embeddings[0].shape[1]
    n_actions = 1 + max(tr.action for t in trajectories for tr in t.transitions)

    row_of: dict[tuple[int, int], int] = {}
    xs, acts, rewards, terminal, x_next = [], [], [], [], []
    for ti, traj in enumerate(trajectories):
        for si, tr in enumerate(traj.transitions):
            row_of[(ti, si)] = len(xs)
            xs.append(embeddings[ti][si])
            acts.append(tr.action)
            rewards.append(kind.reward_into(Terminal(tr.terminal)))
            is_term = tr.terminal != Terminal.NONE
            terminal.append(is_term)
            x_next.append(np.zeros(embed_dim) if is_term else embeddings[ti][si + 1])
    xs = np.asarray(xs)
    acts = np.asarray(acts)
    rewards = np.asarray(rewards)
    terminal = np.asarray(terminal)
    x_next = np.asarray(x_next)

    seq = np.random.SeedSequence(entropy=seed, spawn_key=(0xD,))
    init_rng, batch_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    online = QNetwork(embed_dim, n_actions, kind, hidden=config.hidden, rng=init_rng)
    target = QNetwork(embed_dim, n_actions, kind, hidden=config.hidden, rng=init_rng)
    target.net.copy_from(online.net)
    opt = Adam(online.parameters(), lr=config.lr)

    curve: list[float] = []
    for update in range(config.updates):
        entries = stratified_minibatch(buffers, batch_rng, fallback_to_main=fallback_to_main)
        idx = np.fromiter((row_of[e] for e in entries), dtype=np.int64)
        xb, ab, rb, tb, xnb = xs[idx], acts[idx], rewards[idx], terminal[idx], x_next[idx]
        y = double_q_targets(online, target, rb, tb, xnb, kind)
        loss, grads = online.loss_and_grads((xb, ab, y))
        if not math.isfinite(loss):
            raise Diverged(f"loss became {loss} at update {update}")
        opt.step(online.parameters(), grads)
        curve.append(loss)
        if (update + 1) % config.target_sync == 0:
            target.net.copy_from(online.net)
    return online, curve


def q_values(q, state_or_embedding) -> np.ndarray:
    """Per-treatment value vector from either a table or a network, clamped."""
    if isinstance(q, QTable):
        s = state_or_embedding
        if not isinstance(s, (int, np.integer)):
            raise ShapeMismatch("a QTable is indexed by a state integer")
        if not 0 <= int(s) < q.values.shape[0]:
            raise ShapeMismatch(f"state {s} outside table of {q.values.shape[0]}")
        lo, hi = q.kind.value_range
        return np.clip(q.values[int(s)], lo, hi)
    if isinstance(q, QNetwork):
        x = np.asarray(state_or_embedding, dtype=np.float64)
        if x.shape[-1] != q.input_dim:
            raise ShapeMismatch(f"embedding width {x.shape[-1]}, network wants {q.input_dim}")
        return q.q_values(x)
    raise ShapeMismatch(f"unsupported value model {type(q).__name__}")
