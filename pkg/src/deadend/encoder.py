"""History encoder: maps a fixed window of (observation, previous action)
pairs to an embedding, trained self-supervised by predicting the next
observation under a unit-variance Gaussian head.

The training loss is the Gaussian negative log likelihood, which with unit
variance is half the squared error plus a constant; both forms are computed
on every batch and their identity asserted, pinning the sign/convention.
Windows are padded at episode start with a zero observation and a dedicated
null-action one-hot slot (n_actions + 1 action inputs).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import Diverged, NonTabularData, ShapeMismatch
from .mdp import Trajectory
from .net import MLP, Adam

NULL_ACTION = -1  # encoded as the extra one-hot slot


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    window: int = 8
    hidden: tuple[int, ...] = (64,)
    lr: float = 5e-4
    epochs: int = 600
    batch: int = 64

    def __post_init__(self):
        if self.embed_dim < 1 or self.window < 1:
            raise ValueError("embed_dim and window must be at least 1")
        if self.lr <= 0 or self.epochs < 1 or self.batch < 1:
            raise ValueError("bad lr/epochs/batch")


def _one_hot(index: int, width: int) -> np.ndarray:
    v = np.zeros(width)
    v[index] = 1.0
    return v


def build_window(
    traj: Trajectory, t: int, window: int, obs_dim: int, n_actions: int
) -> np.ndarray:
    """Flattened window of (obs, previous action) ending at step t."""
    slot = obs_dim + n_actions + 1
    out = np.zeros(window * slot)
    for k in range(window):
        u = t - (window - 1) + k
        base = k * slot
        if u < 0:
            out[base + obs_dim + n_actions] = 1.0  # null action, zero obs
            continue
        obs = traj.transitions[u].state_or_obs
        if isinstance(obs, (int, np.integer)):
            raise NonTabularData(
                "history windows need vector observations; tabular cohorts "
                "use the one-hot encoder"
            )
        out[base : base + obs_dim] = obs
        prev = traj.transitions[u - 1].action if u >= 1 else NULL_ACTION
        out[base + obs_dim + (prev if prev >= 0 else n_actions)] = 1.0
    return out


class HistoryEncoder:
    """Frozen or in-training window encoder (a plain MLP over the window)."""

    def __init__(self, config: EncoderConfig, obs_dim: int, n_actions: int,
                 rng: np.random.Generator | None = None, net: MLP | None = None):
        self.config = config
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.input_dim = config.window * (obs_dim + n_actions + 1)
        if net is not None:
            self.net = net
        else:
            sizes = (self.input_dim, *config.hidden, config.embed_dim)
            self.net = MLP(sizes, rng or np.random.default_rng(0))

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def encode(self, windows: np.ndarray) -> np.ndarray:
        """Deterministic embedding of one window or a batch of windows."""
        windows = np.asarray(windows, dtype=np.float64)
        single = windows.ndim == 1
        out = self.net.forward(windows)
        return out[0] if single else out

    def windows(self, traj: Trajectory) -> np.ndarray:
        return np.stack([
            build_window(traj, t, self.config.window, self.obs_dim, self.n_actions)
            for t in range(len(traj.transitions))
        ])

    def encode_trajectory(self, traj: Trajectory) -> np.ndarray:
        return self.encode(self.windows(traj))

    # -- checkpoint ----------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "config": {
                "embed_dim": self.config.embed_dim,
                "window": self.config.window,
                "hidden": list(self.config.hidden),
                "lr": self.config.lr,
                "epochs": self.config.epochs,
                "batch": self.config.batch,
                "obs_dim": self.obs_dim,
                "n_actions": self.n_actions,
                "kind": "history_encoder",
            },
            "layers": self.net.to_layer_docs(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "HistoryEncoder":
        doc = json.loads(Path(path).read_text())
        cfg = doc["config"]
        config = EncoderConfig(
            embed_dim=cfg["embed_dim"],
            window=cfg["window"],
            hidden=tuple(cfg["hidden"]),
            lr=cfg["lr"],
            epochs=cfg["epochs"],
            batch=cfg["batch"],
        )
        return cls(
            config, cfg["obs_dim"], cfg["n_actions"],
            net=MLP.from_layer_docs(doc["layers"]),
        )


class OneHotEncoder:
    """Tabular bypass: the embedding of a state index is its one-hot vector."""

    def __init__(self, n_states: int):
        self.n_states = n_states

    @property
    def embed_dim(self) -> int:
        return self.n_states

    def encode(self, states) -> np.ndarray:
        states = np.atleast_1d(np.asarray(states))
        if not np.issubdtype(states.dtype, np.integer):
            raise NonTabularData("one-hot encoder expects state indices")
        if states.min(initial=0) < 0 or states.max(initial=0) >= self.n_states:
            raise ShapeMismatch(f"state index outside [0, {self.n_states})")
        out = np.zeros((states.size, self.n_states))
        out[np.arange(states.size), states] = 1.0
        return out if states.size > 1 else out[0]

    def encode_trajectory(self, traj: Trajectory) -> np.ndarray:
        states = [tr.state_or_obs for tr in traj.transitions]
        if not all(isinstance(s, (int, np.integer)) for s in states):
            raise NonTabularData("trajectory holds observations, not state indices")
        return np.atleast_2d(self.encode(np.asarray(states, dtype=int)))


@dataclass
class SCModel:
    """Encoder plus next-observation decoder, trained jointly."""

    encoder: HistoryEncoder
    decoder: MLP
    identity_gap: float = field(default=0.0, init=False)  # worst NLL-vs-MSE gap seen

    def predict_next(self, windows: np.ndarray, actions: np.ndarray) -> np.ndarray:
        z = self.encoder.net.forward(windows)
        onehot = np.zeros((len(actions), self.encoder.n_actions))
        onehot[np.arange(len(actions)), actions] = 1.0
        return self.decoder.forward(np.concatenate([z, onehot], axis=1))

    def parameters(self) -> list[np.ndarray]:
        return self.encoder.net.parameters() + self.decoder.parameters()

    def loss_and_grads(self, batch, reduction: str = "mean"):
        """Gaussian NLL of the next observation; gradients via the 0.5*SE form.

        Asserts the NLL == 0.5*d*log(2pi) + 0.5*squared-error identity on
        every call (two float paths, tolerance 1e-9).
        """
        windows, actions, next_obs = batch
        pred = self.predict_next(windows, actions)
        err = pred - next_obs
        n = len(windows) if reduction == "mean" else 1
        d = next_obs.shape[1]

        half_sq = 0.5 * float((err**2).sum()) / n
        # Independent float path: per-dimension Gaussian log density.
        logpdf = -0.5 * err**2 - 0.5 * math.log(2.0 * math.pi)
        nll = -float(logpdf.sum(axis=1).sum()) / n
        gap = abs(nll - (0.5 * d * math.log(2.0 * math.pi) * (len(windows) / n) + half_sq))
        self.identity_gap = max(self.identity_gap, gap)
        if gap > 1e-9:
            raise AssertionError(f"NLL/MSE identity broken by {gap:.3e}")

        grad = err / n
        gz = self.decoder.backward(grad)[:, : self.encoder.embed_dim]
        self.encoder.net.backward(gz)
        grads = self.encoder.net.gradients() + self.decoder.gradients()
        return nll, grads


def _eligible_steps(trajectories: list[Trajectory]) -> list[tuple[int, int]]:
    # Terminal transitions carry no next observation and cannot be predicted.
    out = []
    for ti, traj in enumerate(trajectories):
        for si, tr in enumerate(traj.transitions):
            if tr.next_state_or_obs is not None:
                out.append((ti, si))
    return out


def train_sc(
    trajectories: list[Trajectory],
    config: EncoderConfig,
    seed: int = 0,
) -> tuple[SCModel, list[float]]:
    """Fit encoder and decoder by next-observation prediction.

    Returns the model and the epoch-wise mean NLL curve. Raises Diverged if
    the loss leaves the reals.
    """
    first = trajectories[0].transitions[0].state_or_obs
    if isinstance(first, (int, np.integer)):
        raise NonTabularData("train_sc needs vector observations")
    obs_dim = int(np.asarray(first).shape[0])
    n_actions = 1 + max(
        tr.action for traj in trajectories for tr in traj.transitions
    )

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xC,)))
    encoder = HistoryEncoder(config, obs_dim, n_actions, rng=rng)
    decoder = MLP(
        (config.embed_dim + n_actions, *config.hidden, obs_dim), rng
    )
    model = SCModel(encoder=encoder, decoder=decoder)
    opt = Adam(model.parameters(), lr=config.lr)

    steps = _eligible_steps(trajectories)
    if not steps:
        raise NonTabularData("no transitions with a next observation")
    windows = np.stack([
        build_window(trajectories[ti], si, config.window, obs_dim, n_actions)
        for ti, si in steps
    ])
    actions = np.array([trajectories[ti].transitions[si].action for ti, si in steps])
    next_obs = np.stack([
        np.asarray(trajectories[ti].transitions[si].next_state_or_obs, dtype=np.float64)
        for ti, si in steps
    ])

    curve: list[float] = []
    n = len(steps)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            loss, grads = model.loss_and_grads(
                (windows[idx], actions[idx], next_obs[idx])
            )
            if not math.isfinite(loss):
                raise Diverged(f"SC loss became {loss}")
            opt.step(model.parameters(), grads)
            total += loss * len(idx)
        curve.append(total / n)
    return model, curve


def validation_mse(model: SCModel, trajectories: list[Trajectory]) -> float:
    """Mean squared next-observation error on held-out trajectories."""
    steps = _eligible_steps(trajectories)
    if not steps:
        return float("nan")
    cfg = model.encoder.config
    windows = np.stack([
        build_window(trajectories[ti], si, cfg.window,
                     model.encoder.obs_dim, model.encoder.n_actions)
        for ti, si in steps
    ])
    actions = np.array([trajectories[ti].transitions[si].action for ti, si in steps])
    next_obs = np.stack([
        np.asarray(trajectories[ti].transitions[si].next_state_or_obs, dtype=np.float64)
        for ti, si in steps
    ])
    pred = model.predict_next(windows, actions)
    return float(((pred - next_obs) ** 2).sum(axis=1).mean())
