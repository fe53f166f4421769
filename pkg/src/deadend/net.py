"""Minimal dense networks with hand-written backprop.

Both trainable models in this package (the history encoder/decoder pair and
the Q networks) are small ReLU MLPs, so the whole autodiff surface is one
layer type plus Adam. Keeping it by hand makes the finite-difference
gradient check a real oracle instead of a framework comparison.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch


class Dense:
    """Affine layer, He-initialized. Caches its input for the backward pass."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        self.b = np.zeros(n_out)
        self._x: np.ndarray | None = None
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w + self.b

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self.gw = self._x.T @ grad_out
        self.gb = grad_out.sum(axis=0)
        return grad_out @ self.w.T


class MLP:
    """Dense stack with ReLU between layers and a linear head."""

    def __init__(self, sizes: tuple[int, ...], rng: np.random.Generator):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.layers = [Dense(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self._pre: list[np.ndarray] = []

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ShapeMismatch(f"input width {x.shape[1]}, network expects {self.n_in}")
        self._pre = []
        out = x
        for i, layer in enumerate(self.layers):
            out = layer.forward(out)
            if i < len(self.layers) - 1:
                self._pre.append(out)
                out = np.maximum(out, 0.0)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            g = self.layers[i].backward(g)
            if i > 0:
                g = g * (self._pre[i - 1] > 0.0)
        return g

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.w, layer.b))
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.gw, layer.gb))
        return out

    def copy_from(self, other: "MLP") -> None:
        if self.sizes != other.sizes:
            raise ShapeMismatch(f"cannot copy weights {other.sizes} into {self.sizes}")
        for mine, theirs in zip(self.layers, other.layers):
            mine.w[...] = theirs.w
            mine.b[...] = theirs.b

    # -- checkpoint schema shared across models ------------------------------

    def to_layer_docs(self) -> list[dict]:
        return [
            {
                "rows": layer.w.shape[0],
                "cols": layer.w.shape[1],
                "weights": layer.w.ravel().tolist(),
                "bias": layer.b.tolist(),
            }
            for layer in self.layers
        ]

    @classmethod
    def from_layer_docs(cls, docs: list[dict]) -> "MLP":
        sizes = [docs[0]["rows"]] + [d["cols"] for d in docs]
        net = cls(tuple(sizes), np.random.default_rng(0))
        for layer, doc in zip(net.layers, docs):
            layer.w[...] = np.asarray(doc["weights"], dtype=np.float64).reshape(
                doc["rows"], doc["cols"]
            )
            layer.b[...] = np.asarray(doc["bias"], dtype=np.float64)
        return net


class Adam:
    """Standard Adam on a fixed parameter list."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def gradient_check(
    model,
    batch,
    rng: np.random.Generator | None = None,
    max_params: int = 64,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``model`` must expose ``parameters()`` (mutable arrays) and
    ``loss_and_grads(batch)`` returning a scalar loss plus gradients aligned
    with the parameter list. Probes at most ``max_params`` randomly chosen
    scalar parameters.
    """
    rng = rng or np.random.default_rng(0)
    params = model.parameters()
    _, grads = model.loss_and_grads(batch)

    flat = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if len(flat) > max_params:
        picks = rng.choice(len(flat), size=max_params, replace=False)
        flat = [flat[int(k)] for k in picks]

    worst = 0.0
    for i, j in flat:
        p = params[i].ravel()
        orig = p[j]
        p[j] = orig + step
        up, _ = model.loss_and_grads(batch)
        p[j] = orig - step
        down, _ = model.loss_and_grads(batch)
        p[j] = orig
        numeric = (up - down) / (2.0 * step)
        analytic = grads[i].ravel()[j]
        scale = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst
