"""Losses, gradients and the centralized gradient descent reference.

Two models share one interface over flat parameter vectors:

* ``SvmLoss``: one-vs-all squared hinge, averaged over samples and classes,
  plus ``mu/2 * ||w||^2`` on every parameter (bias included). Strongly convex
  with modulus ``mu``.
* ``MlpLoss``: one tanh hidden layer, softmax negative log-likelihood plus
  the same L2 term. Non-convex.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np


class EmptyDataError(ValueError):
    pass


class Model(Protocol):
    mu: float
    param_count: int

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float: ...
    def grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray: ...
    def predict(self, w: np.ndarray, X: np.ndarray) -> np.ndarray: ...
    def init_params(self, rng: Optional[np.random.Generator] = None) -> np.ndarray: ...


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


@dataclass
class SvmLoss:
    num_features: int
    num_classes: int
    mu: float = 0.1

    @property
    def param_count(self) -> int:
        return self.num_classes * (self.num_features + 1)

    def _W(self, w: np.ndarray) -> np.ndarray:
        return np.asarray(w, dtype=float).reshape(self.num_classes, self.num_features + 1)

    def _slack(self, w, X, y):
        Xa = _augment(X)
        scores = Xa @ self._W(w).T
        t = -np.ones_like(scores)
        t[np.arange(len(y)), y] = 1.0
        return Xa, t, np.maximum(0.0, 1.0 - t * scores)

    def loss(self, w, X, y) -> float:
        _, _, slack = self._slack(w, X, y)
        return float(np.mean(slack ** 2) + 0.5 * self.mu * np.dot(w, w))

    def grad(self, w, X, y) -> np.ndarray:
        Xa, t, slack = self._slack(w, X, y)
        coef = -2.0 * slack * t / slack.size
        return (coef.T @ Xa).ravel() + self.mu * np.asarray(w, dtype=float)

    def predict(self, w, X) -> np.ndarray:
        return np.argmax(_augment(X) @ self._W(w).T, axis=1)

    def init_params(self, rng=None) -> np.ndarray:
        return np.zeros(self.param_count)

    def smoothness_bound(self, X: np.ndarray) -> float:
        """Upper bound on the Hessian's largest eigenvalue over the data."""
        Xa = _augment(X)
        gram = Xa.T @ Xa / Xa.shape[0]
        return float(self.mu + 2.0 / self.num_classes * np.linalg.eigvalsh(gram)[-1])


@dataclass
class MlpLoss:
    num_features: int
    num_classes: int
    mu: float = 0.1
    hidden: int = 32

    @property
    def param_count(self) -> int:
        F, H, C = self.num_features, self.hidden, self.num_classes
        return H * F + H + C * H + C

    def _unpack(self, w):
        F, H, C = self.num_features, self.hidden, self.num_classes
        w = np.asarray(w, dtype=float)
        i = 0
        W1 = w[i:i + H * F].reshape(H, F); i += H * F
        b1 = w[i:i + H]; i += H
        W2 = w[i:i + C * H].reshape(C, H); i += C * H
        b2 = w[i:i + C]
        return W1, b1, W2, b2

    def _forward(self, w, X):
        W1, b1, W2, b2 = self._unpack(w)
        h = np.tanh(X @ W1.T + b1)
        logits = h @ W2.T + b2
        logits -= logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return h, logp

    def loss(self, w, X, y) -> float:
        _, logp = self._forward(w, X)
        nll = -np.mean(logp[np.arange(len(y)), y])
        return float(nll + 0.5 * self.mu * np.dot(w, w))

    def grad(self, w, X, y) -> np.ndarray:
        W1, b1, W2, b2 = self._unpack(w)
        h, logp = self._forward(w, X)
        n = len(y)
        dlogits = np.exp(logp)
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        gW2 = dlogits.T @ h
        gb2 = dlogits.sum(axis=0)
        dh = (dlogits @ W2) * (1.0 - h ** 2)
        gW1 = dh.T @ X
        gb1 = dh.sum(axis=0)
        g = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
        return g + self.mu * np.asarray(w, dtype=float)

    def predict(self, w, X) -> np.ndarray:
        _, logp = self._forward(w, X)
        return np.argmax(logp, axis=1)

    def init_params(self, rng=None) -> np.ndarray:
        rng = np.random.default_rng(0) if rng is None else rng
        F, H, C = self.num_features, self.hidden, self.num_classes
        W1 = rng.standard_normal((H, F)) / np.sqrt(F)
        W2 = rng.standard_normal((C, H)) / np.sqrt(H)
        return np.concatenate([W1.ravel(), np.zeros(H), W2.ravel(), np.zeros(C)])


@dataclass
class LossSpec:
    kind: str = "svm"
    mu: float = 0.1
    eta: float = 10.0
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in ("svm", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.kind == "svm" and not self.mu < self.eta:
            raise ValueError("convex path needs 0 < mu < eta")

    @property
    def convex(self) -> bool:
        return self.kind == "svm"

    def build(self, num_features: int, num_classes: int) -> Model:
        if self.kind == "svm":
            return SvmLoss(num_features, num_classes, self.mu)
        return MlpLoss(num_features, num_classes, self.mu, self.hidden)


def _check(X, y):
    if len(y) == 0:
        raise EmptyDataError("node has no training samples")


def local_loss(model: Model, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    _check(X, y)
    return model.loss(w, X, y)


def local_gradient(model: Model, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check(X, y)
    return model.grad(w, X, y)


def accuracy(model: Model, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(model.predict(w, X) == y))


@dataclass
class GdTrajectory:
    weights: np.ndarray  # (K + 1, M)
    losses: np.ndarray   # (K + 1,)


def centralized_gd(
    model: Model,
    X: np.ndarray,
    y: np.ndarray,
    steps: int,
    beta: float,
    w0: Optional[np.ndarray] = None,
    keep_weights: bool = True,
) -> GdTrajectory:
    """Full-batch gradient descent over the pooled data."""
    w = model.init_params() if w0 is None else np.array(w0, dtype=float)
    ws = [w.copy()] if keep_weights else []
    fs = [model.loss(w, X, y)]
    for _ in range(steps):
        w = w - beta * model.grad(w, X, y)
        if keep_weights:
            ws.append(w.copy())
        fs.append(model.loss(w, X, y))
    weights = np.array(ws) if keep_weights else w[None, :]
    return GdTrajectory(weights, np.array(fs))


def reference_optimum(model: Model, X: np.ndarray, y: np.ndarray, beta: float,
                      steps: int, w0: Optional[np.ndarray] = None) -> tuple[np.ndarray, float]:
    """Long gradient descent run standing in for the unknown minimiser."""
    traj = centralized_gd(model, X, y, steps, beta, w0, keep_weights=False)
    return traj.weights[-1], float(traj.losses.min())


def empirical_smoothness(model: Model, X: np.ndarray, y: np.ndarray,
                         rng: np.random.Generator, pairs: int = 20,
                         scale: float = 1.0) -> float:
    """Largest observed ||grad(a) - grad(b)|| / ||a - b|| over random pairs."""
    best = 0.0
    for _ in range(pairs):
        a = scale * rng.standard_normal(model.param_count)
        b = a + 0.1 * scale * rng.standard_normal(model.param_count)
        ga, gb = model.grad(a, X, y), model.grad(b, X, y)
        best = max(best, float(np.linalg.norm(ga - gb) / np.linalg.norm(a - b)))
    return best
