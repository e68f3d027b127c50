"""Loss and gradient evaluation for the supported model families.

Parameters are always a flat float64 vector. Layouts:

* ``ridge-quadratic``: ``theta`` of length m, loss ``0.5 (x.theta - y)^2``.
* ``multinomial-logistic-l2``: weight matrix (m, classes) row-major, then bias.
* ``one-hidden-layer-mlp``: W1 (m, h), b1 (h), W2 (h, classes), b2 (classes),
  tanh hidden units.

Every kind adds ``0.5 * l2_coeff * ||theta||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .data import ClientShard

QUADRATIC = "ridge-quadratic"
LOGISTIC = "multinomial-logistic-l2"
MLP = "one-hidden-layer-mlp"
KINDS = (QUADRATIC, LOGISTIC, MLP)


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    m: int
    num_classes: int = 1
    hidden: int = 0
    l2_coeff: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.m < 1:
            raise DimensionError("m must be >= 1")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be nonnegative")
        if self.kind in (QUADRATIC, LOGISTIC) and self.l2_coeff <= 0:
            raise ValueError(f"{self.kind} needs l2_coeff > 0 for strong convexity")
        if self.kind != QUADRATIC and self.num_classes < 2:
            raise DimensionError("classification models need num_classes >= 2")
        if self.kind == MLP and self.hidden < 1:
            raise DimensionError("mlp needs hidden >= 1")

    @property
    def dim(self) -> int:
        m, c, h = self.m, self.num_classes, self.hidden
        if self.kind == QUADRATIC:
            return m
        if self.kind == LOGISTIC:
            return m * c + c
        return m * h + h + h * c + c

    @property
    def is_classifier(self) -> bool:
        return self.kind != QUADRATIC


@dataclass(frozen=True)
class ProxConfig:
    """Proximal penalty ``0.5 * lambda_p * ||theta - anchor||^2``."""

    lambda_p: float
    anchor: np.ndarray

    def __post_init__(self):
        if self.lambda_p < 0:
            raise ValueError("lambda_p must be >= 0")


def _check(spec: ModelSpec, params: np.ndarray, X: np.ndarray):
    if params.shape != (spec.dim,):
        raise DimensionError(f"params shape {params.shape} != ({spec.dim},) for {spec.kind}")
    if X.ndim != 2 or X.shape[1] != spec.m:
        raise DimensionError(f"features shape {X.shape} incompatible with m={spec.m}")
    if len(X) == 0:
        raise DimensionError("empty batch")


def _unpack_mlp(spec: ModelSpec, params: np.ndarray):
    m, h, c = spec.m, spec.hidden, spec.num_classes
    i = 0
    W1 = params[i : i + m * h].reshape(m, h); i += m * h
    b1 = params[i : i + h]; i += h
    W2 = params[i : i + h * c].reshape(h, c); i += h * c
    b2 = params[i : i + c]
    return W1, b1, W2, b2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    if spec.kind == LOGISTIC:
        m, c = spec.m, spec.num_classes
        return X @ params[: m * c].reshape(m, c) + params[m * c :]
    if spec.kind == MLP:
        W1, b1, W2, b2 = _unpack_mlp(spec, params)
        return np.tanh(X @ W1 + b1) @ W2 + b2
    raise ValueError("logits are only defined for classifiers")


def loss(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray,
         prox: Optional[ProxConfig] = None) -> float:
    _check(spec, params, X)
    if spec.kind == QUADRATIC:
        r = X @ params - y
        data = 0.5 * float(r @ r) / len(y)
    else:
        lp = _log_softmax(logits(spec, params, X))
        data = -float(lp[np.arange(len(y)), y.astype(np.intp)].mean())
    value = data + 0.5 * spec.l2_coeff * float(params @ params)
    if prox is not None and prox.lambda_p > 0:
        diff = params - prox.anchor
        value += 0.5 * prox.lambda_p * float(diff @ diff)
    return value


def gradient(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray,
             prox: Optional[ProxConfig] = None) -> np.ndarray:
    _check(spec, params, X)
    n = len(y)
    if spec.kind == QUADRATIC:
        g = X.T @ (X @ params - y) / n
    elif spec.kind == LOGISTIC:
        p = np.exp(_log_softmax(logits(spec, params, X)))
        p[np.arange(n), y.astype(np.intp)] -= 1.0
        p /= n
        g = np.concatenate([(X.T @ p).ravel(), p.sum(axis=0)])
    else:
        W1, b1, W2, b2 = _unpack_mlp(spec, params)
        hid = np.tanh(X @ W1 + b1)
        p = np.exp(_log_softmax(hid @ W2 + b2))
        p[np.arange(n), y.astype(np.intp)] -= 1.0
        p /= n
        dh = (p @ W2.T) * (1.0 - hid**2)
        g = np.concatenate([(X.T @ dh).ravel(), dh.sum(axis=0), (hid.T @ p).ravel(), p.sum(axis=0)])
    g = g + spec.l2_coeff * params
    if prox is not None and prox.lambda_p > 0:
        g = g + prox.lambda_p * (params - prox.anchor)
    return g


def local_loss(spec: ModelSpec, params: np.ndarray, shard: ClientShard,
               prox: Optional[ProxConfig] = None) -> float:
    return loss(spec, params, shard.features, shard.labels, prox)


def local_gradient(spec: ModelSpec, params: np.ndarray, batch,
                   prox: Optional[ProxConfig] = None) -> np.ndarray:
    """Gradient on a mini-batch given as a shard or an ``(X, y)`` pair."""
    X, y = (batch.features, batch.labels) if isinstance(batch, ClientShard) else batch
    return gradient(spec, params, X, y, prox)


def sgd_step(params: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    if eta <= 0:
        raise ValueError(f"learning rate must be positive, got {eta}")
    if params.shape != grad.shape:
        raise DimensionError(f"{params.shape} vs {grad.shape}")
    return params - eta * grad


def global_objective(spec: ModelSpec, params: np.ndarray, shards: Sequence[ClientShard]) -> float:
    if not shards:
        raise ValueError("need at least one shard")
    return sum(local_loss(spec, params, s) for s in shards) / len(shards)


def predict(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    return logits(spec, params, X).argmax(axis=1)


def accuracy(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    return float((predict(spec, params, X) == y).mean())


def initial_params(dim: int, seed: int, variance: float = 0.01) -> np.ndarray:
    """Shared starting point drawn from N(0, variance * I)."""
    rng = np.random.default_rng([seed, 0x1A17])
    return rng.normal(scale=np.sqrt(variance), size=dim)


class QuadraticConstants(NamedTuple):
    theta_star: np.ndarray
    L: float
    mu: float
    Gamma: float


def _normal_equations(X: np.ndarray, y: np.ndarray, l2: float):
    n, m = X.shape
    return X.T @ X / n + l2 * np.eye(m), X.T @ y / n


def quadratic_constants_and_optimum(shards: Sequence[ClientShard], l2_coeff: float) -> QuadraticConstants:
    """Closed-form optimum and curvature constants of the global ridge objective.

    ``Gamma = F(theta*) - mean_k min f_k`` measures heterogeneity.
    """
    if not shards:
        raise ValueError("need at least one shard")
    if l2_coeff <= 0:
        raise np.linalg.LinAlgError("l2_coeff must be positive for a nonsingular system")
    m = shards[0].features.shape[1]
    spec = ModelSpec(QUADRATIC, m, l2_coeff=l2_coeff)
    H = np.zeros((m, m))
    b = np.zeros(m)
    local_min = 0.0
    for s in shards:
        Hk, bk = _normal_equations(s.features, s.labels, l2_coeff)
        H += Hk
        b += bk
        local_min += local_loss(spec, np.linalg.solve(Hk, bk), s)
    H /= len(shards)
    b /= len(shards)
    theta_star = np.linalg.solve(H, b)
    eig = np.linalg.eigvalsh(H)
    Gamma = global_objective(spec, theta_star, shards) - local_min / len(shards)
    return QuadraticConstants(theta_star, float(eig[-1]), float(eig[0]), max(float(Gamma), 0.0))
