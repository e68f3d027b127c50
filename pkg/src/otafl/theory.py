"""Convergence-bound constants, gradient-bound estimation and rate fitting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ClientShard, EpochSampler
from .metrics import RunTrace
from .models import ModelSpec, gradient


@dataclass(frozen=True)
class TheoremConstants:
    """Constants of the O(1/T) bound for one cluster-head.

    ``A`` and ``Q1`` follow the printed expressions term by term, with the
    aggregation-slot indicator taken as 1.
    """

    L: float
    mu: float
    G: float
    Gamma: float
    alpha2_sum: float
    gamma: float
    A: float
    Q1: float
    P1: float
    P2: float
    d: int
    K_c: int
    C: int
    E: int
    W_row: tuple
    sigma2: tuple
    delta0: float

    def eta(self, t) -> np.ndarray | float:
        return 2.0 / (self.mu * (self.gamma + np.asarray(t, dtype=float)))

    def bound(self, t) -> np.ndarray | float:
        """``2 max(4 Q1, mu^2 gamma delta0) / (mu^2 (t + gamma - 1))``."""
        num = 2.0 * max(4.0 * self.Q1, self.mu**2 * self.gamma * self.delta0)
        return num / (self.mu**2 * (np.asarray(t, dtype=float) + self.gamma - 1.0))


def theorem_constants(
    *,
    L: float,
    mu: float,
    G: float,
    Gamma: float,
    alpha2: Sequence[float],
    E: int,
    P1: float,
    P2: float,
    d: int,
    mixing: np.ndarray,
    sigma2: Sequence[float],
    head: int,
    delta0: float,
) -> TheoremConstants:
    """Per-head constants; ``alpha2`` holds the variance bounds of that head's clients."""
    if mu <= 0:
        raise ValueError(f"strong-convexity constant must be positive, got {mu}")
    W = np.asarray(mixing, dtype=float)
    s2 = np.asarray(sigma2, dtype=float)
    C = W.shape[0]
    K_c = len(alpha2)
    if K_c < 1:
        raise ValueError("a head needs at least one client")
    row = W[head]
    w2 = float(row @ row)
    kappa2 = W @ s2
    EG2 = E**2 * G**2
    A = 8 * EG2 / (P1 * P2) * (C * P2 * w2 + d * float(kappa2.max()) + P1 + 1.0 / (2 * K_c))
    Q1 = (
        3 * C * w2 * P2 * A
        + 8 * EG2
        + 6 * L * Gamma
        + float(np.sum(alpha2)) / K_c**2
        + 4 * d * s2[head] * EG2 / (P1 * K_c**2)
        + d * float(kappa2[head]) * A
    )
    vals = (L, mu, G, Gamma, A, Q1)
    if not all(np.isfinite(v) for v in vals) or min(vals) < 0:
        raise ValueError(f"constants must be finite and nonnegative: {vals}")
    return TheoremConstants(
        L=L, mu=mu, G=G, Gamma=Gamma, alpha2_sum=float(np.sum(alpha2)),
        gamma=max(float(E), 12.0 * L / mu), A=A, Q1=Q1, P1=P1, P2=P2, d=d, K_c=K_c,
        C=C, E=E, W_row=tuple(row), sigma2=tuple(s2), delta0=delta0,
    )


def estimate_gradient_bound(
    model: ModelSpec,
    shards: Sequence[ClientShard],
    theta: np.ndarray,
    batch_size: int,
    seed: int,
    safety: float = 1.5,
    variance_batches: int = 64,
) -> tuple[float, list[float]]:
    """Empirical G and per-client alpha_k^2 at ``theta``.

    G is ``safety`` times the largest mini-batch gradient norm seen over one
    epoch of every client. alpha_k^2 is the mean squared deviation of
    mini-batch gradients from the full-batch gradient.
    """
    peak = 0.0
    alpha2 = []
    for s in shards:
        rng = np.random.default_rng([seed, 0x6B, s.client_id])
        sampler = EpochSampler(s.size, batch_size, rng)
        full = gradient(model, theta, s.features, s.labels)
        peak = max(peak, float(np.linalg.norm(full)))
        for _ in range(-(-s.size // sampler.batch_size)):
            idx = next(sampler)
            peak = max(peak, float(np.linalg.norm(gradient(model, theta, s.features[idx], s.labels[idx]))))
        dev = 0.0
        for _ in range(variance_batches):
            idx = next(sampler)
            diff = gradient(model, theta, s.features[idx], s.labels[idx]) - full
            dev += float(diff @ diff)
        alpha2.append(dev / variance_batches)
    return safety * peak, alpha2


def fit_convergence_slope(trace: RunTrace, t_min: float, t_max: float) -> float:
    """Least-squares slope of log distance against log t, averaged over nodes."""
    slopes = []
    for node in trace.nodes():
        ts, ds = trace.series("distance", node)
        keep = (ts >= t_min) & (ts <= t_max)
        ts, ds = ts[keep], ds[keep]
        if len(ts) < 2:
            raise ValueError(f"node {node}: fewer than two logged points in [{t_min}, {t_max}]")
        if np.any(ds <= 0):
            bad = ts[ds <= 0][0]
            raise ValueError(f"node {node}: non-positive distance at t={bad}; cannot take logs")
        slopes.append(np.polyfit(np.log(ts), np.log(ds), 1)[0])
    if not slopes:
        raise ValueError("trace has no distance series")
    return float(np.mean(slopes))


@dataclass
class BoundReport:
    t: np.ndarray
    distance: np.ndarray  # per logged t, worst head
    bound: np.ndarray
    violations: list[tuple[int, int, float, float]]  # (t, node, distance, bound)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.distance / self.bound))


def check_bound_dominance(trace: RunTrace, constants) -> BoundReport:
    """Compare each node's distance series with its bound curve.

    ``constants`` is one TheoremConstants for every node or a sequence indexed
    by node.
    """
    per_node = constants if isinstance(constants, (list, tuple)) else None
    violations = []
    ratio_rows: dict[int, tuple[float, float]] = {}
    for node in trace.nodes():
        c = per_node[node] if per_node is not None else constants
        ts, ds = trace.series("distance", node)
        bs = c.bound(ts)
        for t, dv, bv in zip(ts, ds, bs):
            if dv > bv:
                violations.append((int(t), node, float(dv), float(bv)))
            prev = ratio_rows.get(int(t))
            if prev is None or dv / bv > prev[0] / prev[1]:
                ratio_rows[int(t)] = (float(dv), float(bv))
    ts = np.array(sorted(ratio_rows))
    return BoundReport(
        t=ts,
        distance=np.array([ratio_rows[t][0] for t in ts]),
        bound=np.array([ratio_rows[t][1] for t in ts]),
        violations=violations,
    )
