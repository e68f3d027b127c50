"""Analog over-the-air signalling on an AWGN multiple-access channel.

Clients send ``sqrt(p) * (theta_k - anchor)``; the receiver sees the sum plus
Gaussian noise and undoes the scaling. Cluster-heads then exchange
``sqrt(q) * theta_tilde`` with their neighbours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

GENIE = "genie"
BOUND = "bound"
PAPER_EXACT = "paper-exact"
NORMALIZED = "normalized"
DIRECT = "direct"
PER_LINK = "per-link"

# substream tags for noise_stream
UPLINK = 1
CONSENSUS = 2
LINK = 3

# returned by the precode factors when every transmitted vector is zero
INFINITE_HEADROOM = math.inf


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelEnv:
    """Power budgets and receiver noise.

    ``sigma2[i]`` is the noise variance at receiver i (cluster-head, server or
    client depending on the protocol); a length-1 vector is broadcast.
    ``headroom_cap`` replaces an infinite precoding factor in the decoders.
    """

    P1: float
    P2: float
    sigma2: np.ndarray = field(default_factory=lambda: np.zeros(1))
    noise_seed: int = 0
    precode_mode: str = GENIE
    noise_injection: str = DIRECT
    headroom_cap: float = 1e12

    def __post_init__(self):
        object.__setattr__(self, "sigma2", np.atleast_1d(np.asarray(self.sigma2, dtype=float)))
        if not (self.P1 > 0 and self.P2 > 0):
            raise ChannelError(f"power budgets must be positive, got P1={self.P1}, P2={self.P2}")
        if np.any(self.sigma2 < 0):
            raise ChannelError("noise variances must be nonnegative")
        if self.precode_mode not in (GENIE, BOUND):
            raise ChannelError(f"unknown precode mode {self.precode_mode!r}")
        if self.noise_injection not in (DIRECT, PER_LINK):
            raise ChannelError(f"unknown noise injection {self.noise_injection!r}")

    def variance(self, receiver: int) -> float:
        if len(self.sigma2) == 1:
            return float(self.sigma2[0])
        return float(self.sigma2[receiver])

    def variances(self, n: int) -> np.ndarray:
        return np.array([self.variance(i) for i in range(n)])


def noise_stream(seed: int, tag: int, t: int, receiver: int) -> np.random.Generator:
    """Independent generator keyed by (seed, phase, slot, receiver)."""
    return np.random.default_rng([seed, tag, t, receiver])


def sample_noise(dim: int, variance: float, rng: np.random.Generator) -> np.ndarray:
    if variance < 0:
        raise ChannelError(f"negative noise variance {variance}")
    if variance == 0:
        return np.zeros(dim)
    return rng.normal(scale=math.sqrt(variance), size=dim)


def snr_to_variance(power: float, snr_db: float) -> float:
    if power <= 0:
        raise ChannelError("power must be positive")
    return power / 10 ** (snr_db / 10)


def _max_sq_norm(vectors: Sequence[np.ndarray]) -> float:
    return max(float(v @ v) for v in vectors)


def uplink_precode_factor(deltas: Sequence[np.ndarray], P1: float) -> float:
    """``P1 / max_k ||delta_k||^2`` from realized deltas.

    Returns INFINITE_HEADROOM when every delta is zero.
    """
    peak = _max_sq_norm(deltas)
    return INFINITE_HEADROOM if peak == 0 else P1 / peak


def consensus_precode_factor(head_params: Sequence[np.ndarray], P2: float) -> float:
    peak = _max_sq_norm(head_params)
    return INFINITE_HEADROOM if peak == 0 else P2 / peak


def bound_precode_factor(power: float, E: int, eta: float, G: float) -> float:
    """Precoding from the analytic bound ``E||delta||^2 <= 4 E^2 eta^2 G^2``."""
    if G <= 0 or eta <= 0:
        raise ChannelError("bound-mode precoding needs G > 0 and eta > 0")
    return power / (4.0 * E**2 * eta**2 * G**2)


def encode_client(theta_k: np.ndarray, theta_anchor: np.ndarray, p_t: float) -> np.ndarray:
    if math.isinf(p_t):
        return np.zeros_like(theta_k)
    if p_t <= 0:
        raise ChannelError(f"precoding factor must be positive, got {p_t}")
    return math.sqrt(p_t) * (theta_k - theta_anchor)


def encode_head(theta_tilde: np.ndarray, q_t: float) -> np.ndarray:
    if math.isinf(q_t):
        return np.zeros_like(theta_tilde)
    if q_t <= 0:
        raise ChannelError(f"precoding factor must be positive, got {q_t}")
    return math.sqrt(q_t) * theta_tilde


def mac_superpose(signals: Sequence[np.ndarray], noise: np.ndarray) -> np.ndarray:
    """Sum of simultaneously transmitted signals plus receiver noise.

    Signals are accumulated in list order; callers pass them sorted by
    transmitter id.
    """
    out = np.zeros_like(noise, dtype=float)
    for s in signals:
        if s.shape != noise.shape:
            raise ChannelError(f"signal shape {s.shape} != noise shape {noise.shape}")
        out += s
    return out + noise


def _effective(factor: float, cap: float) -> float:
    return cap if math.isinf(factor) else factor


def decode_cluster(y: np.ndarray, K_c: int, p_t: float, theta_prev: np.ndarray,
                   cap: float = 1e12) -> np.ndarray:
    """``y / (K_c sqrt(p_t)) + theta_prev``: noisy average of the cluster."""
    if K_c < 1:
        raise ChannelError("cluster must have at least one client")
    return y / (K_c * math.sqrt(_effective(p_t, cap))) + theta_prev


def exchange_receive(head_signals: Sequence[np.ndarray], mixing_row: np.ndarray,
                     noise: np.ndarray, receiver: int | None = None) -> np.ndarray:
    mixing_row = np.asarray(mixing_row, dtype=float)
    if len(mixing_row) != len(head_signals):
        raise ChannelError(f"{len(head_signals)} signals but mixing row of length {len(mixing_row)}")
    if receiver is not None and mixing_row[receiver] != 0:
        raise ChannelError(f"mixing row has self-weight {mixing_row[receiver]} at receiver {receiver}")
    out = np.zeros_like(noise, dtype=float)
    for w, s in zip(mixing_row, head_signals):
        if s.shape != noise.shape:
            raise ChannelError(f"signal shape {s.shape} != noise shape {noise.shape}")
        if w != 0:
            out += w * s
    return out + noise


def effective_noise_variance(mixing_row: np.ndarray, sigma2_vec: np.ndarray) -> float:
    mixing_row = np.asarray(mixing_row, dtype=float)
    sigma2_vec = np.asarray(sigma2_vec, dtype=float)
    if mixing_row.shape != sigma2_vec.shape:
        raise ChannelError("mixing row and noise vector lengths differ")
    return float(mixing_row @ sigma2_vec)


def per_link_noise(mixing_row: np.ndarray, sigma2_vec: np.ndarray, dim: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Aggregate of one Gaussian noise per incoming link.

    The link from head j carries ``N(0, sigma2_j I)`` and enters with
    amplitude ``sqrt(W(c, j))``, so the total variance is
    ``sum_j W(c, j) sigma2_j``.
    """
    out = np.zeros(dim)
    for w, s2 in zip(mixing_row, sigma2_vec):
        # draw even for zero weights so the stream position is layout-independent
        n = rng.standard_normal(dim)
        if w > 0 and s2 > 0:
            out += math.sqrt(w * s2) * n
    return out


def decode_consensus(theta_tilde_c: np.ndarray, r_c: np.ndarray, q_t: float,
                     mixing_row: np.ndarray, mode: str = NORMALIZED,
                     cap: float = 1e12) -> np.ndarray:
    """Combine a head's own estimate with the received neighbour mixture.

    ``paper-exact`` returns ``theta_tilde + r / sqrt(q)``; ``normalized``
    divides that by ``1 + sum_j W(c, j)`` so the result is a convex
    combination.
    """
    if mode not in (PAPER_EXACT, NORMALIZED):
        raise ChannelError(f"unknown decode mode {mode!r}")
    out = theta_tilde_c + r_c / math.sqrt(_effective(q_t, cap))
    if mode == NORMALIZED:
        out = out / (1.0 + float(np.sum(mixing_row)))
    return out
