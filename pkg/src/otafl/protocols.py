"""Round-structured execution of CWFL, COTAF, DSGD and local-only training.

Time is counted in local SGD steps ``t = 1..T``. Every step each client
takes one mini-batch step; when ``t`` is a multiple of ``E`` the protocol
aggregates and broadcasts. Metrics are logged at ``t = 0``, at every
aggregation slot and at ``t = T``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import channel as ch
from .channel import ChannelEnv
from .data import ClientShard, Dataset, EpochSampler
from .metrics import MetricsRow, RunTrace
from .models import ModelSpec, ProxConfig, accuracy, global_objective, gradient, initial_params
from .topology import ClusterLayout, client_mixing_uniform

log = logging.getLogger(__name__)

CWFL = "cwfl"
CWFL_PROX = "cwfl-prox"
COTAF = "cotaf"
COTAF_PROX = "cotaf-prox"
DSGD = "dsgd"
LOCAL = "local"
PROTOCOLS = (CWFL, CWFL_PROX, COTAF, COTAF_PROX, DSGD, LOCAL)


class ProtocolError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


class PowerCouplingError(RuntimeError):
    """Bound-mode precoding violated ``p^t <= q^(t-E)``."""


@dataclass(frozen=True)
class RoundSchedule:
    T: int
    E: int

    @property
    def H(self) -> range:
        return range(self.E, self.T + 1, self.E)

    def aggregates(self, t: int) -> bool:
        return t > 0 and t % self.E == 0


def schedule_aggregations(T: int, E: int) -> RoundSchedule:
    if E < 1 or T < E:
        raise ProtocolError(f"need T >= E >= 1, got T={T}, E={E}")
    return RoundSchedule(T, E)


@dataclass(frozen=True)
class LearningRate:
    """``constant``: eta; ``theorem``: 2 / (mu (gamma + t))."""

    kind: str = "constant"
    eta: float = 0.001
    mu: float = 1.0
    gamma: float = 1.0

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return self.eta
        if self.kind == "theorem":
            return 2.0 / (self.mu * (self.gamma + t))
        raise ProtocolError(f"unknown learning-rate schedule {self.kind!r}")

    @classmethod
    def theorem(cls, mu: float, L: float, E: int) -> "LearningRate":
        return cls("theorem", mu=mu, gamma=max(E, 12.0 * L / mu))


@dataclass
class Problem:
    shards: list[ClientShard]
    test: Optional[Dataset] = None
    theta_star: Optional[np.ndarray] = None

    @property
    def K(self) -> int:
        return len(self.shards)


@dataclass
class ProtocolConfig:
    kind: str
    model: ModelSpec
    problem: Problem
    channel: ChannelEnv
    T: int
    E: int
    layout: Optional[ClusterLayout] = None
    mixing: Optional[np.ndarray] = None
    client_mixing: Optional[np.ndarray] = None
    lambda_p: float = 0.0
    lr: LearningRate = field(default_factory=LearningRate)
    decode_mode: str = ch.NORMALIZED
    batch_size: int = 64
    seed: int = 0
    G: Optional[float] = None
    track_loss: bool = False
    theta0: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ProtocolError(f"unknown protocol {self.kind!r}")
        if self.lambda_p < 0:
            raise ProtocolError("lambda_p must be >= 0")
        if self.kind in (CWFL_PROX, COTAF_PROX) and self.lambda_p <= 0:
            raise ProtocolError(f"{self.kind} needs lambda_p > 0, got {self.lambda_p}")
        if self.kind in (CWFL, CWFL_PROX):
            if self.layout is None or self.mixing is None:
                raise ProtocolError(f"{self.kind} needs a cluster layout and mixing matrix")
            if self.layout.K != self.problem.K:
                raise ProtocolError(f"layout covers {self.layout.K} clients, problem has {self.problem.K}")
            if self.mixing.shape != (self.layout.C, self.layout.C):
                raise ProtocolError(f"mixing matrix {self.mixing.shape} does not match C={self.layout.C}")
        if self.channel.precode_mode == ch.BOUND and not self.G:
            raise ProtocolError("bound-mode precoding needs a gradient bound G")

    @property
    def schedule(self) -> RoundSchedule:
        return schedule_aggregations(self.T, self.E)

    def with_kind(self, kind: str, **changes) -> "ProtocolConfig":
        from dataclasses import replace
        return replace(self, kind=kind, **changes)


def channel_uses_per_slot(protocol: str, K: int, C: int = 1) -> int:
    """Orthogonal channel uses consumed by one aggregation slot."""
    if protocol in (CWFL, CWFL_PROX):
        return C + C * (C - 1)
    if protocol in (COTAF, COTAF_PROX):
        return 1
    if protocol == DSGD:
        return K * (K - 1)
    if protocol == LOCAL:
        return 0
    raise ProtocolError(f"unknown protocol {protocol!r}")


class _Engine:
    prox = False

    def __init__(self, cfg: ProtocolConfig):
        self.cfg = cfg
        self.sched = cfg.schedule
        self.K = cfg.problem.K
        self.d = cfg.model.dim
        theta0 = cfg.theta0 if cfg.theta0 is not None else initial_params(self.d, cfg.seed)
        if theta0.shape != (self.d,):
            raise ProtocolError(f"theta0 has shape {theta0.shape}, model needs ({self.d},)")
        self.theta0 = theta0.copy()
        self.theta = np.tile(theta0, (self.K, 1))
        self.samplers = [
            EpochSampler(s.size, cfg.batch_size, np.random.default_rng([cfg.seed, 0xBA7C, s.client_id]))
            for s in cfg.problem.shards
        ]
        self.uses = 0
        self.per_slot = 0
        self.trace = RunTrace(cfg.kind, cfg.seed)
        self.slot: dict = {}

    # -- hooks ---------------------------------------------------------------
    def anchor(self, k: int) -> np.ndarray:
        raise NotImplementedError

    def aggregate(self, t: int) -> None:
        raise NotImplementedError

    def logged_nodes(self, t: int) -> list[tuple[int, np.ndarray, np.ndarray]]:
        """(node, params for distance, params for loss/accuracy)."""
        raise NotImplementedError

    def final_params(self) -> np.ndarray:
        return self.theta.copy()

    # -- shared machinery ----------------------------------------------------
    def precode(self, power: float, vectors: Sequence[np.ndarray], t: int) -> float:
        env = self.cfg.channel
        if env.precode_mode == ch.BOUND:
            return ch.bound_precode_factor(power, self.cfg.E, self.cfg.lr(t), self.cfg.G)
        peak = max(float(v @ v) for v in vectors)
        return ch.INFINITE_HEADROOM if peak == 0 else power / peak

    def local_step(self, t: int) -> None:
        cfg = self.cfg
        eta = cfg.lr(t - 1)
        for k, shard in enumerate(cfg.problem.shards):
            idx = next(self.samplers[k])
            prox = ProxConfig(cfg.lambda_p, self.anchor(k)) if self.prox else None
            g = gradient(cfg.model, self.theta[k], shard.features[idx], shard.labels[idx], prox)
            self.theta[k] -= eta * g

    def check_finite(self, t: int, arrays: Sequence[np.ndarray]) -> None:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise DivergenceError(
                    f"{self.cfg.kind}: non-finite parameters at t={t} "
                    f"(seed={self.cfg.seed}, lr={self.cfg.lr(t)}, precode={self.slot})"
                )

    def record(self, t: int) -> None:
        cfg = self.cfg
        prob = cfg.problem
        for node, dist_params, model_params in self.logged_nodes(t):
            row = MetricsRow(t=t, node=node, channel_uses=self.uses, **self.slot)
            if prob.theta_star is not None:
                diff = dist_params - prob.theta_star
                row.distance = float(diff @ diff)
            if cfg.track_loss:
                row.loss = global_objective(cfg.model, model_params, prob.shards)
            if prob.test is not None and cfg.model.is_classifier:
                row.accuracy = accuracy(cfg.model, model_params, prob.test.features, prob.test.labels)
            self.trace.rows.append(row)

    def run(self) -> RunTrace:
        self.record(0)
        for t in range(1, self.sched.T + 1):
            self.local_step(t)
            self.check_finite(t, [self.theta])
            if self.sched.aggregates(t):
                self.slot = {}
                self.aggregate(t)
                self.uses += self.per_slot
                self.check_finite(t, [self.theta])
                self.record(t)
            elif t == self.sched.T:
                self.slot = {}
                self.record(t)
        self.trace.final_params = self.final_params()
        return self.trace


class _Cwfl(_Engine):
    """Cluster OTA uplink, noisy head consensus, broadcast."""

    def __init__(self, cfg: ProtocolConfig):
        super().__init__(cfg)
        self.layout = cfg.layout
        self.C = self.layout.C
        self.W = np.asarray(cfg.mixing, dtype=float)
        self.members = [self.layout.members(c) for c in range(self.C)]
        self.cluster_of = np.asarray(self.layout.assignment)
        self.anchors = np.tile(self.theta0, (self.C, 1))
        self.tilde = self.anchors.copy()
        self.sigma2 = cfg.channel.variances(self.C)
        self.kappa2 = np.array([ch.effective_noise_variance(self.W[c], self.sigma2) for c in range(self.C)])
        self.per_slot = channel_uses_per_slot(cfg.kind, self.K, self.C)
        self.prev_q: Optional[float] = None

    def anchor(self, k):
        return self.anchors[self.cluster_of[k]]

    def aggregate(self, t):
        env = self.cfg.channel
        d = self.d
        deltas = [self.theta[k] - self.anchor(k) for k in range(self.K)]
        p = self.precode(env.P1, deltas, t)
        uplink_peak = 0.0
        tilde = np.empty((self.C, d))
        for c, members in enumerate(self.members):
            signals = [ch.encode_client(self.theta[k], self.anchors[c], p) for k in members]
            uplink_peak = max(uplink_peak, max(float(x @ x) for x in signals))
            w = ch.sample_noise(d, self.sigma2[c], ch.noise_stream(env.noise_seed, ch.UPLINK, t, c))
            y = ch.mac_superpose(signals, w)
            tilde[c] = ch.decode_cluster(y, len(members), p, self.anchors[c], env.headroom_cap)

        q = self.precode(env.P2, list(tilde), t)
        if self.prev_q is not None and p > self.prev_q:
            if env.precode_mode == ch.BOUND:
                raise PowerCouplingError(f"t={t}: p^t={p:.6g} exceeds q^(t-E)={self.prev_q:.6g}")
            self.trace.coupling_violations += 1
        self.prev_q = q
        signals = [ch.encode_head(tilde[c], q) for c in range(self.C)]
        consensus_peak = max(float(s @ s) for s in signals)
        bar = np.empty_like(tilde)
        for c in range(self.C):
            rng = ch.noise_stream(env.noise_seed, ch.CONSENSUS, t, c)
            if env.noise_injection == ch.PER_LINK:
                v = ch.per_link_noise(self.W[c], self.sigma2, d, rng)
            else:
                v = ch.sample_noise(d, self.kappa2[c], rng)
            r = ch.exchange_receive(signals, self.W[c], v, receiver=c)
            bar[c] = ch.decode_consensus(tilde[c], r, q, self.W[c], self.cfg.decode_mode, env.headroom_cap)
        self.check_finite(t, [tilde, bar])

        for c, members in enumerate(self.members):
            self.theta[members] = bar[c]
        self.anchors = bar
        self.tilde = tilde
        self.slot = dict(p_t=p, q_t=q, max_uplink_energy=uplink_peak, max_consensus_energy=consensus_peak)

    def logged_nodes(self, t):
        if t == 0 or self.sched.aggregates(t):
            return [(c, self.tilde[c], self.anchors[c]) for c in range(self.C)]
        out = []
        for c, members in enumerate(self.members):
            avg = self.theta[members].mean(axis=0)
            out.append((c, avg, avg))
        return out

    def final_params(self):
        return self.anchors.copy()


class _CwflProx(_Cwfl):
    prox = True


class _Cotaf(_Engine):
    """Single-server OTA federated averaging."""

    def __init__(self, cfg):
        super().__init__(cfg)
        self.global_theta = self.theta0.copy()
        self.per_slot = channel_uses_per_slot(cfg.kind, self.K)

    def anchor(self, k):
        return self.global_theta

    def aggregate(self, t):
        env = self.cfg.channel
        deltas = [self.theta[k] - self.global_theta for k in range(self.K)]
        p = self.precode(env.P1, deltas, t)
        signals = [ch.encode_client(self.theta[k], self.global_theta, p) for k in range(self.K)]
        w = ch.sample_noise(self.d, env.variance(0), ch.noise_stream(env.noise_seed, ch.UPLINK, t, 0))
        y = ch.mac_superpose(signals, w)
        self.global_theta = ch.decode_cluster(y, self.K, p, self.global_theta, env.headroom_cap)
        self.theta[:] = self.global_theta
        self.slot = dict(p_t=p, max_uplink_energy=max(float(x @ x) for x in signals))

    def logged_nodes(self, t):
        if t == 0 or self.sched.aggregates(t):
            return [(0, self.global_theta, self.global_theta)]
        avg = self.theta.mean(axis=0)
        return [(0, avg, avg)]

    def final_params(self):
        return self.global_theta[None, :].copy()


class _CotafProx(_Cotaf):
    prox = True


class _Dsgd(_Engine):
    """Decentralized SGD with noisy orthogonal client-to-client links."""

    def __init__(self, cfg):
        super().__init__(cfg)
        M = cfg.client_mixing if cfg.client_mixing is not None else client_mixing_uniform(self.K)
        self.M = np.asarray(M, dtype=float)
        if self.M.shape != (self.K, self.K):
            raise ProtocolError(f"client mixing matrix {self.M.shape} does not match K={self.K}")
        self.per_slot = channel_uses_per_slot(cfg.kind, self.K)

    def aggregate(self, t):
        env = self.cfg.channel
        a = self.precode(env.P2, list(self.theta), t)
        energy = 0.0 if math.isinf(a) else a * max(float(v @ v) for v in self.theta)
        scale = math.sqrt(env.headroom_cap if math.isinf(a) else a)
        mixed = np.empty_like(self.theta)
        for k in range(self.K):
            rng = ch.noise_stream(env.noise_seed, ch.LINK, t, k)
            s2 = env.variance(k)
            acc = np.zeros(self.d)
            for j in range(self.K):
                w = self.M[k, j]
                if j == k:
                    acc += w * self.theta[j]
                elif w != 0:
                    acc += w * (self.theta[j] + ch.sample_noise(self.d, s2, rng) / scale)
            mixed[k] = acc
        self.theta = mixed
        self.slot = dict(q_t=a, max_consensus_energy=energy)

    def logged_nodes(self, t):
        return [(k, self.theta[k], self.theta[k]) for k in range(self.K)]


class _Local(_Engine):
    def aggregate(self, t):
        pass

    def logged_nodes(self, t):
        return [(k, self.theta[k], self.theta[k]) for k in range(self.K)]


_ENGINES = {CWFL: _Cwfl, CWFL_PROX: _CwflProx, COTAF: _Cotaf, COTAF_PROX: _CotafProx,
            DSGD: _Dsgd, LOCAL: _Local}


def run_protocol(cfg: ProtocolConfig) -> RunTrace:
    return _ENGINES[cfg.kind](cfg).run()


def _as(cfg: ProtocolConfig, kind: str) -> ProtocolConfig:
    return cfg if cfg.kind == kind else cfg.with_kind(kind)


def run_cwfl(cfg: ProtocolConfig) -> RunTrace:
    return run_protocol(_as(cfg, CWFL))


def run_cwfl_prox(cfg: ProtocolConfig) -> RunTrace:
    return run_protocol(_as(cfg, CWFL_PROX))


def run_cotaf(cfg: ProtocolConfig) -> RunTrace:
    return run_protocol(_as(cfg, COTAF))


def run_cotaf_prox(cfg: ProtocolConfig) -> RunTrace:
    return run_protocol(_as(cfg, COTAF_PROX))


def run_dsgd(cfg: ProtocolConfig) -> RunTrace:
    return run_protocol(_as(cfg, DSGD))


def run_local_only(cfg: ProtocolConfig) -> RunTrace:
    return run_protocol(_as(cfg, LOCAL))
