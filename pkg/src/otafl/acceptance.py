"""Acceptance checks, runnable from ``otafl verify`` and the test suite.

Each check builds its own problem, runs the protocols and compares against
a fixed threshold. Nothing here is tuned per outcome: the configurations
are fixed in this file and a failing check is reported as such.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .channel import ChannelEnv, effective_noise_variance, per_link_noise, snr_to_variance
from .data import EpochSampler, export_digits_idx, generate_synthetic_quadratic, load_idx_dataset
from .data import shard_by_label_skew, train_test_split
from .metrics import CSV_COLUMNS, MetricsRow, RunTrace
from .models import (LOGISTIC, MLP, QUADRATIC, ModelSpec, ProxConfig, gradient, initial_params,
                     loss, quadratic_constants_and_optimum)
from .protocols import (LearningRate, Problem, ProtocolConfig, channel_uses_per_slot,
                        run_protocol)
from .theory import (check_bound_dominance, estimate_gradient_bound, fit_convergence_slope,
                     theorem_constants)
from .topology import (mixing_ring, mixing_uniform_complete, random_clusters, single_cluster)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    elapsed: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number:2d} {self.name}: {self.detail} ({self.elapsed:.1f}s)"


# -- shared fixtures ----------------------------------------------------------

_DIGITS_DIR: Optional[str] = None


def digits_dir() -> str:
    """IDX copy of the bundled 8x8 digits, exported once per process."""
    global _DIGITS_DIR
    if _DIGITS_DIR is None or not os.path.isdir(_DIGITS_DIR):
        _DIGITS_DIR = str(export_digits_idx(tempfile.mkdtemp(prefix="otafl-digits-")))
    return _DIGITS_DIR


def _quadratic(K=25, size=50, m=5, het=0.5, l2=0.1, seed=0):
    shards = generate_synthetic_quadratic(seed, K, size, m, het)
    qc = quadratic_constants_and_optimum(shards, l2)
    return ModelSpec(QUADRATIC, m, l2_coeff=l2), Problem(shards, theta_star=qc.theta_star), qc


# -- 1: power constraints -----------------------------------------------------

def crit_power(quick: bool) -> tuple[bool, str]:
    P1, P2 = 1.0, 2.0
    ds = load_idx_dataset(digits_dir())
    train, test = train_test_split(ds, 0.1, 0)
    shards = shard_by_label_skew(train, 25, 4, 0)
    model = ModelSpec(LOGISTIC, ds.m, ds.num_classes, l2_coeff=1e-3)
    s2 = snr_to_variance(P1 / model.dim, 10.0)
    cfg = ProtocolConfig("cwfl", model, Problem(shards, test=test), ChannelEnv(P1, P2, [s2]), T=150,
                         E=3, layout=random_clusters(25, 4, 0), mixing=mixing_uniform_complete(4),
                         lr=LearningRate(eta=0.5), seed=0)
    tr = run_protocol(cfg)
    slot_rows = [r for r in tr.rows if r.max_uplink_energy is not None]
    slots = len({r.t for r in slot_rows})
    up = max(r.max_uplink_energy for r in slot_rows)
    cons = max(r.max_consensus_energy for r in slot_rows)
    ok = slots >= 50 and up <= P1 * (1 + 1e-9) and cons <= P2 * (1 + 1e-9)
    return ok, (f"{slots} slots, max uplink energy {up:.12g} (P1={P1}), "
                f"max consensus energy {cons:.12g} (P2={P2})")


# -- 2: aggregated consensus noise variance ----------------------------------

def crit_consensus_noise(quick: bool) -> tuple[bool, str]:
    cases = [
        (np.array([0.0, 0.5, 0.5]), np.array([1.0, 2.0, 4.0])),
        (mixing_ring(5)[2], np.array([0.3, 1.0, 2.0, 0.5, 0.1])),
        (mixing_uniform_complete(4)[1], np.array([0.2, 0.4, 0.8, 1.6])),
    ]
    trials = 100_000
    parts, ok = [], True
    for i, (row, s2) in enumerate(cases):
        kappa2 = effective_noise_variance(row, s2)
        sample = per_link_noise(row, s2, trials, np.random.default_rng([2, i]))
        rel = abs(sample.var() / kappa2 - 1)
        ok &= rel < 0.03
        parts.append(f"kappa2={kappa2:.4g} empirical={sample.var():.4g}")
    ok &= effective_noise_variance(*cases[0]) == 3.0
    return ok, "; ".join(parts)


# -- 3: noiseless reduction ---------------------------------------------------

def _fedavg(model, shards, rounds, E, eta, batch, seed):
    samplers = [EpochSampler(s.size, batch, np.random.default_rng([seed, 0xBA7C, s.client_id]))
                for s in shards]
    theta = np.tile(initial_params(model.dim, seed), (len(shards), 1))
    history = []
    for t in range(1, rounds * E + 1):
        for k, s in enumerate(shards):
            idx = next(samplers[k])
            theta[k] = theta[k] - eta * gradient(model, theta[k], s.features[idx], s.labels[idx])
        if t % E == 0:
            theta[:] = theta.mean(axis=0)
            history.append(theta[0].copy())
    return history


def crit_reduction(quick: bool) -> tuple[bool, str]:
    model, prob, _ = _quadratic()
    rounds, E, eta, batch = 30, 3, 0.05, 8
    oracle = _fedavg(model, prob.shards, rounds, E, eta, batch, seed=1)
    worst_cw = worst_co = 0.0
    for r in range(1, rounds + 1):
        base = ProtocolConfig("cwfl", model, prob, ChannelEnv(1.0, 1.0, [0.0]), T=r * E, E=E,
                              layout=single_cluster(prob.K), mixing=mixing_uniform_complete(1),
                              lr=LearningRate(eta=eta), batch_size=batch, seed=1)
        cw = run_protocol(base).final_params[0]
        co = run_protocol(base.with_kind("cotaf")).final_params[0]
        worst_cw = max(worst_cw, float(np.max(np.abs(cw - co))))
        worst_co = max(worst_co, float(np.max(np.abs(co - oracle[r - 1]))))
    ok = worst_cw <= 1e-9 and worst_co <= 1e-9
    return ok, f"{rounds} rounds, max |CWFL-COTAF| {worst_cw:.3g}, max |COTAF-FedAvg| {worst_co:.3g}"


# -- 4 and 5: convergence rate and bound dominance ----------------------------

_RATE_CACHE: dict = {}


@dataclass
class RateRuns:
    traces: list[RunTrace]
    constants: list
    mean: RunTrace
    T: int


def rate_runs(quick: bool) -> RateRuns:
    """CWFL on the heterogeneous quadratic with the theorem schedule.

    Bound-mode precoding with P1=1, P2=2 keeps ``p^t <= q^(t-E)``; per-entry
    noise at 10 dB. Seeds vary batches and channel noise on a fixed problem
    and a fixed initial model.
    """
    if quick in _RATE_CACHE:
        return _RATE_CACHE[quick]
    seeds = range(4) if quick else range(20)
    T = 2000 if quick else 10_000
    E, C, P1, P2, batch = 3, 4, 1.0, 2.0, 8
    model, prob, qc = _quadratic()
    layout = random_clusters(prob.K, C, 0)
    W = mixing_uniform_complete(C)
    theta0 = initial_params(model.dim, 0)
    G, alpha2 = estimate_gradient_bound(model, prob.shards, theta0, batch, seed=0)
    s2 = snr_to_variance(P1 / model.dim, 10.0)
    lr = LearningRate.theorem(qc.mu, qc.L, E)
    traces = []
    for seed in seeds:
        env = ChannelEnv(P1, P2, [s2] * C, noise_seed=seed, precode_mode="bound")
        cfg = ProtocolConfig("cwfl", model, prob, env, T=T, E=E, layout=layout, mixing=W, lr=lr,
                             batch_size=batch, seed=seed, G=G, theta0=theta0)
        traces.append(run_protocol(cfg))
    delta0 = float((theta0 - qc.theta_star) @ (theta0 - qc.theta_star))
    constants = [
        theorem_constants(L=qc.L, mu=qc.mu, G=G, Gamma=qc.Gamma,
                          alpha2=[alpha2[k] for k in layout.members(c)], E=E, P1=P1, P2=P2,
                          d=model.dim, mixing=W, sigma2=[s2] * C, head=c, delta0=delta0)
        for c in range(C)
    ]
    mean = RunTrace("cwfl", -1)
    for node in range(C):
        ts = traces[0].series("distance", node)[0]
        vals = np.mean([tr.series("distance", node)[1] for tr in traces], axis=0)
        mean.rows.extend(MetricsRow(t=int(t), node=node, distance=float(v)) for t, v in zip(ts, vals))
    _RATE_CACHE[quick] = RateRuns(traces, constants, mean, T)
    return _RATE_CACHE[quick]


def crit_rate(quick: bool) -> tuple[bool, str]:
    runs = rate_runs(quick)
    slopes = [fit_convergence_slope(tr, 100, runs.T) for tr in runs.traces]
    mean_slope = float(np.mean(slopes))
    pooled = fit_convergence_slope(runs.mean, 100, runs.T)
    ok = -1.3 <= mean_slope <= -0.7
    return ok, (f"mean slope over {len(slopes)} seeds {mean_slope:.3f} on [100, {runs.T}] "
                f"(seed-averaged trace: {pooled:.3f})")


def crit_bound(quick: bool) -> tuple[bool, str]:
    runs = rate_runs(quick)
    report = check_bound_dominance(runs.mean, runs.constants)
    worst = max(runs.constants, key=lambda c: c.Q1)
    return report.ok, (f"{len(report.violations)} violations over {len(report.t)} logged slots, "
                       f"max distance/bound ratio {report.max_ratio:.3g} (worst-head Q1={worst.Q1:.3g})")


# -- 6: channel-use ledger ----------------------------------------------------

def crit_ledger(quick: bool) -> tuple[bool, str]:
    model, prob, _ = _quadratic()
    K, C, slots, E = prob.K, 4, 50, 3
    base = ProtocolConfig("cwfl", model, prob, ChannelEnv(1.0, 1.0, [0.01]), T=slots * E, E=E,
                          layout=random_clusters(K, C, 0), mixing=mixing_uniform_complete(C),
                          lr=LearningRate(eta=0.05), batch_size=8)
    expected = {"cwfl": (16, 800), "dsgd": (600, 30000), "cotaf": (1, 50)}
    parts, ok = [], True
    for kind, (per, total) in expected.items():
        tr = run_protocol(base.with_kind(kind))
        _, uses = tr.series("channel_uses", 0)
        steps = set(np.diff(uses[1:]).astype(int).tolist()) if len(uses) > 2 else set()
        ok &= (channel_uses_per_slot(kind, K, C) == per and int(uses[1]) == per
               and steps == {per} and tr.channel_uses == total)
        parts.append(f"{kind} {int(uses[1])}/slot {tr.channel_uses} total")
    return ok, ", ".join(parts)


# -- 7, 8, 9: desk-scale accuracy ---------------------------------------------

ACC_ETA = 0.5
ACC_T, ACC_E = 150, 3


def _digits_accuracy(kinds: dict[str, dict], classes: int, seeds: Sequence[int]) -> dict[str, np.ndarray]:
    """Per kind: accuracy series (seeds x logged slots).

    ``kinds`` maps a label to protocol overrides: ``kind``, ``snr_db``,
    ``lambda_p``.
    """
    ds = load_idx_dataset(digits_dir())
    out: dict[str, list] = {label: [] for label in kinds}
    for seed in seeds:
        train, test = train_test_split(ds, 0.1, seed)
        shards = shard_by_label_skew(train, 25, classes, seed)
        model = ModelSpec(LOGISTIC, ds.m, ds.num_classes, l2_coeff=1e-3)
        prob = Problem(shards, test=test)
        layout = random_clusters(25, 4, seed)
        for label, o in kinds.items():
            n_rx = 4 if o["kind"].startswith("cwfl") else (1 if o["kind"].startswith("cotaf") else 25)
            s2 = snr_to_variance(1.0 / model.dim, o.get("snr_db", 10.0))
            cfg = ProtocolConfig(o["kind"], model, prob, ChannelEnv(1.0, 1.0, [s2] * n_rx, noise_seed=seed),
                                 T=ACC_T, E=ACC_E, layout=layout, mixing=mixing_uniform_complete(4),
                                 lr=LearningRate(eta=ACC_ETA), batch_size=64, seed=seed,
                                 lambda_p=o.get("lambda_p", 0.0))
            out[label].append(run_protocol(cfg).series("accuracy")[1])
    return {k: np.array(v) for k, v in out.items()}


def crit_accuracy(quick: bool) -> tuple[bool, str]:
    seeds = range(2) if quick else range(5)
    acc = _digits_accuracy({"cwfl": {"kind": "cwfl"}, "cotaf": {"kind": "cotaf"},
                            "local": {"kind": "local"}}, classes=4, seeds=seeds)
    cw, co, lo = (100 * acc[k][:, -1].mean() for k in ("cwfl", "cotaf", "local"))
    ok = cw >= co - 2 and cw >= lo + 5 and co >= lo + 5
    return ok, f"final accuracy CWFL {cw:.2f}%, COTAF {co:.2f}%, local-only {lo:.2f}%"


PROX_LAMBDA = 0.1


def crit_prox(quick: bool) -> tuple[bool, str]:
    seeds = range(2) if quick else range(5)
    acc = _digits_accuracy({"cwfl": {"kind": "cwfl"},
                            "prox": {"kind": "cwfl-prox", "lambda_p": PROX_LAMBDA}},
                           classes=2, seeds=seeds)
    cw, px = (100 * acc[k][:, -1].mean() for k in ("cwfl", "prox"))
    return px >= cw, (f"2-class skew, lambda_p={PROX_LAMBDA}: CWFL-Prox {px:.2f}% vs CWFL {cw:.2f}% "
                      f"over {len(seeds)} seeds")


SNR_SERVER_DB = 10.0
SNR_TARGET = 0.80


def rounds_to_target(series: np.ndarray, target: float) -> int:
    """First round (1-based, excluding the t=0 entry) at or above target; len+1 if never."""
    hits = np.nonzero(series[1:] >= target)[0]
    return int(hits[0]) + 1 if len(hits) else len(series)


def crit_snr_gap(quick: bool) -> tuple[bool, str]:
    seeds = range(2) if quick else range(5)
    acc = _digits_accuracy({"cwfl": {"kind": "cwfl", "snr_db": SNR_SERVER_DB + 1},
                            "cotaf": {"kind": "cotaf", "snr_db": SNR_SERVER_DB}},
                           classes=4, seeds=seeds)
    r_cw = float(np.mean([rounds_to_target(s, SNR_TARGET) for s in acc["cwfl"]]))
    r_co = float(np.mean([rounds_to_target(s, SNR_TARGET) for s in acc["cotaf"]]))
    return r_cw <= r_co, (f"rounds to {SNR_TARGET:.0%}: CWFL {r_cw:.1f} (heads {SNR_SERVER_DB + 1:g} dB) "
                          f"vs COTAF {r_co:.1f} (server {SNR_SERVER_DB:g} dB)")


# -- 10: gradients ------------------------------------------------------------

def crit_gradients(quick: bool) -> tuple[bool, str]:
    specs = [ModelSpec(QUADRATIC, 5, l2_coeff=0.1), ModelSpec(LOGISTIC, 4, 3, l2_coeff=0.01),
             ModelSpec(MLP, 3, 4, hidden=5, l2_coeff=1e-3)]
    rng = np.random.default_rng(10)
    h, worst, draws = 1e-5, 0.0, 120
    for i in range(draws):
        spec = specs[i % len(specs)]
        n = int(rng.integers(1, 10))
        X = rng.normal(size=(n, spec.m))
        y = rng.normal(size=n) if spec.kind == QUADRATIC else rng.integers(0, spec.num_classes, n)
        theta = rng.normal(scale=0.5, size=spec.dim)
        prox = ProxConfig(float(rng.uniform(0.1, 5)), rng.normal(size=spec.dim)) if i % 2 else None
        fd = np.empty(spec.dim)
        for j in range(spec.dim):
            e = np.zeros(spec.dim)
            e[j] = h
            fd[j] = (loss(spec, theta + e, X, y, prox) - loss(spec, theta - e, X, y, prox)) / (2 * h)
        g = gradient(spec, theta, X, y, prox)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst < 1e-6, f"{draws} draws (half with prox), worst relative error {worst:.2e}"


CRITERIA: dict[int, tuple[str, Callable[[bool], tuple[bool, str]]]] = {
    1: ("power constraints", crit_power),
    2: ("consensus noise variance", crit_consensus_noise),
    3: ("noiseless reduction", crit_reduction),
    4: ("O(1/T) slope", crit_rate),
    5: ("bound dominance", crit_bound),
    6: ("channel-use ledger", crit_ledger),
    7: ("accuracy ordering", crit_accuracy),
    8: ("proximal benefit", crit_prox),
    9: ("SNR-gap rounds to target", crit_snr_gap),
    10: ("gradient correctness", crit_gradients),
}


def run_criterion(number: int, quick: bool = False) -> CriterionResult:
    name, fn = CRITERIA[number]
    start = time.perf_counter()
    try:
        passed, detail = fn(quick)
    except Exception as exc:  # report, do not crash the whole suite
        passed, detail = False, f"error: {type(exc).__name__}: {exc}"
    return CriterionResult(number, name, bool(passed), detail, time.perf_counter() - start)


def run_criteria(numbers: Sequence[int], quick: bool = False) -> list[CriterionResult]:
    unknown = [n for n in numbers if n not in CRITERIA]
    if unknown:
        raise ValueError(f"unknown criteria {unknown}; choose from {sorted(CRITERIA)}")
    return [run_criterion(n, quick) for n in numbers]


def check_csv(path: str | os.PathLike) -> list[str]:
    """Structural checks on a traces.csv file; returns a list of problems."""
    problems = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return ["empty file"]
    if tuple(rows[0]) != CSV_COLUMNS:
        problems.append(f"header {rows[0]} differs from {list(CSV_COLUMNS)}")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        problems.append(f"column counts vary: {sorted(widths)}")
    if problems:
        return problems
    last: dict[tuple, tuple[int, int]] = {}
    for lineno, r in enumerate(rows[1:], 2):
        d = dict(zip(CSV_COLUMNS, r))
        try:
            key = (d["protocol"], int(d["seed"]), int(d["node"]))
            t, uses = int(d["t"]), int(d["channel_uses"])
            for name in CSV_COLUMNS[4:]:
                if d[name] != "" and not math.isfinite(float(d[name])):
                    problems.append(f"line {lineno}: non-finite {name}")
        except ValueError as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        prev = last.get(key)
        if prev is not None and (t < prev[0] or uses < prev[1]):
            problems.append(f"line {lineno}: channel uses or t decrease for {key}")
        last[key] = (t, uses)
    return problems
