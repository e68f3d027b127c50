"""Turning an ExperimentConfig into protocol runs, CSV files and manifests."""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .channel import ChannelEnv, snr_to_variance
from .config import ExperimentConfig
from .data import (ClientShard, generate_synthetic_quadratic, load_idx_dataset, read_text_dataset,
                   read_text_shards, shard_by_label_skew, shards_to_dataset, train_test_split)
from .metrics import RunTrace, emit_csv
from .models import QUADRATIC, ModelSpec, initial_params, quadratic_constants_and_optimum
from .protocols import (CWFL, CWFL_PROX, DSGD, LOCAL, LearningRate, Problem,
                        ProtocolConfig, channel_uses_per_slot, run_protocol)
from .theory import estimate_gradient_bound
from .topology import mixing_ring, mixing_uniform_complete, random_clusters

log = logging.getLogger(__name__)


@dataclass
class Setup:
    """Everything shared by the protocols of one (config, seed) cell."""

    model: ModelSpec
    problem: Problem
    L: Optional[float] = None
    mu: Optional[float] = None
    Gamma: Optional[float] = None
    G: Optional[float] = None
    alpha2: Optional[list[float]] = None


def build_problem(cfg: ExperimentConfig, seed: int) -> tuple[ModelSpec, Problem]:
    data_seed = seed if cfg.data_seed is None else cfg.data_seed
    if cfg.source == "synthetic":
        shards = generate_synthetic_quadratic(data_seed, cfg.K, cfg.per_client_size, cfg.m,
                                              cfg.heterogeneity)
        model = ModelSpec(QUADRATIC, cfg.m, l2_coeff=cfg.l2_coeff)
        theta_star = quadratic_constants_and_optimum(shards, cfg.l2_coeff).theta_star
        return model, Problem(shards, theta_star=theta_star)

    if cfg.source == "idx":
        dataset = load_idx_dataset(cfg.path)
    elif Path(cfg.path).is_dir():
        dataset = shards_to_dataset(read_text_shards(cfg.path))
    else:
        dataset = read_text_dataset(cfg.path)

    if dataset.num_classes is None:
        if cfg.kind != QUADRATIC:
            raise ValueError("regression data needs the ridge-quadratic model")
        train, test = train_test_split(dataset, cfg.test_fraction, data_seed)
        parts = np.array_split(np.random.default_rng(data_seed).permutation(len(train)), cfg.K)
        shards = [ClientShard(k, train.features[p], train.labels[p]) for k, p in enumerate(parts)]
        model = ModelSpec(QUADRATIC, dataset.m, l2_coeff=cfg.l2_coeff)
        theta_star = quadratic_constants_and_optimum(shards, cfg.l2_coeff).theta_star
        return model, Problem(shards, theta_star=theta_star)

    train, test = train_test_split(dataset, cfg.test_fraction, data_seed)
    shards = shard_by_label_skew(train, cfg.K, cfg.classes_per_client, data_seed)
    model = ModelSpec(cfg.kind, dataset.m, dataset.num_classes, cfg.hidden, cfg.l2_coeff)
    return model, Problem(shards, test=test)


def setup_cell(cfg: ExperimentConfig, seed: int) -> Setup:
    model, problem = build_problem(cfg, seed)
    setup = Setup(model, problem)
    if model.kind == QUADRATIC:
        qc = quadratic_constants_and_optimum(problem.shards, model.l2_coeff)
        setup.L, setup.mu, setup.Gamma = qc.L, qc.mu, qc.Gamma
    if cfg.precode_mode == "bound" or cfg.lr == "theorem":
        setup.G, setup.alpha2 = estimate_gradient_bound(
            model, problem.shards, initial_params(model.dim, seed), cfg.batch_size, seed, cfg.G_safety)
    return setup


def noise_variances(cfg: ExperimentConfig, d: int, n: int, snr_db: Optional[float]) -> np.ndarray:
    """Per-receiver noise variance.

    SNR is per transmitted entry: a budget P spread over d entries against
    noise variance sigma^2, i.e. ``sigma^2 = (P1 / d) / 10^(snr/10)``.
    """
    if cfg.sigma2 is not None:
        s = np.asarray(cfg.sigma2, dtype=float)
        return np.resize(s, n) if len(s) in (1, n) else s
    if snr_db is None:
        return np.zeros(n)
    return np.full(n, snr_to_variance(cfg.P1 / d, snr_db))


def protocol_config(cfg: ExperimentConfig, kind: str, setup: Setup, seed: int) -> ProtocolConfig:
    model, problem = setup.model, setup.problem
    K, d = problem.K, model.dim
    cluster_seed = seed if cfg.cluster_seed is None else cfg.cluster_seed
    layout = mixing = None
    if kind in (CWFL, CWFL_PROX):
        layout = random_clusters(K, cfg.C, cluster_seed)
        mixing = mixing_ring(cfg.C) if cfg.mixing == "ring" else mixing_uniform_complete(cfg.C)
        sigma2 = noise_variances(cfg, d, cfg.C, cfg.snr_db)
    elif kind in (DSGD, LOCAL):
        sigma2 = noise_variances(cfg, d, K, cfg.snr_db)
    else:
        server = cfg.snr_db if cfg.server_snr_db is None else cfg.server_snr_db
        sigma2 = noise_variances(cfg, d, 1, server)[:1]
    if cfg.lr == "theorem":
        if setup.mu is None:
            raise ValueError("the theorem schedule needs the quadratic model")
        lr = LearningRate.theorem(setup.mu, setup.L, cfg.E)
    else:
        lr = LearningRate(eta=cfg.eta)
    env = ChannelEnv(cfg.P1, cfg.P2, sigma2, noise_seed=seed, precode_mode=cfg.precode_mode,
                     noise_injection=cfg.noise_injection)
    return ProtocolConfig(
        kind, model, problem, env, cfg.T, cfg.E, layout=layout, mixing=mixing,
        lambda_p=cfg.lambda_p if kind.endswith("prox") else 0.0, lr=lr,
        decode_mode=cfg.decode_mode, batch_size=cfg.batch_size, seed=seed, G=setup.G,
        track_loss=cfg.track_loss,
    )


def run_cell(cfg: ExperimentConfig, seed: int) -> tuple[list[RunTrace], dict]:
    setup = setup_cell(cfg, seed)
    traces, manifest = [], {"seed": seed, "runs": []}
    for kind in cfg.protocols:
        pc = protocol_config(cfg, kind, setup, seed)
        log.info("running %s seed=%d", kind, seed)
        traces.append(run_protocol(pc))
        entry = {"protocol": kind, "sigma2": pc.channel.sigma2.tolist(),
                 "lr": asdict(pc.lr), "channel_uses": traces[-1].channel_uses}
        if pc.layout is not None:
            entry["layout"] = pc.layout.to_dict()
            entry["mixing"] = pc.mixing.tolist()
        manifest["runs"].append(entry)
    return traces, manifest


def write_manifest(path: Path, cfg: ExperimentConfig, cells: list[dict]) -> None:
    doc = {
        "version": __version__,
        "config_hash": cfg.digest(),
        "config": asdict(cfg),
        "seeds": list(cfg.seeds),
        "cells": cells,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> list[RunTrace]:
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    traces, cells = [], []
    for seed in cfg.seeds:
        tr, man = run_cell(cfg, seed)
        traces.extend(tr)
        cells.append(man)
    emit_csv(traces, out / "traces.csv")
    write_manifest(out / "manifest.json", cfg, cells)
    return traces


# -- sweeps -----------------------------------------------------------------

SWEEP_AXES = {"clusters": "C", "classes": "classes_per_client", "snr": "snr_db", "lambda": "lambda_p"}


def sweep_cells(cfg: ExperimentConfig, grid: dict[str, Sequence]) -> list[tuple[dict, ExperimentConfig]]:
    names = [n for n in SWEEP_AXES if grid.get(n)]
    cells = []
    for combo in itertools.product(*(grid[n] for n in names)):
        changes = {SWEEP_AXES[n]: v for n, v in zip(names, combo)}
        cells.append((dict(zip(names, combo)), replace(cfg, **changes)))
    return cells


def _sweep_worker(args):
    i, params, cell_cfg, out = args
    traces = []
    for seed in cell_cfg.seeds:
        traces.extend(run_cell(cell_cfg, seed)[0])
    emit_csv(traces, Path(out) / f"cell{i:03d}.csv")
    return i, params, summarize(traces)


def summarize(traces: Sequence[RunTrace]) -> dict[str, dict[str, float]]:
    """Per protocol: mean final accuracy and distance over seeds."""
    out: dict[str, dict[str, list[float]]] = {}
    for tr in traces:
        acc = out.setdefault(tr.protocol, {"accuracy": [], "distance": []})
        for name in ("accuracy", "distance"):
            ts, vals = tr.series(name)
            if len(vals):
                acc[name].append(float(vals[-1]))
    return {p: {k: (float(np.mean(v)) if v else None) for k, v in m.items()} for p, m in out.items()}


def run_sweep(cfg: ExperimentConfig, grid: dict[str, Sequence], out_dir: Optional[str] = None,
              jobs: int = 1) -> list[dict]:
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    work = [(i, params, c, str(out)) for i, (params, c) in enumerate(sweep_cells(cfg, grid))]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_sweep_worker, work))
    else:
        results = [_sweep_worker(w) for w in work]
    rows = []
    for i, params, summary in sorted(results, key=lambda r: r[0]):
        for proto in sorted(summary):
            rows.append({"cell": i, **{n: params.get(n, "") for n in SWEEP_AXES},
                         "protocol": proto, **summary[proto]})
    header = ["cell", *SWEEP_AXES, "protocol", "accuracy", "distance"]
    with open(out / "summary.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join("" if r[h] is None else str(r[h]) for h in header) + "\n")
    return rows


# -- channel-use ledger -----------------------------------------------------


def channel_ledger(K: int, C: int, rounds: int,
                   protocols: Sequence[str] = (CWFL, "cotaf", DSGD, LOCAL)) -> list[tuple[str, int, int]]:
    """(protocol, uses per aggregation slot, total over ``rounds`` slots)."""
    return [(p, channel_uses_per_slot(p, K, C), rounds * channel_uses_per_slot(p, K, C))
            for p in protocols]
