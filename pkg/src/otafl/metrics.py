"""Run traces and their CSV representation."""

from __future__ import annotations

import csv
import os
from collections import defaultdict
from dataclasses import dataclass, field, fields
from typing import Iterable, Optional, Sequence

import numpy as np

# Fixed column order of the CSV output.
CSV_COLUMNS = (
    "protocol",
    "seed",
    "node",
    "t",
    "distance",
    "loss",
    "accuracy",
    "channel_uses",
    "p_t",
    "q_t",
    "max_uplink_energy",
    "max_consensus_energy",
)


@dataclass
class MetricsRow:
    """Metrics for one node (head, server or client) at one logged slot.

    ``distance`` is ``||theta - theta*||^2`` when the optimum is known.
    """

    t: int
    node: int
    distance: Optional[float] = None
    loss: Optional[float] = None
    accuracy: Optional[float] = None
    channel_uses: int = 0
    p_t: Optional[float] = None
    q_t: Optional[float] = None
    max_uplink_energy: Optional[float] = None
    max_consensus_energy: Optional[float] = None


@dataclass
class RunTrace:
    protocol: str
    seed: int
    rows: list[MetricsRow] = field(default_factory=list)
    final_params: Optional[np.ndarray] = None
    coupling_violations: int = 0

    @property
    def channel_uses(self) -> int:
        return max((r.channel_uses for r in self.rows), default=0)

    def nodes(self) -> list[int]:
        return sorted({r.node for r in self.rows})

    def times(self) -> list[int]:
        return sorted({r.t for r in self.rows})

    def series(self, name: str, node: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(t, value) for one node, or averaged over nodes when node is None."""
        acc: dict[int, list[float]] = defaultdict(list)
        for r in self.rows:
            v = getattr(r, name)
            if v is not None and (node is None or r.node == node):
                acc[r.t].append(v)
        ts = sorted(acc)
        return np.array(ts), np.array([np.mean(acc[t]) for t in ts])

    def final(self, name: str) -> float:
        ts, vals = self.series(name)
        return float(vals[-1])


def average_traces(traces: Sequence[RunTrace]) -> RunTrace:
    """Seed average: rows matched by (t, node); numeric fields averaged."""
    if not traces:
        raise ValueError("nothing to average")
    groups: dict[tuple[int, int], list[MetricsRow]] = defaultdict(list)
    for tr in traces:
        for r in tr.rows:
            groups[(r.t, r.node)].append(r)
    rows = []
    for (t, node), rs in sorted(groups.items()):
        kw = {}
        for f in fields(MetricsRow):
            if f.name in ("t", "node"):
                continue
            vals = [getattr(r, f.name) for r in rs if getattr(r, f.name) is not None]
            if f.name == "channel_uses":
                kw[f.name] = max(vals)
            else:
                kw[f.name] = float(np.mean(vals)) if vals else None
        rows.append(MetricsRow(t=t, node=node, **kw))
    return RunTrace(traces[0].protocol, -1, rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        if not np.isfinite(v):
            return "" if np.isnan(v) else repr(float(v))
        return repr(float(v))
    return str(v)


def trace_records(traces: Iterable[RunTrace]) -> list[list[str]]:
    out = []
    for tr in sorted(traces, key=lambda tr: (tr.protocol, tr.seed)):
        for r in sorted(tr.rows, key=lambda r: (r.node, r.t)):
            out.append([_fmt(v) for v in (
                tr.protocol, tr.seed, r.node, r.t, r.distance, r.loss, r.accuracy,
                r.channel_uses, r.p_t, r.q_t, r.max_uplink_energy, r.max_consensus_energy,
            )])
    return out


def emit_csv(traces: Sequence[RunTrace], path: str | os.PathLike) -> None:
    """Write one row per (protocol, seed, node, slot), sorted in that order."""
    if not traces:
        raise ValueError("no traces to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(trace_records(traces))


def read_csv(path: str | os.PathLike) -> list[RunTrace]:
    """Parse a file written by ``emit_csv`` back into traces."""
    traces: dict[tuple[str, int], RunTrace] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, rec in enumerate(reader, 2):
            if len(rec) != len(CSV_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(rec)}")
            d = dict(zip(CSV_COLUMNS, rec))
            key = (d["protocol"], int(d["seed"]))
            tr = traces.setdefault(key, RunTrace(*key))

            def num(name):
                return float(d[name]) if d[name] != "" else None

            tr.rows.append(MetricsRow(
                t=int(d["t"]), node=int(d["node"]), distance=num("distance"), loss=num("loss"),
                accuracy=num("accuracy"), channel_uses=int(d["channel_uses"]), p_t=num("p_t"),
                q_t=num("q_t"), max_uplink_energy=num("max_uplink_energy"),
                max_consensus_energy=num("max_consensus_energy"),
            ))
    return list(traces.values())
