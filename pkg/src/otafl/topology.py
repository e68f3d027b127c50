"""Client-to-cluster assignment and cluster-head mixing matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterLayout:
    """``assignment[k]`` is the cluster of client k.

    The lowest-numbered member of each cluster doubles as its head and
    trains like any other client.
    """

    assignment: tuple[int, ...]
    C: int

    def __post_init__(self):
        sizes = np.bincount(self.assignment, minlength=self.C)
        if len(sizes) != self.C or np.any(sizes < 1):
            raise TopologyError(f"every one of the {self.C} clusters needs a member")

    @property
    def K(self) -> int:
        return len(self.assignment)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(s) for s in np.bincount(self.assignment, minlength=self.C))

    def members(self, c: int) -> list[int]:
        return [k for k, a in enumerate(self.assignment) if a == c]

    def head(self, c: int) -> int:
        return self.members(c)[0]

    def to_dict(self) -> dict:
        return {"K": self.K, "C": self.C, "assignment": list(self.assignment)}


def random_clusters(K: int, C: int, seed: int) -> ClusterLayout:
    """Uniformly random partition with sizes differing by at most one."""
    if not 1 <= C <= K:
        raise TopologyError(f"need 1 <= C <= K, got C={C}, K={K}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(K)
    labels = rng.permutation(C)
    assignment = [0] * K
    for i, k in enumerate(order):
        assignment[k] = int(labels[i % C])
    return ClusterLayout(tuple(assignment), C)


def single_cluster(K: int) -> ClusterLayout:
    return ClusterLayout((0,) * K, 1)


def mixing_uniform_complete(C: int) -> np.ndarray:
    if C < 1:
        raise TopologyError("C must be >= 1")
    if C == 1:
        return np.zeros((1, 1))
    W = np.full((C, C), 1.0 / (C - 1))
    np.fill_diagonal(W, 0.0)
    return W


def mixing_ring(C: int) -> np.ndarray:
    if C < 3:
        raise TopologyError(f"a ring needs C >= 3, got {C}")
    W = np.zeros((C, C))
    for c in range(C):
        W[c, (c - 1) % C] = 0.5
        W[c, (c + 1) % C] = 0.5
    return W


@dataclass(frozen=True)
class MixingReport:
    square: bool
    symmetric: bool
    zero_diagonal: bool
    nonnegative: bool
    rows_stochastic: bool

    @property
    def ok(self) -> bool:
        return all((self.square, self.symmetric, self.zero_diagonal,
                    self.nonnegative, self.rows_stochastic))


def validate_mixing(W: np.ndarray, atol: float = 1e-12) -> MixingReport:
    """Check symmetry, zero diagonal, nonnegativity and unit row sums.

    Unit row sums are only required when there are at least two heads.
    """
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        return MixingReport(False, False, False, False, False)
    C = W.shape[0]
    rows = True if C == 1 else bool(np.all(np.abs(W.sum(axis=1) - 1.0) <= atol))
    return MixingReport(
        square=True,
        symmetric=bool(np.array_equal(W, W.T)),
        zero_diagonal=bool(np.all(np.diag(W) == 0)),
        nonnegative=bool(np.all(W >= 0)),
        rows_stochastic=rows,
    )


def client_mixing_uniform(K: int) -> np.ndarray:
    """Uniform all-to-all averaging matrix, self weight included (for DSGD)."""
    return np.full((K, K), 1.0 / K)
