"""Datasets, client shards and non-IID partitioning."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .idx import read_idx, write_idx

DATA_DIR_ENV = "OTAFL_DATA_DIR"


class SizingError(ValueError):
    pass


class Instance(NamedTuple):
    features: np.ndarray
    label: float


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus labels.

    ``num_classes`` is None for regression targets.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: Optional[int] = None

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise SizingError(
                f"features {self.features.shape} do not match labels {self.labels.shape}"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def m(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    features: np.ndarray
    labels: np.ndarray
    num_classes: Optional[int] = None

    def __post_init__(self):
        if len(self.labels) < 1:
            raise SizingError(f"client {self.client_id} has an empty shard")
        if len(self.features) != len(self.labels):
            raise SizingError("features and labels disagree in length")

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def instances(self) -> list[Instance]:
        return [Instance(x, y) for x, y in zip(self.features, self.labels)]

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.features[idx], self.labels[idx]


def generate_synthetic_quadratic(
    seed: int,
    K: int,
    per_client_size: int,
    m: int,
    heterogeneity: float,
    noise_std: float = 0.1,
) -> list[ClientShard]:
    """Per-client linear-regression shards.

    Client k's targets come from ``theta_common + heterogeneity * u_k`` with
    ``u_k ~ N(0, I)``, so heterogeneity 0 gives one shared distribution and 1
    gives every client its own ground truth.
    """
    if K < 1 or per_client_size < 1 or m < 1:
        raise SizingError(f"need K, per_client_size, m >= 1; got {K}, {per_client_size}, {m}")
    if not 0.0 <= heterogeneity <= 1.0:
        raise SizingError(f"heterogeneity must lie in [0, 1], got {heterogeneity}")
    rng = np.random.default_rng(seed)
    theta_common = rng.normal(size=m)
    offsets = rng.normal(size=(K, m))
    shards = []
    for k in range(K):
        truth = theta_common + heterogeneity * offsets[k]
        X = rng.normal(size=(per_client_size, m))
        y = X @ truth + noise_std * rng.normal(size=per_client_size)
        shards.append(ClientShard(k, X, y))
    return shards


def shard_by_label_skew(
    dataset: Dataset, K: int, classes_per_client: int, seed: int
) -> list[ClientShard]:
    """Give each client instances of ``classes_per_client`` random classes.

    Class subsets are drawn first; each class's instances are then split as
    evenly as possible among the clients holding it.
    """
    if classes_per_client < 1:
        raise SizingError("classes_per_client must be >= 1")
    if dataset.num_classes is None:
        raise SizingError("label-skew sharding needs a classification dataset")
    if classes_per_client > dataset.num_classes:
        raise SizingError(
            f"classes_per_client={classes_per_client} exceeds num_classes={dataset.num_classes}"
        )
    if len(dataset) == 0 or K < 1:
        raise SizingError("need a nonempty dataset and K >= 1")
    rng = np.random.default_rng(seed)
    held = [rng.choice(dataset.num_classes, classes_per_client, replace=False) for _ in range(K)]
    owned: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in range(dataset.num_classes):
        holders = [k for k in range(K) if c in held[k]]
        if not holders:
            continue
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        for k, part in zip(holders, np.array_split(idx, len(holders))):
            owned[k].append(part)
    shards = []
    for k in range(K):
        idx = np.sort(np.concatenate(owned[k])) if owned[k] else np.array([], dtype=int)
        if len(idx) == 0:
            raise SizingError(f"client {k} received no instances; dataset too small for K={K}")
        shards.append(
            ClientShard(k, dataset.features[idx], dataset.labels[idx], dataset.num_classes)
        )
    return shards


def shards_to_dataset(shards: Sequence[ClientShard]) -> Dataset:
    return Dataset(
        np.concatenate([s.features for s in shards]),
        np.concatenate([s.labels for s in shards]),
        shards[0].num_classes,
    )


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise SizingError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    n_test = max(1, int(round(test_fraction * len(dataset))))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


class EpochSampler:
    """Mini-batch indices without replacement, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1 or batch_size < 1:
            raise SizingError("sampler needs n >= 1 and batch_size >= 1")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def __iter__(self) -> Iterator[np.ndarray]:
        return self

    def __next__(self) -> np.ndarray:
        if self._pos >= self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        out = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


# -- MNIST-format files -------------------------------------------------------


def data_dir(path: str | os.PathLike | None = None) -> Path:
    if path is not None:
        return Path(path)
    env = os.environ.get(DATA_DIR_ENV)
    if not env:
        raise FileNotFoundError(f"no data directory given and {DATA_DIR_ENV} is unset")
    return Path(env)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_idx_dataset(directory: str | os.PathLike | None = None, split: str = "train") -> Dataset:
    """Load ``{split}-images-idx3-ubyte`` / ``{split}-labels-idx1-ubyte``.

    Pixels are flattened and scaled to [0, 1].
    """
    directory = data_dir(directory)
    images = read_idx(_find(directory, f"{split}-images-idx3-ubyte"))
    labels = read_idx(_find(directory, f"{split}-labels-idx1-ubyte"))
    if len(images) != len(labels):
        raise SizingError(f"{len(images)} images but {len(labels)} labels")
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    return Dataset(X, y, int(y.max()) + 1)


def write_idx_dataset(directory: str | os.PathLike, images: np.ndarray, labels: np.ndarray,
                      split: str = "train") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_idx(directory / f"{split}-images-idx3-ubyte", np.asarray(images, dtype=np.uint8))
    write_idx(directory / f"{split}-labels-idx1-ubyte", np.asarray(labels, dtype=np.uint8))


def export_digits_idx(directory: str | os.PathLike) -> Path:
    """Write scikit-learn's bundled 8x8 handwritten digits as MNIST-format files.

    Intensities 0..16 are rescaled to 0..255 so that ``load_idx_dataset``
    treats them like MNIST pixels.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = np.rint(digits.images * (255.0 / 16.0)).astype(np.uint8)
    write_idx_dataset(directory, images, digits.target.astype(np.uint8))
    return Path(directory)


# -- line-oriented text format ------------------------------------------------


def write_text_dataset(path: str | os.PathLike, dataset: Dataset) -> None:
    """One instance per line: label, then features, comma-separated."""
    with open(path, "w") as fh:
        if dataset.num_classes is not None:
            fh.write(f"# classes={dataset.num_classes}\n")
        for x, y in zip(dataset.features, dataset.labels):
            label = str(int(y)) if dataset.num_classes is not None else repr(float(y))
            fh.write(label + "," + ",".join(repr(float(v)) for v in x) + "\n")


def read_text_dataset(path: str | os.PathLike) -> Dataset:
    num_classes = None
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# classes="):
                    num_classes = int(line.split("=", 1)[1])
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError as exc:
                raise SizingError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise SizingError(f"{path}: no instances")
    if len({len(r) for r in rows}) != 1:
        raise SizingError(f"{path}: ragged feature rows")
    arr = np.array(rows)
    labels = arr[:, 0].astype(np.int64) if num_classes is not None else arr[:, 0]
    return Dataset(arr[:, 1:], labels, num_classes)


def write_text_shards(directory: str | os.PathLike, shards: Sequence[ClientShard]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in shards:
        write_text_dataset(directory / f"client{s.client_id:03d}.txt",
                           Dataset(s.features, s.labels, s.num_classes))


def read_text_shards(directory: str | os.PathLike) -> list[ClientShard]:
    files = sorted(Path(directory).glob("client*.txt"))
    if not files:
        raise FileNotFoundError(f"no client*.txt shards in {directory}")
    out = []
    for k, f in enumerate(files):
        ds = read_text_dataset(f)
        out.append(ClientShard(k, ds.features, ds.labels, ds.num_classes))
    return out
