"""Datasets, non-IID partitioners and minibatch sampling."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

HONEST = "honest"
FREELOADER = "freeloader"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, d) with one label per row")
        if self.labels.shape[0] < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels)


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str  # "iid" | "dirichlet" | "label_groups"
    num_clients: int
    seed: int = 0
    phi: float = 0.5
    groups: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet", "label_groups"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.scheme == "dirichlet" and not self.phi > 0:
            raise ValueError("phi must be > 0")
        if self.scheme == "label_groups":
            if sum(size for size, _ in self.groups) != self.num_clients:
                raise ValueError("label group sizes must sum to num_clients")
            for size, frac in self.groups:
                if size < 0 or not 0 < frac <= 1:
                    raise ValueError(f"bad label group ({size}, {frac})")


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray
    behavior: str = HONEST
    group: int | None = None
    labels_assigned: tuple[int, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def _class_means(d: int, num_classes: int) -> np.ndarray:
    means = np.zeros((num_classes, d))
    if num_classes <= d:
        # centred simplex on the first C axes: equal pairwise distances
        simplex = np.eye(num_classes) - 1.0 / num_classes
        simplex /= np.linalg.norm(simplex, axis=1, keepdims=True)
        means[:, :num_classes] = simplex
    else:
        angles = 2 * np.pi * np.arange(num_classes) / num_classes
        means[:, 0] = np.cos(angles)
        means[:, 1] = np.sin(angles)
    return means


def gen_gaussian_mixture(d: int, num_classes: int, n_per_class: int, sep: float,
                         seed: int) -> Dataset:
    if d < 2 or num_classes < 2 or n_per_class < 1:
        raise ValueError("need d >= 2, num_classes >= 2, n_per_class >= 1")
    if sep < 0:
        raise ValueError("sep must be >= 0")
    rng = np.random.default_rng(seed)
    centers = sep * _class_means(d, num_classes)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    features = centers[labels] + rng.standard_normal((labels.shape[0], d))
    order = rng.permutation(labels.shape[0])
    return Dataset(features[order], labels[order].astype(np.int64), num_classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    if n_test == 0:
        return ds.subset(perm), ds.subset(perm)
    return ds.subset(perm[n_test:]), ds.subset(perm[:n_test])


def labels_per_client(fraction: float, num_classes: int) -> int:
    # the epsilon guards against 0.3 * 10 == 3.0000000000000004
    return max(1, math.ceil(fraction * num_classes - 1e-9))


def _split_by_proportions(idx: np.ndarray, props: np.ndarray) -> list[np.ndarray]:
    cuts = (np.cumsum(props) * idx.shape[0]).astype(np.int64)[:-1]
    return np.split(idx, cuts)


def _dirichlet(rng: np.random.Generator, phi: float, n: int) -> np.ndarray:
    p = rng.dirichlet(np.full(n, phi))
    if not np.isfinite(p).all() or p.sum() <= 0:
        # all gamma draws underflowed; the limit of Dir(phi -> 0) is a vertex
        p = np.zeros(n)
        p[rng.integers(n)] = 1.0
    return p


def partition(ds: Dataset, spec: PartitionSpec, freeloaders=()) -> list[ClientShard]:
    n, N = len(ds), spec.num_clients
    if N > n:
        raise ValueError(f"cannot split {n} samples over {N} clients")
    rng = np.random.default_rng(spec.seed)
    C = ds.num_classes
    parts: list[list[np.ndarray]] = [[] for _ in range(N)]
    groups: list[int | None] = [None] * N
    assigned: list[tuple[int, ...]] = [()] * N

    if spec.scheme == "iid":
        for i, chunk in enumerate(np.array_split(rng.permutation(n), N)):
            parts[i].append(chunk)
    elif spec.scheme == "dirichlet":
        for c in range(C):
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            for i, chunk in enumerate(_split_by_proportions(idx, _dirichlet(rng, spec.phi, N))):
                parts[i].append(chunk)
    else:
        client = 0
        for g, (size, frac) in enumerate(spec.groups):
            m = min(labels_per_client(frac, C), C)
            for _ in range(size):
                groups[client] = g
                assigned[client] = tuple(sorted(int(v) for v in rng.choice(C, size=m, replace=False)))
                client += 1
        for c in range(C):
            claimants = [i for i in range(N) if c in assigned[i]]
            if not claimants:
                continue
            idx = rng.permutation(np.flatnonzero(ds.labels == c))
            for i, chunk in zip(claimants, np.array_split(idx, len(claimants))):
                parts[i].append(chunk)

    shards = []
    for i in range(N):
        idx = np.concatenate(parts[i]) if parts[i] else np.zeros(0, dtype=np.int64)
        shards.append(ClientShard(i, np.sort(idx.astype(np.int64)), group=groups[i],
                                  labels_assigned=assigned[i]))
    _repair_empty(shards)
    bad = set(freeloaders) - set(range(N))
    if bad:
        raise ValueError(f"freeloader ids out of range: {sorted(bad)}")
    for i in freeloaders:
        shards[i].behavior = FREELOADER
    return shards


def _repair_empty(shards: list[ClientShard]) -> None:
    for shard in shards:
        if len(shard):
            continue
        donor = max(shards, key=lambda s: (len(s), -s.client_id))
        if len(donor) < 2:
            raise ValueError("not enough samples to give every client one")
        shard.indices = donor.indices[-1:].copy()
        donor.indices = donor.indices[:-1]


def derive_seed(run_seed: int, tag: int) -> int:
    """Independent sub-seed for one consumer (data, split, partition, init)."""
    return int(np.random.SeedSequence([run_seed, 0, tag]).generate_state(1)[0])


def client_rng(run_seed: int, client_id: int) -> np.random.Generator:
    """Client-owned minibatch stream; independent of scheduling order."""
    return np.random.default_rng(np.random.SeedSequence([run_seed, 1, client_id]))


def sample_minibatch(shard: ClientShard, ds: Dataset, s: int,
                     rng: np.random.Generator) -> Batch:
    if s < 1:
        raise ValueError("batch size must be >= 1")
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    pick = shard.indices[rng.integers(0, len(shard), size=s)]
    return Batch(ds.features[pick], ds.labels[pick])


class IdxFormatError(ValueError):
    pass


class IdxBadMagic(IdxFormatError):
    pass


class IdxTruncated(IdxFormatError):
    pass


class IdxCountMismatch(IdxFormatError):
    pass


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncated(f"{path}: missing header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxBadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncated(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    if len(body) < math.prod(dims):
        raise IdxTruncated(f"{path}: expected {math.prod(dims)} data bytes, found {len(body)}")
    return dims, body[:math.prod(dims)]


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label file pair (MNIST layout), pixels scaled to [0, 1]."""
    (n_img, *shape), pix = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (n_lab,), lab = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if n_img != n_lab:
        raise IdxCountMismatch(f"{n_img} images but {n_lab} labels")
    features = np.frombuffer(pix, dtype=np.uint8).reshape(n_img, -1).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1)
    return Dataset(features, labels, num_classes)


def partition_report(ds: Dataset, shards: list[ClientShard]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client_id", "behavior", "n_samples"] + [f"class_{c}" for c in range(ds.num_classes)])
    for s in shards:
        counts = np.bincount(ds.labels[s.indices], minlength=ds.num_classes)
        w.writerow([s.client_id, s.behavior, len(s)] + counts.tolist())
    return buf.getvalue()
