"""Synthetic multi-view embeddings with long-tailed clusters.

Every non-noise view has orthonormal relevance, background and per-class
directions.  A cluster's signature in its informative view is
relevance + class direction; the clusters of one class that share a view
alternate the sign of the class direction, so a class occupies opposite
sides of the view and is not linearly separable there.  In every other view
the cluster shows only the background direction, which carries no label.
By default the classes are spread over num_classes // 2 views so each
informative view hosts several classes.  Noise views carry no signature.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict, fields

import numpy as np

from .head import ConfigError, ViewBatch


class DatasetError(ValueError):
    pass


@dataclass
class DatasetSpec:
    N: int = 2000
    M: int = 4
    d: int = 32
    num_classes: int = 4
    num_clusters: int = 8
    zipf_exponent: float = 1.0
    informative_view_map: list | None = None
    noise_views: list = field(default_factory=lambda: [3])
    tail_attenuation: float = 0.4
    noise_sigma: float = 0.1
    seed: int = 0

    def resolved_view_map(self) -> list[int]:
        if self.informative_view_map is not None:
            return list(self.informative_view_map)
        usable = [m for m in range(self.M) if m not in set(self.noise_views)]
        if not usable:
            return [0] * self.num_clusters
        n_inf = max(1, min(len(usable), self.num_classes // 2))
        return [usable[(c % self.num_classes) % n_inf] for c in range(self.num_clusters)]

    def validate(self) -> "DatasetSpec":
        if self.num_clusters > self.N:
            raise ConfigError(f"infeasible spec: {self.num_clusters} clusters > N={self.N}")
        if min(self.N, self.M, self.d, self.num_classes, self.num_clusters) < 1:
            raise ConfigError("N, M, d, num_classes, num_clusters must be >= 1")
        if self.num_clusters < self.num_classes:
            raise ConfigError("infeasible spec: num_clusters must be >= num_classes")
        if any(not 0 <= m < self.M for m in self.noise_views):
            raise ConfigError(f"noise view index out of range: {self.noise_views}")
        vmap = self.resolved_view_map()
        if len(vmap) != self.num_clusters or any(not 0 <= m < self.M for m in vmap):
            raise ConfigError(f"informative_view_map must give a view per cluster: {vmap}")
        if set(vmap) & set(self.noise_views):
            raise ConfigError("informative views and noise views must be disjoint")
        if not 0 < self.tail_attenuation <= 1:
            raise ConfigError("tail_attenuation must lie in (0, 1]")
        if self.noise_sigma < 0 or self.zipf_exponent < 0:
            raise ConfigError("noise_sigma and zipf_exponent must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown DatasetSpec keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticDataset:
    views: list  # M arrays, N x d, float32
    labels: np.ndarray
    cluster_of: np.ndarray
    is_tail: np.ndarray
    spec: DatasetSpec

    @property
    def N(self) -> int:
        return len(self.labels)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_of, minlength=self.spec.num_clusters)


def zipf_sizes(N: int, k: int, exponent: float) -> np.ndarray:
    """Cluster sizes proportional to rank^-exponent, largest-remainder rounded to N."""
    w = np.arange(1, k + 1, dtype=np.float64) ** -exponent
    exact = N * w / w.sum()
    sizes = np.floor(exact).astype(np.int64)
    rem = N - sizes.sum()
    # stable sort keeps lower cluster index first on equal remainders
    order = np.argsort(-(exact - sizes), kind="stable")
    sizes[order[:rem]] += 1
    return sizes


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def signatures(spec: DatasetSpec, rng) -> np.ndarray:
    """Array (num_clusters, M, d) of unit signatures (zero rows in noise views)."""
    C, M, d, K = spec.num_clusters, spec.M, spec.d, spec.num_classes
    vmap = spec.resolved_view_map()
    sig = np.zeros((C, M, d))
    for m in range(M):
        if m in set(spec.noise_views):
            continue
        # relevance, background and K class directions, mutually orthonormal
        basis = np.linalg.qr(rng.standard_normal((d, d)))[0].T
        relevance, background, cls_dirs = basis[0], basis[1], basis[2:]
        seen = {}
        for c in range(C):
            if vmap[c] != m:
                sig[c, m] = background
                continue
            label = c % K
            sign = 1.0 if seen.get(label, 0) % 2 == 0 else -1.0
            seen[label] = seen.get(label, 0) + 1
            v = relevance + sign * cls_dirs[label % len(cls_dirs)]
            sig[c, m] = v / np.linalg.norm(v)
    return sig


def generate(spec: DatasetSpec) -> SyntheticDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sizes = zipf_sizes(spec.N, spec.num_clusters, spec.zipf_exponent)
    cluster_of = np.repeat(np.arange(spec.num_clusters), sizes)
    tail_clusters = sizes < sizes.mean()
    is_tail = tail_clusters[cluster_of]
    labels = cluster_of % spec.num_classes
    sig = signatures(spec, rng)
    strength = np.where(is_tail, spec.tail_attenuation, 1.0)
    views = []
    for m in range(spec.M):
        s = 0.0 if m in set(spec.noise_views) else strength[:, None]
        base = sig[cluster_of, m] * s
        noise = rng.standard_normal((spec.N, spec.d)) * spec.noise_sigma
        views.append((base + noise).astype(np.float32))
    return SyntheticDataset(views, labels.astype(np.int64), cluster_of.astype(np.int64),
                            is_tail, spec)


def split(ds: SyntheticDataset, train_frac: float, val_frac: float, seed: int = 0):
    """Stratified-by-cluster train/val/test index arrays.

    Returns ``(train, val, test, warnings)``; clusters with fewer than three
    nodes go wholly to train and are listed in ``warnings``.
    """
    if not (0 < train_frac < 1 and 0 < val_frac < 1 and train_frac + val_frac < 1):
        raise ConfigError(f"bad split fractions {train_frac}, {val_frac}")
    rng = np.random.default_rng(seed)
    tr, va, te, notes = [], [], [], []
    for c in range(ds.spec.num_clusters):
        idx = np.flatnonzero(ds.cluster_of == c)
        if idx.size == 0:
            continue
        if idx.size < 3:
            msg = f"cluster {c} has {idx.size} nodes; placed in train only"
            warnings.warn(msg)
            notes.append(msg)
            tr.append(idx)
            continue
        idx = rng.permutation(idx)
        n_tr = max(1, int(round(train_frac * idx.size)))
        n_va = max(1, int(round(val_frac * idx.size)))
        n_tr = min(n_tr, idx.size - 2)
        tr.append(idx[:n_tr])
        va.append(idx[n_tr:n_tr + n_va])
        te.append(idx[n_tr + n_va:])
    cat = lambda xs: np.sort(np.concatenate(xs)) if xs else np.array([], dtype=np.int64)  # noqa: E731
    return cat(tr), cat(va), cat(te), notes


def make_view_batch(ds: SyntheticDataset, indices, dtype=None) -> ViewBatch:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= ds.N):
        raise IndexError(f"indices out of range for dataset of {ds.N} nodes")
    return ViewBatch.from_arrays([v[idx] for v in ds.views], dtype=dtype)


# ---------------------------------------------------------------- file format

DATASET_MAGIC = b"HGSB"
DATASET_VERSION = 1


def save_dataset(ds: SyntheticDataset, path) -> None:
    s = ds.spec
    header = np.array([DATASET_VERSION, ds.N, s.M, s.d, s.num_classes, s.num_clusters], dtype="<u4")
    spec_json = json.dumps(s.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(header.tobytes())
        for v in ds.views:
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
        f.write(ds.labels.astype("<i8").tobytes())
        f.write(ds.cluster_of.astype("<i8").tobytes())
        f.write(ds.is_tail.astype("u1").tobytes())
        f.write(np.array([len(spec_json)], dtype="<u4").tobytes())
        f.write(spec_json)


def load_dataset(path) -> SyntheticDataset:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != DATASET_MAGIC:
        raise DatasetError(f"{path}: not an HGSB dataset file")
    version, N, M, d, _, _ = np.frombuffer(buf, "<u4", 6, 4)
    if version != DATASET_VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version}")
    off = 4 + 24
    views = []
    for _ in range(M):
        views.append(np.frombuffer(buf, "<f4", N * d, off).reshape(N, d).astype(np.float32))
        off += 4 * N * d
    labels = np.frombuffer(buf, "<i8", N, off).astype(np.int64)
    off += 8 * N
    cluster_of = np.frombuffer(buf, "<i8", N, off).astype(np.int64)
    off += 8 * N
    is_tail = np.frombuffer(buf, "u1", N, off).astype(bool)
    off += N
    (n,) = np.frombuffer(buf, "<u4", 1, off)
    off += 4
    spec = DatasetSpec(**json.loads(buf[off:off + n].decode()))
    return SyntheticDataset(views, labels, cluster_of, is_tail, spec)
