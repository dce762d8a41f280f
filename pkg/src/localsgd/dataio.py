"""LIBSVM dataset ingestion and assignment of samples to nodes.

Parsing preserves file order exactly: heterogeneity in the experiments comes
from partitioning by index, so no shuffling happens anywhere in this module.
Datasets are fetched out-of-band into a data directory; a plain-text manifest
(name, path, sha256, expected n, expected dim) is validated on load and the
loader never downloads anything.
"""
from __future__ import annotations

import enum
import gzip
import hashlib
import io
import os
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np
import scipy.sparse as sp

from .numkit import RngStream, SparseVector


class LibsvmFormatError(ValueError):
    """Malformed LIBSVM input; message carries the offending line number."""


class ManifestError(ValueError):
    """Manifest missing, unparsable, or not matching the file on disk."""


class Regime(enum.Enum):
    IDENTICAL = "identical"
    HETEROGENEOUS = "heterogeneous"


@dataclass(frozen=True)
class Sample:
    features: SparseVector
    label: float  # exactly -1.0 or +1.0 after normalization


@dataclass(frozen=True)
class Dataset:
    """Sparse labeled samples in file order.

    Rows live in one CSR matrix; `sample(i)` materializes the i-th row as a
    SparseVector on demand.
    """

    features: sp.csr_matrix  # shape (n, dim), float64
    labels: np.ndarray  # shape (n,), entries in {-1.0, +1.0}
    dim: int
    name: str = "unnamed"

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.features.shape[1] != self.dim:
            raise ValueError("feature matrix width disagrees with dim")
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        bad = ~np.isin(self.labels, (-1.0, 1.0))
        if np.any(bad):
            raise ValueError("labels must be exactly -1 or +1")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def sample(self, i: int) -> Sample:
        row = self.features.getrow(i)
        return Sample(
            features=SparseVector(row.indices.astype(np.int64), row.data, self.dim),
            label=float(self.labels[i]),
        )

    def row_norms_sq(self) -> np.ndarray:
        sq = self.features.multiply(self.features)
        return np.asarray(sq.sum(axis=1)).ravel()


@dataclass(frozen=True)
class Partition:
    """Half-open index ranges assigning samples to M nodes."""

    node_ranges: tuple[tuple[int, int], ...]
    regime: Regime

    @property
    def M(self) -> int:
        return len(self.node_ranges)

    def sizes(self) -> list[int]:
        return [stop - start for start, stop in self.node_ranges]


def _normalize_labels(raw: np.ndarray) -> np.ndarray:
    """Map raw labels onto {-1, +1}; smaller raw label becomes -1."""
    distinct = set(float(v) for v in np.unique(raw))
    if distinct <= {-1.0, 1.0}:
        return raw.astype(np.float64)
    if distinct <= {0.0, 1.0}:
        return np.where(raw <= 0.0, -1.0, 1.0)
    if distinct <= {1.0, 2.0}:
        return np.where(raw <= 1.0, -1.0, 1.0)
    raise LibsvmFormatError(
        f"unsupported label set {sorted(distinct)}; expected {{0,1}}, {{-1,+1}} or {{1,2}}"
    )


def parse_libsvm(source: TextIO | str, name: str = "unnamed",
                 dim: int | None = None) -> Dataset:
    """Parse LIBSVM text ("label idx:val ...", 1-based indices) into a Dataset.

    Indices are converted to 0-based and must be strictly increasing within a
    line. `dim` may only pad the inferred dimension upward (LIBSVM files omit
    trailing all-zero features).
    """
    stream = io.StringIO(source) if isinstance(source, str) else source
    data: list[float] = []
    indices: list[int] = []
    indptr = [0]
    raw_labels: list[float] = []

    for lineno, line in enumerate(stream, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            raw_labels.append(float(parts[0]))
        except ValueError:
            raise LibsvmFormatError(f"line {lineno}: non-numeric label {parts[0]!r}") from None
        prev = -1
        for tok in parts[1:]:
            try:
                idx_s, val_s = tok.split(":")
                idx = int(idx_s) - 1
                val = float(val_s)
            except ValueError:
                raise LibsvmFormatError(f"line {lineno}: malformed feature {tok!r}") from None
            if idx < 0:
                raise LibsvmFormatError(f"line {lineno}: feature index must be >= 1")
            if idx <= prev:
                raise LibsvmFormatError(f"line {lineno}: indices not strictly increasing")
            prev = idx
            if val != 0.0:
                indices.append(idx)
                data.append(val)
        indptr.append(len(data))

    if not raw_labels:
        raise LibsvmFormatError("empty file: no samples")

    inferred = (max(indices) + 1) if indices else 1
    if dim is None:
        dim = inferred
    elif dim < inferred:
        raise LibsvmFormatError(f"dim override {dim} below max feature index ({inferred})")

    labels = _normalize_labels(np.asarray(raw_labels, dtype=np.float64))
    mat = sp.csr_matrix(
        (np.asarray(data, dtype=np.float64),
         np.asarray(indices, dtype=np.int64),
         np.asarray(indptr, dtype=np.int64)),
        shape=(len(raw_labels), dim),
    )
    return Dataset(features=mat, labels=labels, dim=dim, name=name)


def to_libsvm(ds: Dataset, stream: TextIO) -> None:
    """Write a Dataset back out as LIBSVM text (1-based indices)."""
    mat = ds.features
    for i in range(ds.n):
        start, stop = mat.indptr[i], mat.indptr[i + 1]
        feats = " ".join(
            f"{mat.indices[k] + 1}:{float(mat.data[k])!r}" for k in range(start, stop)
        )
        label = "+1" if ds.labels[i] > 0 else "-1"
        stream.write(f"{label} {feats}".rstrip() + "\n")


def partition(ds: Dataset, M: int, regime: Regime) -> Partition:
    """Assign samples to M nodes.

    Heterogeneous: contiguous blocks in file order, sizes differing by at
    most one with the remainder going to the lowest-index nodes. Identical:
    every node references the full dataset.
    """
    if M <= 0:
        raise ValueError("M must be positive")
    if regime == Regime.IDENTICAL:
        return Partition(node_ranges=tuple((0, ds.n) for _ in range(M)), regime=regime)
    if M > ds.n:
        raise ValueError(f"cannot split {ds.n} samples over {M} nodes without empty nodes")
    base, extra = divmod(ds.n, M)
    ranges = []
    start = 0
    for m in range(M):
        size = base + (1 if m < extra else 0)
        ranges.append((start, start + size))
        start += size
    return Partition(node_ranges=tuple(ranges), regime=regime)


# ---------------------------------------------------------------------------
# Manifest handling
# ---------------------------------------------------------------------------

DATA_DIR_ENV = "LOCALSGD_DATA_DIR"


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    path: str
    sha256: str
    n: int
    dim: int


def parse_manifest(source: TextIO | str) -> dict[str, ManifestEntry]:
    """Parse a manifest: one `name path sha256 n dim` entry per line."""
    stream = io.StringIO(source) if isinstance(source, str) else source
    entries: dict[str, ManifestEntry] = {}
    for lineno, line in enumerate(stream, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ManifestError(f"manifest line {lineno}: expected 5 fields, got {len(parts)}")
        name, path, sha, n_s, dim_s = parts
        try:
            entries[name] = ManifestEntry(name, path, sha, int(n_s), int(dim_s))
        except ValueError:
            raise ManifestError(f"manifest line {lineno}: n and dim must be integers") from None
    return entries


def sha256_of(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_dataset(entry: ManifestEntry, data_dir: str) -> Dataset:
    """Load and validate a manifest entry; fails loudly on any mismatch."""
    path = os.path.join(data_dir, entry.path)
    if not os.path.exists(path):
        raise ManifestError(f"dataset file not found: {path}")
    digest = sha256_of(path)
    if digest != entry.sha256:
        raise ManifestError(
            f"checksum mismatch for {entry.name}: expected {entry.sha256}, got {digest}"
        )
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rt") as f:
        ds = parse_libsvm(f, name=entry.name, dim=entry.dim)
    if ds.n != entry.n or ds.dim != entry.dim:
        raise ManifestError(
            f"shape mismatch for {entry.name}: manifest says n={entry.n} dim={entry.dim}, "
            f"file has n={ds.n} dim={ds.dim}"
        )
    return ds


# ---------------------------------------------------------------------------
# Synthetic data (hermetic fallback when LIBSVM files are absent)
# ---------------------------------------------------------------------------

def generate_synthetic(n: int, d: int, seed: int, *, label_noise: float = 0.0,
                       sort_by_label: bool = False, scale: float = 1.0,
                       name: str | None = None) -> Dataset:
    """Seeded synthetic classification data: Gaussian features, planted separator.

    `sort_by_label` orders samples by label so that contiguous index-based
    partitioning yields deliberately non-i.i.d. nodes. `label_noise` flips
    each label independently with the given probability.
    """
    if n <= 0 or d <= 0:
        raise ValueError("n and d must be positive")
    gen = RngStream(seed=seed, stream_id=0).generator()
    feats = gen.standard_normal((n, d)) * scale
    separator = gen.standard_normal(d)
    labels = np.where(feats @ separator >= 0.0, 1.0, -1.0)
    if label_noise > 0.0:
        flip = gen.random(n) < label_noise
        labels[flip] = -labels[flip]
    if sort_by_label:
        order = np.argsort(labels, kind="stable")  # all -1 first, file order within class
        feats = feats[order]
        labels = labels[order]
    if name is None:
        name = f"synthetic-n{n}-d{d}-s{seed}"
    return Dataset(features=sp.csr_matrix(feats), labels=labels, dim=d, name=name)


def concat_datasets(parts: Iterable[Dataset], name: str = "concat") -> Dataset:
    """Stack datasets in order; used e.g. to replicate one block across nodes."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to concatenate")
    dim = max(p.dim for p in parts)
    mats = [sp.csr_matrix((p.features.data, p.features.indices, p.features.indptr),
                          shape=(p.n, dim)) for p in parts]
    feats = sp.vstack(mats, format="csr")
    labels = np.concatenate([p.labels for p in parts])
    return Dataset(features=feats, labels=labels, dim=dim, name=name)
