"""Representation files, tabular ingestion and cluster-aware fold assignment."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    DegenerateTreatmentError,
    DimensionError,
    FormatError,
    PartitionError,
    TruncatedFileError,
    ValidationError,
)

MAGIC = b"GPIR"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def save_reps(path: str | os.PathLike, reps: np.ndarray) -> None:
    """Write a representation matrix as GPIR v1 (little-endian float32, row-major)."""
    reps = np.asarray(reps)
    if reps.ndim != 2 or reps.shape[1] < 1:
        raise DimensionError(f"representations must be an (n, d>=1) matrix, got {reps.shape}")
    if not np.all(np.isfinite(reps)):
        raise ValidationError("representations contain NaN or Inf")
    n, d = reps.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d))
        fh.write(np.ascontiguousarray(reps, dtype="<f4").tobytes())


def load_reps(path: str | os.PathLike) -> np.ndarray:
    """Read a GPIR file into an ``(n, d)`` float64 array."""
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header needs {_HEADER.size} bytes, file has {len(head)}")
    magic, version, n, d = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported GPIR version {version}")
    if d < 1:
        raise FormatError(f"{path}: representation width must be >= 1")
    expected = n * d * 4
    actual = size - _HEADER.size
    if actual < expected:
        raise TruncatedFileError(
            f"{path}: payload truncated, expected {expected} bytes, got {actual}"
        )
    if actual > expected:
        raise FormatError(f"{path}: {actual - expected} trailing bytes after payload")
    if n == 0:
        return np.zeros((0, d))
    mapped = np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(n, d))
    values = np.array(mapped, dtype=np.float64)
    del mapped
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.argmax(bad.any(axis=1)))
        raise ValidationError(f"{path}: non-finite value in row {row}")
    return values


def expand_missing(z_raw: np.ndarray) -> np.ndarray:
    """Zero-fill missing covariates and append indicator and interaction blocks.

    Missing cells are NaN. Output is ``[filled, indicators, filled * indicators]``.
    """
    z_raw = np.asarray(z_raw, dtype=np.float64)
    if z_raw.ndim == 1:
        z_raw = z_raw[:, None]
    missing = np.isnan(z_raw)
    filled = np.where(missing, 0.0, z_raw)
    indicator = missing.astype(np.float64)
    return np.hstack([filled, indicator, filled * indicator])


def discretize_quantile(x: np.ndarray, bins: int) -> np.ndarray:
    """Label each value by its sample-quantile bin.

    Edges are the linearly interpolated (type 7) quantiles at ``k / bins``.
    Bins are closed on the right, so a value equal to an edge takes the
    lower label.
    """
    x = np.asarray(x, dtype=np.float64)
    if bins < 2:
        raise ValidationError("need at least two bins")
    if x.size < bins:
        raise ValidationError(f"cannot form {bins} bins from {x.size} values")
    if not np.all(np.isfinite(x)):
        raise ValidationError("treatment values must be finite")
    if np.all(x == x[0]):
        raise DegenerateTreatmentError("treatment is constant; cannot discretize")
    edges = np.quantile(x, np.arange(1, bins) / bins, method="linear")
    labels = np.searchsorted(edges, x, side="left")
    empty = np.setdiff1d(np.arange(bins), labels)
    if empty.size:
        raise DegenerateTreatmentError(
            f"quantile bins {empty.tolist()} are empty; too many tied treatment values"
        )
    return labels.astype(np.int64)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CausalDataset:
    y: np.ndarray
    t: np.ndarray
    z: np.ndarray
    cluster: np.ndarray
    reps: np.ndarray
    n_levels: int
    provenance: str | None = field(default=None, compare=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        n = y.shape[0]
        t = np.asarray(self.t)
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim == 1:
            z = z.reshape(n, -1)
        reps = np.asarray(self.reps, dtype=np.float64)
        cluster = np.asarray(self.cluster)
        for name, arr in (("t", t), ("z", z), ("cluster", cluster), ("reps", reps)):
            if arr.shape[0] != n:
                raise DimensionError(f"{name} has {arr.shape[0]} rows, y has {n}")
        if reps.ndim != 2 or reps.shape[1] < 1:
            raise DimensionError("reps must be an (n, d_r) matrix")
        if not np.all(np.isfinite(y)):
            raise ValidationError("outcome contains non-finite values")
        if not np.all(np.isfinite(z)):
            raise ValidationError("covariates contain non-finite values; run expand_missing first")
        if not np.all(np.isfinite(reps)):
            raise ValidationError("representations contain non-finite values")
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(np.mod(t, 1) == 0):
                raise ValidationError("treatment must be integer coded")
            t = t.astype(np.int64)
        levels = int(self.n_levels)
        if levels < 2:
            raise DegenerateTreatmentError("need at least two treatment levels")
        if t.min() < 0 or t.max() >= levels:
            raise ValidationError(f"treatment levels must lie in 0..{levels - 1}")
        absent = np.setdiff1d(np.arange(levels), t)
        if absent.size:
            raise DegenerateTreatmentError(f"treatment levels {absent.tolist()} never occur")
        # dense-code clusters in order of first appearance
        _, first, inverse = np.unique(cluster, return_index=True, return_inverse=True)
        rank = np.empty_like(first)
        rank[np.argsort(first)] = np.arange(first.size)
        dense = rank[inverse].astype(np.int64)
        for name, arr in (("y", y), ("t", t), ("z", z), ("cluster", dense), ("reps", reps)):
            object.__setattr__(self, name, _readonly(arr))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_clusters(self) -> int:
        return int(self.cluster.max()) + 1 if self.n else 0

    @property
    def d_z(self) -> int:
        return self.z.shape[1]


def load_table(path: str | os.PathLike) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False, na_values=[""])


def assemble_dataset(
    table: pd.DataFrame,
    reps: np.ndarray,
    bins: int | None = None,
    provenance: str | None = None,
) -> CausalDataset:
    """Build a :class:`CausalDataset` from a CSV table and representation rows.

    Uses column ``t`` when present, otherwise discretizes ``t_raw`` into
    ``bins`` quantile bins (10 when unspecified). ``z_*`` columns are
    expanded with missing indicators.
    """
    for col in ("y", "cluster"):
        if col not in table.columns:
            raise ValidationError(f"missing column {col}")
    if "t" in table.columns:
        t = table["t"].to_numpy()
        if pd.isna(t).any():
            raise ValidationError("column t has missing values")
        t = t.astype(np.float64)
        if not np.all(np.mod(t, 1) == 0) or t.min() < 0:
            raise ValidationError("column t must hold non-negative integers")
        t = t.astype(np.int64)
        n_levels = int(t.max()) + 1
    elif "t_raw" in table.columns:
        n_levels = 10 if bins is None else bins
        t = discretize_quantile(table["t_raw"].to_numpy(dtype=np.float64), n_levels)
    else:
        raise ValidationError("missing column t")
    if len(table) != reps.shape[0]:
        raise DimensionError(f"table has {len(table)} rows, representations have {reps.shape[0]}")
    y = table["y"].to_numpy(dtype=np.float64)
    if np.isnan(y).any():
        raise ValidationError("column y has missing values")
    z_cols = sorted(c for c in table.columns if c.startswith("z_"))
    z = expand_missing(table[z_cols].to_numpy(dtype=np.float64)) if z_cols else np.zeros((len(table), 0))
    return CausalDataset(y, t, z, table["cluster"].to_numpy(), reps, n_levels, provenance)


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldAssignment:
    """``fold_of[i]`` is row i's fold; ``inner[k, i]`` is 0 (I1) or 1 (I2)
    for rows outside fold k and -1 for rows inside it."""

    k: int
    fold_of: np.ndarray
    inner: np.ndarray
    seed: int = 0

    def held_out(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def inner_rows(self, k: int, part: int) -> np.ndarray:
        return np.flatnonzero(self.inner[k] == part)


def _deal(sizes: np.ndarray, order: np.ndarray, parts: int) -> np.ndarray:
    """Assign clusters (visited in ``order``) to the currently lightest part."""
    load = np.zeros(parts, dtype=np.int64)
    part_of = np.empty(sizes.size, dtype=np.int64)
    for c in order:
        p = int(np.argmin(load))
        part_of[c] = p
        load[p] += sizes[c]
    return part_of


def make_folds(ds_or_cluster, k: int, seed: int) -> FoldAssignment:
    """Cluster-pure random partition into ``k`` folds plus inner I1/I2 splits."""
    cluster = ds_or_cluster.cluster if isinstance(ds_or_cluster, CausalDataset) else np.asarray(ds_or_cluster)
    if k < 2:
        raise PartitionError("cross-fitting needs k >= 2 folds")
    _, cluster = np.unique(cluster, return_inverse=True)
    n_clusters = int(cluster.max()) + 1 if cluster.size else 0
    if n_clusters < 2 * k:
        raise PartitionError(f"{n_clusters} clusters cannot fill {k} folds with two inner splits each")
    sizes = np.bincount(cluster, minlength=n_clusters)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    fold_of_cluster = _deal(sizes, rng.permutation(n_clusters), k)
    inner = np.full((k, cluster.size), -1, dtype=np.int64)
    for fold in range(k):
        outside = np.flatnonzero(fold_of_cluster != fold)
        part = np.full(n_clusters, -1, dtype=np.int64)
        part[outside] = _deal(sizes[outside], rng.permutation(outside.size), 2)
        inner[fold] = np.where(fold_of_cluster[cluster] == fold, -1, part[cluster])
    return FoldAssignment(k, fold_of_cluster[cluster], inner, seed)
