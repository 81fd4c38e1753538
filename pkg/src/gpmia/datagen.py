"""Synthetic two-cluster classification data, stratified splits and audit units.

Cluster geometry: class ``c`` has centroid ``(2c-1) * class_sep / 2`` on the
first two coordinates and 0 elsewhere, so the centroid distance is
``class_sep * sqrt(2)``. Noise is isotropic unit-variance Gaussian.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gpmia.errors import ConfigError, EmptyDataset, InsufficientSamples, InvalidFractions
from gpmia.features import AuditUnit

PROVENANCES = ("member", "non_member", "unknown")
N_INFORMATIVE = 2


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 2000
    n_features: int = 10
    class_sep: float = 1.0
    flip_prob: float = 0.0
    class_weights: tuple[float, float] = (0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if self.n_features < 1:
            raise ConfigError("n_features must be >= 1")
        if not self.class_sep > 0:
            raise ConfigError("class_sep must be > 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must lie in [0, 1]")
        w = self.class_weights
        if len(w) != 2 or min(w) <= 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ConfigError("class_weights must be two positive numbers summing to 1")


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    provenance: str = "unknown"
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.ascontiguousarray(self.samples, dtype=np.float64)
        y = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ConfigError(f"{X.shape} samples do not match {y.shape[0]} labels")
        if not np.all(np.isfinite(X)):
            raise ConfigError("samples must be finite")
        if self.provenance not in PROVENANCES:
            raise ConfigError(f"provenance must be one of {PROVENANCES}")
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(X.shape[1]))
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "samples", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", names)

    def __len__(self):
        return self.samples.shape[0]

    def subset(self, idx, provenance=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], provenance or self.provenance,
                       self.feature_names)

    def with_provenance(self, provenance):
        return Dataset(self.samples, self.labels, provenance, self.feature_names)


def largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    """Integer apportionment of ``total``; ties go to the earlier entry."""
    w = np.asarray(weights, dtype=np.float64)
    quotas = total * w / w.sum()
    base = np.floor(quotas).astype(int)
    short = total - int(base.sum())
    rema = quotas - base
    # stable sort keeps earlier indices first among equal remainders
    order = sorted(range(len(w)), key=lambda i: -rema[i])
    for i in order[:short]:
        base[i] += 1
    return base.tolist()


def class_centroids(cfg: SynthConfig) -> np.ndarray:
    c = np.zeros((2, cfg.n_features))
    k = min(N_INFORMATIVE, cfg.n_features)
    c[0, :k] = -cfg.class_sep / 2.0
    c[1, :k] = cfg.class_sep / 2.0
    return c


def generate(cfg: SynthConfig, provenance: str = "unknown", return_clusters: bool = False):
    """Sample a labelled dataset. Optionally also return pre-flip cluster ids."""
    rng = np.random.default_rng(cfg.seed)
    counts = largest_remainder(cfg.n_samples, cfg.class_weights)
    clusters = np.repeat(np.arange(2), counts)
    clusters = clusters[rng.permutation(cfg.n_samples)]
    X = rng.standard_normal((cfg.n_samples, cfg.n_features)) + class_centroids(cfg)[clusters]
    flips = rng.random(cfg.n_samples) < cfg.flip_prob
    y = np.where(flips, 1 - clusters, clusters)
    ds = Dataset(X, y, provenance)
    return (ds, clusters) if return_clusters else ds


def _check_fractions(fractions):
    f = np.asarray(fractions, dtype=np.float64)
    if f.ndim != 1 or f.size == 0 or np.any(f <= 0) or abs(f.sum() - 1.0) > 1e-9:
        raise InvalidFractions(f"fractions must be positive and sum to 1, got {list(fractions)}")
    return f


def split(ds: Dataset, fractions: Sequence[float], seed: int = 0) -> list[Dataset]:
    """Stratified partition of ``ds``.

    Split sizes are apportioned from the total by largest remainder. Each
    class is apportioned across splits the same way, then single samples are
    shifted between splits until the split sizes match.
    """
    f = _check_fractions(fractions)
    if len(ds) == 0:
        raise EmptyDataset("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    sizes = largest_remainder(len(ds), f)
    classes = np.unique(ds.labels)
    pools = {c: list(rng.permutation(np.flatnonzero(ds.labels == c))) for c in classes}
    class_totals = [len(pools[c]) for c in classes]
    # per-class allocation: apportion each class across splits, then fix row sums
    alloc = np.array([largest_remainder(t, f) for t in class_totals])  # (n_classes, n_splits)
    _balance_rows(alloc, sizes)
    out = []
    for s in range(len(f)):
        idx = []
        for ci, c in enumerate(classes):
            take = alloc[ci, s]
            idx.extend(pools[c][:take])
            pools[c] = pools[c][take:]
        out.append(ds.subset(np.sort(np.array(idx, dtype=np.int64))))
    return out


def _balance_rows(alloc, sizes):
    """Move single samples between splits until column sums equal ``sizes``."""
    sizes = np.asarray(sizes)
    for _ in range(alloc.size * 4):
        diff = alloc.sum(axis=0) - sizes
        if not np.any(diff):
            return
        over = int(np.argmax(diff))
        under = int(np.argmin(diff))
        # take from the class with the most slack in the over-full split
        ci = int(np.argmax(alloc[:, over]))
        alloc[ci, over] -= 1
        alloc[ci, under] += 1
    raise AssertionError("split allocation did not converge")


def make_units(ds: Dataset, unit_size: int, n_units: int, seed: int = 0, stratified: bool = False,
               disjoint: bool = True, prefix: str = "unit") -> list[AuditUnit]:
    """Draw ``n_units`` audit units of ``unit_size`` samples each.

    With ``disjoint=True`` units never share samples (requires
    ``unit_size * n_units <= len(ds)``). With ``disjoint=False`` each unit is an
    independent draw without replacement, so units may overlap. With
    ``stratified=True`` each unit keeps the dataset's class proportions and
    holds at least one sample of every class.
    """
    if unit_size < 1 or n_units < 1:
        raise ConfigError("unit_size and n_units must be >= 1")
    n = len(ds)
    if unit_size > n or (disjoint and unit_size * n_units > n):
        raise InsufficientSamples(
            f"need {unit_size * n_units if disjoint else unit_size} samples, dataset has {n}")
    rng = np.random.default_rng(seed)
    classes = np.unique(ds.labels)
    if stratified and unit_size < len(classes):
        raise InsufficientSamples("unit_size smaller than the number of classes")
    if stratified:
        props = [np.sum(ds.labels == c) for c in classes]
        per_class = largest_remainder(unit_size, props)
        for i in range(len(per_class)):
            if per_class[i] == 0:
                j = int(np.argmax(per_class))
                per_class[j] -= 1
                per_class[i] += 1

    if disjoint:
        if stratified:
            pools = {c: rng.permutation(np.flatnonzero(ds.labels == c)) for c in classes}
            for ci, c in enumerate(classes):
                if per_class[ci] * n_units > len(pools[c]):
                    raise InsufficientSamples(f"class {c} has too few samples for {n_units} stratified units")
            chunks = [
                np.concatenate([pools[c][u * per_class[ci]:(u + 1) * per_class[ci]]
                                for ci, c in enumerate(classes)])
                for u in range(n_units)
            ]
        else:
            perm = rng.permutation(n)
            chunks = [perm[u * unit_size:(u + 1) * unit_size] for u in range(n_units)]
    else:
        chunks = []
        for _ in range(n_units):
            if stratified:
                chunks.append(np.concatenate([
                    rng.choice(np.flatnonzero(ds.labels == c), per_class[ci], replace=False)
                    for ci, c in enumerate(classes)]))
            else:
                chunks.append(rng.choice(n, unit_size, replace=False))

    width = max(3, len(str(n_units - 1)))
    return [
        AuditUnit(ds.samples[np.sort(idx)], ds.labels[np.sort(idx)], f"{prefix}-{u:0{width}d}")
        for u, idx in enumerate(chunks)
    ]


# -- CSV ----------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def write_csv(ds: Dataset, path, include_provenance: bool = True) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = list(ds.feature_names) + ["label"] + (["provenance"] if include_provenance else [])
        w.writerow(header)
        for row, lab in zip(ds.samples, ds.labels):
            w.writerow([_fmt(v) for v in row] + [int(lab)] + ([ds.provenance] if include_provenance else []))


def read_csv(path, label_column: str | None = None, provenance: str | None = None) -> Dataset:
    """Read the dataset CSV format.

    The label is the column named ``label_column`` if given, else ``label`` if
    present, else the last column (ignoring a trailing ``provenance``).
    """
    try:
        fh = open(path, encoding="utf-8", newline="")
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset file not found: {path}") from exc
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyDataset(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if not body:
        raise EmptyDataset(f"{path}: no data rows")
    prov_col = header.index("provenance") if "provenance" in header else None
    if label_column is not None:
        if label_column not in header:
            raise ConfigError(f"{path}: label column {label_column!r} not in header")
        lab_col = header.index(label_column)
    elif "label" in header:
        lab_col = header.index("label")
    else:
        lab_col = max(i for i in range(len(header)) if i != prov_col)
    feat_cols = [i for i in range(len(header)) if i not in (lab_col, prov_col)]
    try:
        X = np.array([[float(r[i]) for i in feat_cols] for r in body])
        yf = np.array([float(r[lab_col]) for r in body])
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: malformed row ({exc})") from exc
    if np.any(yf != np.round(yf)):
        raise ConfigError(f"{path}: labels must be integers")
    if provenance is None:
        provs = {r[prov_col] for r in body} if prov_col is not None else set()
        provenance = provs.pop() if len(provs) == 1 else "unknown"
        if provenance not in PROVENANCES:
            provenance = "unknown"
    return Dataset(X, yf.astype(np.int64), provenance, tuple(header[i] for i in feat_cols))


def concat(datasets: Sequence[Dataset], provenance: str | None = None) -> Dataset:
    if not datasets:
        raise EmptyDataset("nothing to concatenate")
    return Dataset(np.vstack([d.samples for d in datasets]), np.concatenate([d.labels for d in datasets]),
                   provenance or datasets[0].provenance, datasets[0].feature_names)


def empirical_centroid_distance(ds: Dataset, clusters=None) -> float:
    groups = ds.labels if clusters is None else clusters
    c0 = ds.samples[groups == 0].mean(axis=0)
    c1 = ds.samples[groups == 1].mean(axis=0)
    return float(math.sqrt(np.sum((c0 - c1) ** 2)))
