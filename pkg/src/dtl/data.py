"""Synthetic tasks, class-balanced subsampling, minibatching and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy.linalg import expm

from dtl.errors import ContractError, ParseError


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    task: str = "task"
    split: str = "train"
    rows: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ContractError(f"features {x.shape} and labels {y.shape} do not align")
        if not np.all(np.isfinite(x)):
            raise ContractError("features must be finite")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        rows = np.arange(len(y)) if self.rows is None else np.asarray(self.rows, dtype=np.int64)
        object.__setattr__(self, "rows", rows)

    def __len__(self):
        return len(self.y)

    @property
    def dim(self):
        return self.x.shape[1]

    def class_counts(self):
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, idx, **provenance):
        idx = np.asarray(idx, dtype=np.int64)
        prov = dict(self.provenance)
        prov.update(provenance)
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.task, self.split,
                       self.rows[idx], prov)

    def with_task(self, task):
        return Dataset(self.x, self.y, self.num_classes, task, self.split, self.rows, self.provenance)


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    idx: np.ndarray


def _class_means(rng, k, d, separation):
    """``k`` means at pairwise distance 2*separation when k <= d, random directions otherwise."""
    if k <= d:
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        return math.sqrt(2.0) * separation * q[:, :k].T
    dirs = rng.normal(size=(k, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return math.sqrt(2.0) * separation * dirs


def make_gaussian_task(k, d, n_per_class, separation, seed, n_test_per_class=None, task="task"):
    """Train/test pair of ``k`` unit-covariance Gaussian clusters in ``d`` dimensions.

    Cluster means are orthogonal directions scaled so neighbouring means sit
    ``2 * separation`` apart; larger separation makes the classes easier.
    """
    if k < 2 or d < 2:
        raise ContractError("need k >= 2 classes and d >= 2 dimensions")
    n_test_per_class = n_per_class if n_test_per_class is None else n_test_per_class
    rng = np.random.default_rng(seed)
    means = _class_means(rng, k, d, separation)
    prov = {"generator": "gaussian", "k": k, "d": d, "n_per_class": n_per_class,
            "separation": separation, "seed": seed}

    def draw(n, offset, split):
        y = np.repeat(np.arange(k), n)
        x = means[y] + rng.normal(size=(k * n, d))
        return Dataset(x, y, k, task, split, np.arange(offset, offset + k * n), dict(prov))

    train = draw(n_per_class, 0, "train")
    test = draw(n_test_per_class, k * n_per_class, "test")
    return train, test


def make_cluster_task(centers, assignment, num_classes, n_per_cluster, n_test_per_cluster,
                      rng, task, spread=1.0, rotation=None, shift=None, row_offset=0):
    """Classes built as unions of Gaussian clusters: ``assignment[j]`` is the class of cluster ``j``."""
    centers = np.asarray(centers, dtype=np.float64)
    m, d = centers.shape
    if rotation is not None:
        centers = centers @ rotation.T
    if shift is not None:
        centers = centers + shift
    assignment = np.asarray(assignment)

    def draw(n, offset, split):
        cl = np.repeat(np.arange(m), n)
        x = centers[cl] + spread * rng.normal(size=(m * n, d))
        y = assignment[cl]
        return Dataset(x, y, num_classes, task, split, np.arange(offset, offset + m * n),
                       {"generator": "clusters", "clusters": m})

    train = draw(n_per_cluster, row_offset, "train")
    test = draw(n_test_per_cluster, row_offset + m * n_per_cluster, "test")
    return train, test


def _balanced_assignment(rng, m, k):
    labels = np.arange(m) % k
    return rng.permutation(labels)


def _coarsened_assignment(rng, fine, k, relabel):
    """Group the fine classes into ``k`` coarse ones, then relabel a fraction of clusters at random."""
    fine_to_coarse = _balanced_assignment(rng, int(fine.max()) + 1, k)
    out = fine_to_coarse[fine].copy()
    n_moved = int(round(relabel * len(out)))
    moved = rng.choice(len(out), size=n_moved, replace=False)
    out[moved] = rng.integers(0, k, size=n_moved)
    return out


def _small_rotation(rng, d, angle):
    a = rng.normal(size=(d, d))
    a = (a - a.T) / 2
    a *= angle / max(np.linalg.norm(a, 2), 1e-12)
    # exp of a skew-symmetric matrix is a rotation
    return expm(a)


@dataclass
class BenchmarkSpec:
    """Parameters of the desk-scale source/target/piggyback family."""

    dim: int = 16
    clusters: int = 40
    center_scale: float = 0.9
    spread: float = 1.0
    source_classes: int = 10
    target_classes: int = 5
    piggyback_classes: int = 5
    source_per_cluster: int = 50
    target_per_cluster: int = 50
    piggyback_per_cluster: int = 50
    test_per_cluster: int = 25
    target_gamma: float = 0.02
    rotation: float = 0.3
    shift: float = 0.5
    relabel: float = 0.0
    seed: int = 0


def make_transfer_benchmark(spec: BenchmarkSpec):
    """Source, target and piggyback tasks over one bank of latent clusters.

    The source labels group the clusters into classes; the target and
    piggyback tasks merge source classes into coarser ones, move a
    ``relabel`` fraction of clusters to random classes, and see the cluster
    geometry slightly rotated and shifted. Features learned on the source
    therefore transfer, while the target train split is subsampled to
    ``target_gamma``.
    """
    rng = np.random.default_rng(spec.seed)
    centers = spec.center_scale * rng.normal(size=(spec.clusters, spec.dim))
    src_assign = _balanced_assignment(rng, spec.clusters, spec.source_classes)
    tgt_assign = _coarsened_assignment(rng, src_assign, spec.target_classes, spec.relabel)
    pb_assign = _coarsened_assignment(rng, src_assign, spec.piggyback_classes, spec.relabel)
    rot_t = _small_rotation(rng, spec.dim, spec.rotation)
    shift_t = spec.shift * rng.normal(size=spec.dim) / math.sqrt(spec.dim)
    rot_p = _small_rotation(rng, spec.dim, spec.rotation)
    shift_p = spec.shift * rng.normal(size=spec.dim) / math.sqrt(spec.dim)

    src_train, src_test = make_cluster_task(
        centers, src_assign, spec.source_classes, spec.source_per_cluster, spec.test_per_cluster,
        rng, "source", spec.spread, row_offset=0)
    tgt_train, tgt_test = make_cluster_task(
        centers, tgt_assign, spec.target_classes, spec.target_per_cluster, spec.test_per_cluster,
        rng, "target", spec.spread, rot_t, shift_t, row_offset=10**6)
    pb_train, pb_test = make_cluster_task(
        centers, pb_assign, spec.piggyback_classes, spec.piggyback_per_cluster, spec.test_per_cluster,
        rng, "piggyback", spec.spread, rot_p, shift_p, row_offset=2 * 10**6)
    tgt_small = subsample(tgt_train, spec.target_gamma, seed=spec.seed)
    return {
        "source_train": src_train, "source_test": src_test,
        "target_train": tgt_small, "target_test": tgt_test,
        "piggyback_train": pb_train, "piggyback_test": pb_test,
    }


def subsample(ds: Dataset, gamma, seed) -> Dataset:
    """Class-balanced random subset keeping floor or ceil of ``gamma * n_c`` per class."""
    if not 0.0 < gamma <= 1.0:
        raise ContractError(f"subsample ratio must be in (0, 1], got {gamma}")
    rng = np.random.default_rng(seed)
    counts = ds.class_counts()
    exact = gamma * counts
    keep = np.floor(exact + 1e-9).astype(int)
    extra = int(round(gamma * len(ds))) - int(keep.sum())
    if extra > 0:
        frac = exact - keep
        # largest fractional parts first, ties in a seeded order
        order = sorted(range(ds.num_classes), key=lambda c: (-round(frac[c], 12), rng.random()))
        for c in order[:extra]:
            if keep[c] < counts[c]:
                keep[c] += 1
    present = counts > 0
    if np.any(keep[present] < 1):
        raise ContractError(f"ratio {gamma} leaves a class with no samples")
    chosen = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.y == c)
        if keep[c]:
            chosen.append(rng.choice(members, size=keep[c], replace=False))
    idx = np.sort(np.concatenate(chosen))
    return ds.subset(idx, gamma=gamma * ds.provenance.get("gamma", 1.0))


def batches(ds: Dataset, batch_size, seed, epoch, drop_last=False) -> Iterator[Batch]:
    """Seeded shuffle per (seed, epoch); the short tail is dropped when ``drop_last``."""
    if batch_size <= 0:
        raise ContractError("batch size must be positive")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        yield Batch(ds.x[idx], ds.y[idx], idx)


@dataclass
class CsvStats:
    mean: np.ndarray
    std: np.ndarray
    label_map: dict


def load_csv(path, stats: CsvStats | None = None, task="csv", split=None):
    """Numeric CSV with the integer label in the last column.

    Features are standardised with ``stats`` when given (use the train
    split's stats for the test split), otherwise with this file's own
    statistics. Labels are remapped to 0..k-1; the map is kept in
    ``provenance["label_map"]``. Returns ``(dataset, stats)``.
    """
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            if width is None and not _numeric(rec[0]):
                continue  # header line
            if width is None:
                width = len(rec)
            if len(rec) != width:
                raise ParseError(f"expected {width} fields, found {len(rec)}", lineno)
            try:
                feats = [float(f) for f in rec[:-1]]
                label = float(rec[-1])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if label != int(label):
                raise ParseError(f"label {rec[-1]!r} is not an integer", lineno)
            rows.append(feats)
            labels.append(int(label))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    x = np.array(rows, dtype=np.float64)
    raw = np.array(labels, dtype=np.int64)
    own_stats = stats is None
    if own_stats:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std[std == 0] = 1.0
        label_map = {int(v): i for i, v in enumerate(np.unique(raw))}
        stats = CsvStats(mean, std, label_map)
    unknown = set(np.unique(raw).tolist()) - set(stats.label_map)
    if unknown:
        raise ParseError(f"labels {sorted(unknown)} not present in the training split")
    y = np.array([stats.label_map[int(v)] for v in raw], dtype=np.int64)
    prov = {"path": str(path), "raw": x, "label_map": dict(stats.label_map)}
    ds = Dataset((x - stats.mean) / stats.std, y, len(stats.label_map), task,
                 split or ("train" if own_stats else "test"), provenance=prov)
    return ds, stats


def _numeric(s):
    try:
        float(s)
    except ValueError:
        return False
    return True
