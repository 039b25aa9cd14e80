"""Subject populations: synthesis, multi-site partitioning, folds and file codecs.

Tensors are held as float64 arrays of shape (n_subjects, R, R, V). The
binary population file (``MGT1``) is little-endian::

    b"MGT1" | u32 N | u32 R | u32 V | N*V*R*R float64

ordered subject-major, then view-major, then row-major.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.cluster import KMeans

from .exceptions import FormatError, ValidationError
from .validation import check_multigraphs, invariant_violation, upper_triangle

MAGIC = b"MGT1"


@dataclass
class Population:
    """An ordered set of subjects sharing (R, V), tagged with a class label.

    ``domain`` optionally records the generating mode of each subject.
    """

    tensors: np.ndarray
    label: str = ""
    domain: np.ndarray | None = None

    def __post_init__(self):
        self.tensors = check_multigraphs(self.tensors)
        if self.domain is not None:
            self.domain = np.asarray(self.domain, dtype=int)
            if self.domain.shape != (len(self.tensors),):
                raise ValidationError("domain must hold one entry per subject")

    def __len__(self):
        return self.tensors.shape[0]

    @property
    def r(self):
        return self.tensors.shape[1]

    @property
    def v(self):
        return self.tensors.shape[3]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        domain = None if self.domain is None else self.domain[indices]
        return Population(self.tensors[indices], self.label, domain)

    def concat(self, other):
        return Population(np.concatenate([self.tensors, other.tensors]), self.label)


# ---------------------------------------------------------------------------
# synthesis

@dataclass(frozen=True)
class SynthesisSpec:
    """Gaussian multi-mode population recipe.

    Each mode is ``(means, spreads)`` with one entry per view; a scalar
    spread applies to every view.
    """

    r: int = 16
    v: int = 3
    n_per_mode: int = 16
    modes: tuple = (
        ((0.30, 0.50, 0.70), 0.08),
        ((0.45, 0.65, 0.85), 0.08),
        ((0.60, 0.80, 1.00), 0.08),
    )
    seed: int = 0
    label: str = "synthetic"

    def __post_init__(self):
        if self.r < 2 or self.v < 1:
            raise ValidationError(f"need r >= 2 and v >= 1, got r={self.r}, v={self.v}")
        if self.n_per_mode < 1:
            raise ValidationError(f"n_per_mode must be >= 1, got {self.n_per_mode}")
        if not self.modes:
            raise ValidationError("at least one mode is required")
        for i, (means, spreads) in enumerate(self.resolved_modes()):
            if means.shape != (self.v,) or spreads.shape != (self.v,):
                raise ValidationError(f"mode {i}: expected {self.v} means and spreads")
            if np.any(spreads <= 0) or not np.all(np.isfinite(spreads)):
                raise ValidationError(f"mode {i}: spreads must be positive")

    def resolved_modes(self):
        out = []
        for means, spreads in self.modes:
            means = np.atleast_1d(np.asarray(means, dtype=float))
            spreads = np.broadcast_to(np.asarray(spreads, dtype=float), means.shape)
            out.append((means, np.array(spreads)))
        return out


def synthesize_population(spec):
    """Draw ``n_per_mode`` subjects from every mode of ``spec``.

    Upper-triangle weights of view ``v`` in mode ``m`` are i.i.d. normal
    with that mode's mean and spread; the matrix is mirrored, its diagonal
    zeroed and negatives clamped to 0.
    """
    rng = np.random.default_rng(spec.seed)
    r, v = spec.r, spec.v
    iu = np.triu_indices(r, k=1)
    subjects, domain = [], []
    for m, (means, spreads) in enumerate(spec.resolved_modes()):
        for _ in range(spec.n_per_mode):
            x = np.zeros((r, r, v))
            draws = rng.normal(means, spreads, size=(iu[0].size, v))
            x[iu[0], iu[1], :] = draws
            x = x + x.transpose(1, 0, 2)
            np.maximum(x, 0.0, out=x)
            subjects.append(x)
            domain.append(m)
    return Population(np.stack(subjects), spec.label, np.array(domain))


# ---------------------------------------------------------------------------
# multi-site partitioning

def subject_features(tensors):
    """Concatenated upper triangles of every view, one row per subject."""
    t = np.moveaxis(np.asarray(tensors), 3, 1)  # (n, V, R, R)
    return upper_triangle(t).reshape(t.shape[0], -1)


class BalancedKMeans(ClusterMixin, BaseEstimator):
    """k-means followed by greedy farthest-point rebalancing.

    After ordinary k-means, points are moved out of over-full clusters,
    farthest-from-centroid first, into the nearest cluster with spare room,
    until every cluster size is ``n // k`` or ``n // k + 1``. Labels are
    renumbered by first appearance so cluster 0 holds sample 0.
    """

    def __init__(self, n_clusters=3, n_init=50, max_iter=100, random_state=None):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        n, k = X.shape[0], self.n_clusters
        if k < 1 or k > n:
            raise ValidationError(f"n_clusters={k} must lie in [1, {n}]")
        if k == 1:
            labels = np.zeros(n, dtype=int)
            centers = X.mean(axis=0, keepdims=True)
        else:
            km = KMeans(k, n_init=self.n_init, max_iter=self.max_iter,
                        random_state=self.random_state).fit(X)
            centers = km.cluster_centers_
            labels = _rebalance(X, km.labels_.copy(), centers)
        order = list(dict.fromkeys(labels.tolist()))
        remap = np.empty(k, dtype=int)
        remap[order] = np.arange(len(order))
        self.labels_ = remap[labels]
        self.cluster_centers_ = centers[order]
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_


def _rebalance(X, labels, centers):
    n, k = X.shape[0], centers.shape[0]
    dist = np.linalg.norm(X[:, None, :] - centers[None], axis=2)
    sizes = np.bincount(labels, minlength=k)
    # the (n mod k) currently largest clusters may keep one extra point
    by_size = sorted(range(k), key=lambda c: (-sizes[c], c))
    cap = np.full(k, n // k)
    cap[by_size[: n % k]] += 1
    while np.any(sizes > cap):
        over = sizes > cap
        cand = np.nonzero(over[labels])[0]
        own = dist[cand, labels[cand]]
        i = cand[np.argmax(own)]
        room = np.nonzero(sizes < cap)[0]
        dest = room[np.argmin(dist[i, room])]
        sizes[labels[i]] -= 1
        sizes[dest] += 1
        labels[i] = dest
    return labels


@dataclass(frozen=True)
class SitePartition:
    assignments: np.ndarray
    k: int

    def members(self, site):
        return np.nonzero(self.assignments == site)[0]

    def sizes(self):
        return np.bincount(self.assignments, minlength=self.k)


def partition_sites(pop, k, seed=0):
    """Split a population into ``k`` balanced, feature-coherent sites."""
    n = len(pop)
    if not 1 <= k <= n:
        raise ValidationError(f"cannot split {n} subjects into k={k} sites")
    labels = BalancedKMeans(k, random_state=seed).fit_predict(subject_features(pop.tensors))
    return SitePartition(labels, k)


@dataclass(frozen=True)
class FoldSplit:
    """Per-site cross-validation parts; ``folds[site][part]`` are subject indices."""

    folds: tuple
    f: int

    def train(self, fold):
        """Training indices of every site for ``fold`` (all parts but one)."""
        return [np.sort(np.concatenate([p for j, p in enumerate(parts) if j != fold]))
                if self.f > 1 else np.sort(parts[0]) for parts in self.folds]

    def test(self, fold):
        return [np.sort(parts[fold]) for parts in self.folds]


def fold_split(partition, f, seed=0):
    """Shuffle each site (seeded) and deal its subjects round-robin into ``f`` parts."""
    if f < 1:
        raise ValidationError(f"fold count must be >= 1, got {f}")
    folds = []
    for site in range(partition.k):
        idx = partition.members(site)
        if idx.size < f:
            raise ValidationError(f"site {site} has {idx.size} subjects, fewer than f={f}")
        rng = np.random.default_rng([seed, site])
        idx = idx[rng.permutation(idx.size)]
        folds.append(tuple(idx[i::f] for i in range(f)))
    return FoldSplit(tuple(folds), f)


# ---------------------------------------------------------------------------
# codecs

def write_population(path, pop):
    t = np.ascontiguousarray(np.moveaxis(pop.tensors, 3, 1), dtype="<f8")  # (n, V, R, R)
    n, v, r, _ = t.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", n, r, v))
        fh.write(t.tobytes())


def read_population(path, label=""):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    n, r, v = struct.unpack("<III", raw[4:16])
    need = 8 * n * v * r * r
    have = len(raw) - 16
    if have < need:
        raise FormatError(
            f"{path}: truncated payload, header advertises N={n} (needs {need} bytes), found {have}"
        )
    if have > need:
        raise FormatError(f"{path}: {have - need} trailing bytes after payload")
    if n == 0:
        raise FormatError(f"{path}: population holds no subjects")
    t = np.frombuffer(raw, dtype="<f8", offset=16).reshape(n, v, r, r)
    tensors = np.moveaxis(t, 1, 3).astype(np.float64)
    bad = invariant_violation(tensors)
    if bad:
        raise FormatError(f"{path}: invariant violation: {bad}")
    return Population(tensors, label)


def read_csv_subjects(paths, label=""):
    """Build a population from CSV files, ``paths[subject][view]`` each R x R."""
    subjects = []
    for s, views in enumerate(paths):
        mats = []
        for vpath in views:
            m = np.loadtxt(vpath, delimiter=",", dtype=np.float64, ndmin=2)
            if m.shape[0] != m.shape[1]:
                raise FormatError(f"{vpath}: expected a square matrix, got {m.shape}")
            mats.append(m)
        if len({m.shape for m in mats}) != 1:
            raise FormatError(f"subject {s}: views disagree in size")
        subjects.append(np.stack(mats, axis=2))
    tensors = np.stack(subjects)
    bad = invariant_violation(tensors)
    if bad:
        raise FormatError(f"invariant violation: {bad}")
    return Population(tensors, label)
