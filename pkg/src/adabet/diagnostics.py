"""Qualitative cross-checks on activation pools.

Pools are projected to a few principal directions (deterministic power
iteration, no randomized solvers) and clustered with a from-scratch DBSCAN;
cluster counts can then be compared against loop counts layer by layer via
Spearman rank agreement.  Everything here is reported, never asserted: it
exists to let a human eyeball whether the topology scores track visible
structure.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .homology import pairwise_distances

_POWER_SEED = 0
_POWER_ITERS = 1000
_POWER_TOL = 1e-13

DEFAULT_MIN_PTS = 4
DEFAULT_EPS_FACTOR = 0.5


@dataclass(frozen=True)
class ClusterReport:
    """DBSCAN summary for one layer's (reduced) pool."""

    layer_index: int
    n_clusters: int
    n_noise: int
    eps: float
    min_pts: int

    def to_row(self):
        return {
            "layer": self.layer_index,
            "n_clusters": self.n_clusters,
            "n_noise": self.n_noise,
            "eps": float(self.eps),
            "min_pts": self.min_pts,
        }


def _power_components(sym, d, rng):
    """Top-d orthonormal eigenvectors of a symmetric PSD matrix by power
    iteration with deflation; zero vectors stand in for missing rank."""
    m = sym.shape[0]
    comps = np.zeros((d, m))
    scale = float(np.trace(sym))
    a = sym.copy()
    for c in range(d):
        if scale <= 0.0 or float(np.trace(a)) <= _POWER_TOL * max(scale, 1.0):
            break  # remaining spectrum is numerically zero; leave zeros
        v = rng.standard_normal(m)
        v /= np.linalg.norm(v)
        for _ in range(_POWER_ITERS):
            w = a @ v
            norm = np.linalg.norm(w)
            if norm <= _POWER_TOL * max(scale, 1.0):
                v = None
                break
            w /= norm
            if np.linalg.norm(w - v) < _POWER_TOL:
                v = w
                break
            v = w
        if v is None:
            break
        lam = float(v @ (a @ v))
        if lam <= _POWER_TOL * max(scale, 1.0):
            break
        comps[c] = v
        a = a - lam * np.outer(v, v)
    return comps


def pca_reduce(pool, d):
    """Project a pool onto its top-d principal directions.

    Rows are centered first.  Directions come from deterministic power
    iteration (fixed seed) on whichever of the covariance or Gram matrix is
    smaller; rank-deficient pools keep their available components and pad
    the rest with zero coordinates.  Returns a new pool with a (N, d)
    matrix; the input is untouched.
    """
    x = pool.matrix
    n, dim = x.shape
    if d < 1:
        raise DataError("target dimension must be >= 1, got %d" % d)
    if d > dim:
        raise DataError("target dimension %d exceeds pool dimension %d" % (d, dim))
    rng = np.random.default_rng(_POWER_SEED)
    xc = x - x.mean(axis=0)
    if dim <= n:
        comps = _power_components(xc.T @ xc, d, rng)  # (d, dim) rows
        directions = comps
    else:
        comps = _power_components(xc @ xc.T, d, rng)  # eigenvectors of Gram
        directions = np.zeros((d, dim))
        for c in range(d):
            w = xc.T @ comps[c]
            norm = np.linalg.norm(w)
            if norm > 0.0:
                directions[c] = w / norm
    reduced = xc @ directions.T
    return replace(pool, matrix=reduced)


def dbscan_labels(matrix, eps, min_pts):
    """Density clustering labels: -1 for noise, else cluster ids 0, 1, ...

    A point is core when at least min_pts points (itself included) lie
    within eps, inclusively.  Clusters grow from unlabeled core points in
    ascending row order, so border points join the first cluster that
    reaches them and the labeling is deterministic.
    """
    if eps < 0.0 or not np.isfinite(eps):
        raise DataError("eps must be finite and >= 0, got %r" % (eps,))
    if min_pts < 1:
        raise DataError("min_pts must be >= 1, got %r" % (min_pts,))
    d = pairwise_distances(matrix)
    neighbors = [np.flatnonzero(d[i] <= eps) for i in range(len(d))]
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    labels = np.full(len(d), -1, dtype=np.int64)
    cid = 0
    for i in range(len(d)):
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = cid
        queue = [i]
        while queue:
            p = queue.pop(0)
            for q in neighbors[p]:
                if labels[q] == -1:
                    labels[q] = cid
                    if core[q]:
                        queue.append(int(q))
        cid += 1
    return labels


def default_eps(matrix):
    """Half the median pairwise distance of the (reduced) pool."""
    d = pairwise_distances(matrix)
    n = len(d)
    if n < 2:
        return 0.0
    return DEFAULT_EPS_FACTOR * float(np.median(d[np.triu_indices(n, k=1)]))


def dbscan_count(pool, eps=None, min_pts=DEFAULT_MIN_PTS):
    """Cluster a pool and summarize the result.

    eps defaults to half the median pairwise distance of the pool.
    """
    if eps is None:
        eps = default_eps(pool.matrix)
    labels = dbscan_labels(pool.matrix, eps, min_pts)
    n_clusters = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    return ClusterReport(pool.layer_index, n_clusters, int((labels == -1).sum()),
                         float(eps), int(min_pts))


def _average_ranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = np.asarray(values)[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y):
    """Spearman rank correlation with average ranks for ties.

    Returns 0.0 when either input is constant (no ordering to agree with).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("spearman needs two equal-length 1-D sequences")
    if len(x) < 2:
        raise DataError("spearman needs at least two observations")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx = rx.std()
    sy = ry.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))
