"""Vietoris-Rips persistent homology for small point clouds.

Connected components (dimension 0) are tracked with a union-find over the
edges in filtration order; loops (dimension 1) come from GF(2) column
reduction of the triangle boundary matrix.  A brute-force Betti-number
oracle over explicit boundary matrices is included for cross-checking the
incremental engine on small inputs.
"""

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DataError
from .jsonutil import dumps_canonical

## The engine reduces a matrix with one column per triangle, so cost grows
## like N^3; the oracle enumerates one dimension higher still.  Both caps are
## safety guards, not tunables.
ENGINE_POINT_CAP = 512
ORACLE_POINT_CAP = 64


@dataclass(frozen=True, order=True)
class Bar:
    """One persistence interval; death is math.inf for classes still alive
    at the threshold cap."""

    dim: int
    birth: float
    death: float

    @property
    def persistence(self):
        return self.death - self.birth


@dataclass(frozen=True)
class PersistenceDiagram:
    """All bars of a filtration up to its threshold cap, sorted by
    (dim, birth, death).  Zero-persistence bars are never stored."""

    bars: tuple
    threshold_cap: float

    def in_dim(self, dim):
        return [b for b in self.bars if b.dim == dim]

    def alive(self, t, dim):
        """Number of dim-classes alive at threshold t (birth <= t < death)."""
        return sum(1 for b in self.bars if b.dim == dim and b.birth <= t < b.death)

    def to_json(self):
        payload = {
            "threshold_cap": float(self.threshold_cap),
            "bars": [
                {
                    "dim": b.dim,
                    "birth": float(b.birth),
                    "death": None if math.isinf(b.death) else float(b.death),
                }
                for b in self.bars
            ],
        }
        return dumps_canonical(payload)

    @classmethod
    def from_json(cls, text):
        import json

        try:
            payload = json.loads(text)
            bars = tuple(
                Bar(int(b["dim"]), float(b["birth"]),
                    math.inf if b["death"] is None else float(b["death"]))
                for b in payload["bars"]
            )
            return cls(bars, float(payload["threshold_cap"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError("malformed persistence diagram JSON: %s" % exc) from exc


@dataclass(frozen=True)
class BettiVector:
    """Betti numbers of one Rips complex at a fixed threshold.  b2 is only
    populated by the brute-force oracle when asked for dimension 2."""

    b0: int
    b1: int
    b2: int
    threshold: float


class _UnionFind:
    """Union-find with path compression; union keeps the smaller root so
    merges are deterministic."""

    def __init__(self, n):
        self.parent = list(range(n))
        self.n_components = n

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        """Merge the components of a and b; returns False if already one."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.n_components -= 1
        return True


def validate_point_cloud(points):
    """Coerce to a float64 (N, D) array; reject empty or non-finite input."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError("point cloud must be 2-D (rows = points), got ndim=%d" % arr.ndim)
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError("point cloud must have at least one point and one coordinate")
    bad = np.flatnonzero(~np.isfinite(arr).all(axis=1))
    if bad.size:
        raise DataError("non-finite coordinate in point cloud row %d" % bad[0])
    return arr


def validate_distance_matrix(dm):
    """Coerce to float64 and enforce the metric-matrix contract: square,
    finite, exactly symmetric, zero diagonal, non-negative entries."""
    d = np.asarray(dm, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DataError("distance matrix must be square, got shape %s" % (d.shape,))
    if not np.isfinite(d).all():
        raise DataError("distance matrix contains non-finite entries")
    if not np.array_equal(d, d.T):
        raise DataError("distance matrix is asymmetric")
    if np.any(np.diag(d) != 0.0):
        raise DataError("distance matrix has a nonzero diagonal entry")
    if np.any(d < 0.0):
        raise DataError("distance matrix has a negative entry")
    return d


def pairwise_distances(points, metric="euclidean"):
    """Euclidean distance matrix of a point cloud.

    The upper triangle is computed once and mirrored, so the result is
    exactly symmetric with an exactly zero diagonal.
    """
    if metric != "euclidean":
        raise DataError("unsupported metric %r" % (metric,))
    x = validate_point_cloud(points)
    n = x.shape[0]
    d = np.zeros((n, n), dtype=np.float64)
    for i in range(n - 1):
        diff = x[i + 1:] - x[i]
        d[i, i + 1:] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return d + d.T


def enclosing_radius(dm):
    """min over points of the distance to their farthest peer.

    At this scale every simplex can be coned off onto the minimizing point,
    so the complex is contractible and nothing in dimension >= 1 survives.
    """
    d = validate_distance_matrix(dm)
    if d.shape[0] == 1:
        return 0.0
    return float(np.min(np.max(d, axis=1)))


def _sorted_edges(d, cap):
    """Edges with length <= cap, sorted by (length, min vertex, max vertex).

    Returns (i, j, length) arrays aligned on the global edge index used as
    the row index of the triangle boundary matrix.
    """
    n = d.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    lengths = d[iu, ju]
    keep = lengths <= cap
    iu, ju, lengths = iu[keep], ju[keep], lengths[keep]
    order = np.lexsort((ju, iu, lengths))
    return iu[order], ju[order], lengths[order]


def _sorted_triangles(d, cap):
    """Triangles with diameter <= cap, sorted by (diameter, vertex triple)."""
    n = d.shape[0]
    parts = []
    for i in range(n - 2):
        jj, kk = np.triu_indices(n - i - 1, k=1)
        jj = jj + i + 1
        kk = kk + i + 1
        diam = np.maximum(d[i, jj], np.maximum(d[i, kk], d[jj, kk]))
        keep = diam <= cap
        if np.any(keep):
            ii = np.full(int(keep.sum()), i, dtype=jj.dtype)
            parts.append((ii, jj[keep], kk[keep], diam[keep]))
    if not parts:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty, np.empty(0, dtype=np.float64)
    ti = np.concatenate([p[0] for p in parts])
    tj = np.concatenate([p[1] for p in parts])
    tk = np.concatenate([p[2] for p in parts])
    td = np.concatenate([p[3] for p in parts])
    order = np.lexsort((tk, tj, ti, td))
    return ti[order], tj[order], tk[order], td[order]


def rips_persistence(dm, max_dim=1, threshold_cap=None):
    """Persistence bars of the Rips filtration of a distance matrix.

    Dimension 0 comes from a union-find sweep over the sorted edges; each
    merge closes one component born at 0, survivors stay open (death inf).
    Dimension 1 reduces the triangle boundary matrix over GF(2): rows of
    edges that merged components are dropped up front (they can never be
    pivots), each reduced non-zero column pairs a cycle-creating edge with
    the triangle that fills it, and edges never claimed stay open.
    Zero-persistence pairs are dropped.  When threshold_cap is omitted it
    defaults to the enclosing radius, past which nothing new can survive.
    """
    d = validate_distance_matrix(dm)
    n = d.shape[0]
    if n > ENGINE_POINT_CAP:
        raise DataError(
            "point count %d exceeds the engine cap of %d (cost grows like N^3)"
            % (n, ENGINE_POINT_CAP)
        )
    if max_dim not in (0, 1):
        raise DataError("engine computes dimensions 0 and 1 only, got max_dim=%d" % max_dim)
    if threshold_cap is None:
        cap = enclosing_radius(d)
    else:
        cap = float(threshold_cap)
        if not math.isfinite(cap) or cap < 0.0:
            raise DataError("threshold_cap must be finite and >= 0, got %r" % threshold_cap)

    ei, ej, elen = _sorted_edges(d, cap)
    uf = _UnionFind(n)
    bars = []
    positive = np.zeros(len(elen), dtype=bool)
    for e in range(len(elen)):
        if uf.union(int(ei[e]), int(ej[e])):
            if elen[e] > 0.0:
                bars.append(Bar(0, 0.0, float(elen[e])))
        else:
            positive[e] = True
    bars.extend(Bar(0, 0.0, math.inf) for _ in range(uf.n_components))

    if max_dim >= 1 and n >= 3 and positive.any():
        edge_id = np.full((n, n), -1, dtype=np.int64)
        edge_id[ei, ej] = np.arange(len(elen))
        edge_id[ej, ei] = edge_id[ei, ej]
        ti, tj, tk, td = _sorted_triangles(d, cap)
        pivot = {}
        for t in range(len(td)):
            a, b, c = int(ti[t]), int(tj[t]), int(tk[t])
            col = 0
            for e in (edge_id[a, b], edge_id[a, c], edge_id[b, c]):
                if positive[e]:
                    col |= 1 << int(e)
            while col:
                low = col.bit_length() - 1
                other = pivot.get(low)
                if other is None:
                    pivot[low] = col
                    if td[t] > elen[low]:
                        bars.append(Bar(1, float(elen[low]), float(td[t])))
                    break
                col ^= other
        for e in np.flatnonzero(positive):
            if int(e) not in pivot:
                bars.append(Bar(1, float(elen[e]), math.inf))

    bars.sort()
    return PersistenceDiagram(tuple(bars), cap)


def _rank_gf2(columns):
    """Rank of a GF(2) matrix given as an iterable of int bitmask columns."""
    pivot = {}
    rank = 0
    for col in columns:
        while col:
            low = col.bit_length() - 1
            other = pivot.get(low)
            if other is None:
                pivot[low] = col
                rank += 1
                break
            col ^= other
    return rank


def betti_at_threshold(dm, threshold, max_dim=1):
    """Brute-force Betti numbers of one Rips complex at a fixed threshold.

    Enumerates every simplex up to dimension max_dim + 1 whose diameter is
    at most the threshold and takes GF(2) boundary ranks directly, so
    b_k = (#k-simplices) - rank d_k - rank d_(k+1).  Deliberately simple and
    independent of the incremental engine; capped at 64 points.
    """
    d = validate_distance_matrix(dm)
    n = d.shape[0]
    if n > ORACLE_POINT_CAP:
        raise DataError(
            "point count %d exceeds the oracle cap of %d points" % (n, ORACLE_POINT_CAP)
        )
    if max_dim not in (0, 1, 2):
        raise DataError("oracle computes dimensions 0..2 only, got max_dim=%d" % max_dim)
    t = float(threshold)
    if not math.isfinite(t) or t < 0.0:
        raise DataError("threshold must be finite and >= 0, got %r" % threshold)

    edges = [(i, j) for i, j in combinations(range(n), 2) if d[i, j] <= t]
    edge_ix = {e: k for k, e in enumerate(edges)}
    r1 = _rank_gf2((1 << i) | (1 << j) for i, j in edges)

    triangles = [
        (i, j, k)
        for i, j, k in combinations(range(n), 3)
        if max(d[i, j], d[i, k], d[j, k]) <= t
    ]
    r2 = _rank_gf2(
        (1 << edge_ix[(i, j)]) | (1 << edge_ix[(i, k)]) | (1 << edge_ix[(j, k)])
        for i, j, k in triangles
    )

    b0 = n - r1
    b1 = len(edges) - r1 - r2
    b2 = 0
    if max_dim == 2:
        tri_ix = {s: k for k, s in enumerate(triangles)}
        r3 = _rank_gf2(
            (1 << tri_ix[(i, j, k)])
            | (1 << tri_ix[(i, j, l)])
            | (1 << tri_ix[(i, k, l)])
            | (1 << tri_ix[(j, k, l)])
            for i, j, k, l in combinations(range(n), 4)
            if max(d[i, j], d[i, k], d[i, l], d[j, k], d[j, l], d[k, l]) <= t
        )
        b2 = len(triangles) - r2 - r3
    return BettiVector(b0, b1, b2, t)


def count_b1(diagram, tau=0.0):
    """Count dimension-1 bars at least as persistent as tau times the scale.

    The scale is the largest finite dimension-1 death in the diagram (the
    threshold cap when every loop is still open); open bars are measured as
    if they died at the cap.  tau = 0 counts every loop.
    """
    tau = float(tau)
    if not 0.0 <= tau <= 1.0:
        raise DataError("tau must lie in [0, 1], got %r" % tau)
    cap = diagram.threshold_cap
    loops = diagram.in_dim(1)
    finite_deaths = [b.death for b in loops if math.isfinite(b.death)]
    scale = max(finite_deaths) if finite_deaths else cap
    cutoff = tau * scale
    count = 0
    for b in loops:
        death = b.death if math.isfinite(b.death) else cap
        if death - b.birth >= cutoff:
            count += 1
    return count
