"""Minimum-variance clustering, bisecting division and cluster matching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .metrics import nmi

MAX_ITER = 100


class PartitionError(ValueError):
    pass


@dataclass
class Partition:
    """Assignment of every sample to exactly one of ``k`` clusters.

    ``lineage[c]`` is the index of cluster c's parent at the previous depth
    (-1 at the root or when the partition was not produced by bisection).
    ``empty`` flags clusters created empty by bisecting a singleton.
    """

    assignment: np.ndarray
    k: int
    depth: int = 0
    lineage: np.ndarray | None = None
    empty: np.ndarray | None = None
    objective: float | None = None

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.k = int(self.k)
        if self.lineage is None:
            self.lineage = np.full(self.k, -1, dtype=np.int64)
        self.lineage = np.asarray(self.lineage, dtype=np.int64)
        if self.empty is None:
            self.empty = np.zeros(self.k, dtype=bool)
        self.empty = np.asarray(self.empty, dtype=bool)
        self.validate()

    def validate(self):
        a = self.assignment
        if a.ndim != 1:
            raise PartitionError("assignment must be 1-D")
        if len(a) and (a.min() < 0 or a.max() >= self.k):
            raise PartitionError("cluster index out of range")
        if self.lineage.shape != (self.k,) or self.empty.shape != (self.k,):
            raise PartitionError("lineage/empty flags must have k entries")

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == c)

    def to_dict(self) -> dict:
        return {"k": self.k, "depth": self.depth,
                "assignment": self.assignment.tolist(),
                "lineage": self.lineage.tolist(),
                "empty": self.empty.astype(int).tolist()}

    @classmethod
    def from_dict(cls, data) -> "Partition":
        return cls(np.array(data["assignment"]), data["k"], data["depth"],
                   np.array(data["lineage"]),
                   np.array(data.get("empty", [0] * data["k"]), dtype=bool))


def kmeans_objective(points, assignment) -> float:
    """Sum of squared distances to cluster means, i.e. sum_i |C_i| Var(C_i)."""
    X = np.asarray(points, dtype=np.float64)
    assignment = np.asarray(assignment)
    total = 0.0
    for c in np.unique(assignment):
        P = X[assignment == c]
        total += float(((P - P.mean(axis=0)) ** 2).sum())
    return total


def _sq_dists(X, C):
    d = (X ** 2).sum(1)[:, None] - 2.0 * X @ C.T + (C ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _seed_centers(X, k, rng):
    """k-means++ seeding: first center uniform, then D^2-weighted draws."""
    n = len(X)
    centers = [X[rng.integers(n)]]
    closest = _sq_dists(X, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dists(X, X[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(X, k, rng, max_iter=MAX_ITER):
    C = _seed_centers(X, k, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        new = np.argmin(_sq_dists(X, C), axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # move the point farthest from its own centroid into the empty cluster
            d_own = ((X - C[new]) ** 2).sum(1)
            d_own[counts[new] <= 1] = -1.0
            far = int(np.argmax(d_own))
            counts[new[far]] -= 1
            new[far] = c
            counts[c] = 1
            C[c] = X[far]
        C = np.array([X[new == c].mean(axis=0) for c in range(k)])
        history.append(kmeans_objective(X, new))
        if labels is not None and np.array_equal(new, labels):
            labels = new
            break
        labels = new
    return labels, C, history


def _hartigan(X, labels, k, max_sweeps=MAX_ITER):
    """Single-point moves that lower the objective, accounting for the shift
    of both centroids.  Escapes Lloyd fixed points that are not local optima
    under point transfers."""
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    C = np.array([X[labels == c].mean(axis=0) for c in range(k)])
    for _ in range(max_sweeps):
        moved = False
        for i in range(len(X)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d = ((C - X[i]) ** 2).sum(1)
            cost = counts / (counts + 1.0) * d
            cost[a] = counts[a] / (counts[a] - 1.0) * d[a]
            b = int(np.argmin(cost))
            if b != a and cost[b] < cost[a] * (1.0 - 1e-12):
                C[a] = (C[a] * counts[a] - X[i]) / (counts[a] - 1.0)
                C[b] = (C[b] * counts[b] + X[i]) / (counts[b] + 1.0)
                counts[a] -= 1.0
                counts[b] += 1.0
                labels[i] = b
                moved = True
        if not moved:
            break
    return labels


def kmeans(points, k: int, seed=0, n_init: int = 1, max_iter: int = MAX_ITER,
           depth: int = 0, return_history: bool = False, refine: bool = True):
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts.

    With ``refine`` each restart ends with Hartigan point-transfer sweeps,
    which never increase the objective.

    Returns a ``Partition`` whose ``objective`` is the within-cluster sum of
    squares.  With ``return_history`` also returns the per-iteration
    objectives of the winning restart.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise PartitionError("points must be a 2-D array")
    if not np.all(np.isfinite(X)):
        raise PartitionError("points must be finite")
    if k < 1 or len(X) < k:
        raise PartitionError(f"cannot form {k} clusters from {len(X)} points")
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        labels, _, hist = _lloyd(X, k, rng, max_iter)
        if refine and k > 1:
            labels = _hartigan(X, labels, k, max_iter)
            hist.append(kmeans_objective(X, labels))
        if best is None or hist[-1] < best[1][-1]:
            best = (labels, hist)
    part = Partition(best[0], k, depth, objective=best[1][-1])
    return (part, best[1]) if return_history else part


def _two_way(X, rng):
    labels = kmeans(X, 2, seed=rng, n_init=3).assignment
    # the child holding the lowest-indexed member comes first
    if labels[0] == 1:
        labels = 1 - labels
    return labels


def bisect(partition: Partition, points, seed=0) -> Partition:
    """Split every cluster i into children 2i and 2i+1 with 2-means."""
    X = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return _bisect_with(partition, lambda idx: _two_way(X[idx], rng))


def random_bisect(partition: Partition, seed=0) -> Partition:
    """Split every cluster evenly at random (sizes differ by at most one)."""
    rng = np.random.default_rng(seed)

    def split(idx):
        labels = np.zeros(len(idx), dtype=np.int64)
        labels[rng.permutation(len(idx))[len(idx) // 2:]] = 1
        if labels[0] == 1:
            labels = 1 - labels
        return labels

    return _bisect_with(partition, split)


def _bisect_with(partition, splitter):
    k = partition.k
    new = np.empty_like(partition.assignment)
    empty = np.zeros(2 * k, dtype=bool)
    for i in range(k):
        idx = partition.members(i)
        if len(idx) >= 2:
            new[idx] = 2 * i + splitter(idx)
        else:
            new[idx] = 2 * i
            empty[2 * i + 1] = True
            empty[2 * i] = len(idx) == 0
    lineage = np.repeat(np.arange(k), 2)
    return Partition(new, 2 * k, partition.depth + 1, lineage, empty)


def iou_matrix(old: Partition, new: Partition) -> np.ndarray:
    """IoU between old cluster i and new cluster j."""
    if old.k != new.k:
        raise PartitionError(f"cluster counts differ: {old.k} vs {new.k}")
    if len(old.assignment) != len(new.assignment):
        raise PartitionError("partitions cover different sample counts")
    k = old.k
    inter = np.zeros((k, k))
    np.add.at(inter, (old.assignment, new.assignment), 1.0)
    union = old.sizes[:, None] + new.sizes[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def solve_assignment(scores) -> np.ndarray:
    """Permutation matrix maximising the total score.

    Among optimal permutations the lexicographically smallest one (by the
    column chosen for row 0, then row 1, ...) is returned.
    """
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise PartitionError("assignment needs a square score matrix")
    if not np.all(np.isfinite(S)):
        raise PartitionError("scores must be finite")
    k = len(S)

    def best_total(rows, cols):
        if not rows:
            return 0.0
        sub = S[np.ix_(rows, cols)]
        r, c = linear_sum_assignment(sub, maximize=True)
        return float(sub[r, c].sum())

    optimum = best_total(list(range(k)), list(range(k)))
    tol = 1e-9 * max(1.0, abs(optimum))
    perm = np.empty(k, dtype=np.int64)
    fixed = 0.0
    free_cols = list(range(k))
    for i in range(k):
        rest = list(range(i + 1, k))
        for j in free_cols:
            cols = [c for c in free_cols if c != j]
            if fixed + S[i, j] + best_total(rest, cols) >= optimum - tol:
                perm[i] = j
                fixed += S[i, j]
                free_cols = cols
                break
    A = np.zeros((k, k), dtype=np.int64)
    A[np.arange(k), perm] = 1
    return A


class Recluster(NamedTuple):
    partition: Partition
    consistency_nmi: float
    retained: float
    assignment_matrix: np.ndarray


def recluster_and_match(embeddings, old: Partition, seed=0) -> Recluster:
    """Fresh k-means with ``old.k`` clusters, relabelled so new cluster j
    takes the index of the old cluster it overlaps best (max total IoU)."""
    fresh = kmeans(embeddings, old.k, seed=seed, depth=old.depth)
    A = solve_assignment(iou_matrix(old, fresh))
    # A[i, j] = 1 maps fresh cluster j onto old index i
    relabel = np.argmax(A, axis=0)
    assignment = relabel[fresh.assignment]
    part = Partition(assignment, old.k, old.depth, old.lineage.copy(),
                     objective=fresh.objective)
    return Recluster(part, nmi(old.assignment, assignment),
                     float(np.mean(old.assignment == assignment)), A)


def label_grouping(labels, group_map: dict) -> Partition:
    """Static partition from a class -> group map."""
    labels = np.asarray(labels)
    missing = set(np.unique(labels).tolist()) - set(group_map)
    if missing:
        raise PartitionError(f"classes without a group: {sorted(missing)[:5]}")
    groups = sorted(set(group_map[int(c)] for c in np.unique(labels)))
    index = {g: i for i, g in enumerate(groups)}
    assignment = np.array([index[group_map[int(c)]] for c in labels])
    return Partition(assignment, len(groups), 0)
