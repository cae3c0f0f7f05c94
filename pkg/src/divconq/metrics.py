"""Retrieval, clustering and embedding-geometry metrics."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

CHUNK = 1024


class MetricWarning(UserWarning):
    pass


def _check(embeddings, labels=None):
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    if labels is None:
        return E
    labels = np.asarray(labels)
    if labels.shape != (len(E),):
        raise ValueError("need one label per embedding")
    return E, labels


def _sq_dist_rows(Q, G):
    d = (Q ** 2).sum(1)[:, None] - 2.0 * Q @ G.T + (G ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def ranked_neighbors(queries, gallery=None, depth=None, chunk=CHUNK):
    """Gallery indices sorted by distance for every query.

    Without a separate gallery the pool is ``queries`` itself and each
    query's own row is excluded.  Ties are broken by gallery index.  Only
    the first ``depth`` neighbours are returned (all when None).
    """
    Q = np.asarray(queries, dtype=np.float64)
    self_pool = gallery is None
    G = Q if self_pool else np.asarray(gallery, dtype=np.float64)
    n_avail = len(G) - 1 if self_pool else len(G)
    depth = n_avail if depth is None else min(depth, n_avail)
    out = np.empty((len(Q), depth), dtype=np.int64)
    for s in range(0, len(Q), chunk):
        D = _sq_dist_rows(Q[s:s + chunk], G)
        if self_pool:
            rows = np.arange(len(D))
            D[rows, s + rows] = np.inf
        out[s:s + chunk] = np.argsort(D, axis=1, kind="stable")[:, :depth]
    return out


def recall_at_k(embeddings, labels, k=1, gallery=None, gallery_labels=None):
    """Fraction of queries with a same-class item among their k nearest
    neighbours (self excluded in the single-pool protocol)."""
    E, labels = _check(embeddings, labels)
    if gallery is None:
        if k >= len(E):
            raise ValueError(f"k={k} needs more than {len(E)} samples")
        ref = labels
    else:
        ref = np.asarray(gallery_labels)
        if k > len(ref):
            raise ValueError(f"k={k} exceeds gallery size {len(ref)}")
    nn = ranked_neighbors(E, gallery, depth=k)
    return float(np.mean(np.any(ref[nn] == labels[:, None], axis=1)))


def recall_curve(embeddings, labels, ks=(1, 2, 4, 8)) -> dict[int, float]:
    E, labels = _check(embeddings, labels)
    ks = [k for k in ks if k < len(E)]
    if not ks:
        return {}
    nn = ranked_neighbors(E, depth=max(ks))
    hits = labels[nn] == labels[:, None]
    return {k: float(np.mean(hits[:, :k].any(axis=1))) for k in ks}


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    """Normalised mutual information 2 I(A;B) / (H(A) + H(B)), natural log.

    Two single-cluster partitions score 1.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("partitions have different lengths")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    h_a = _entropy(table.sum(1))
    h_b = _entropy(table.sum(0))
    if h_a + h_b == 0.0:
        return 1.0
    n = table.sum()
    pa = table.sum(1, keepdims=True) / n
    pb = table.sum(0, keepdims=True) / n
    pab = table / n
    nz = pab > 0
    mi = float((pab[nz] * np.log(pab[nz] / (pa @ pb)[nz])).sum())
    return float(min(max(2.0 * mi / (h_a + h_b), 0.0), 1.0))


def marp(embeddings, labels) -> float:
    """Mean average R-precision.

    For a query of a class with c members, R = c - 1; the score is
    ``(1/R) * sum_{i<=R} precision@i * [item i relevant]``.  Queries from
    singleton classes are skipped.
    """
    E, labels = _check(embeddings, labels)
    _, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    R = counts[inv] - 1
    valid = R > 0
    if not valid.all():
        warnings.warn(f"{int((~valid).sum())} queries from singleton classes "
                      "excluded from mARP", MetricWarning, stacklevel=2)
    if not valid.any():
        raise ValueError("mARP needs at least one class with two samples")
    nn = ranked_neighbors(E, depth=int(R.max()))
    scores = []
    for q in np.flatnonzero(valid):
        r = R[q]
        rel = labels[nn[q, :r]] == labels[q]
        prec = np.cumsum(rel) / np.arange(1, r + 1)
        scores.append(float((prec * rel).sum() / r))
    return float(np.mean(scores))


def effective_dimensionality(embeddings, coverage=0.95) -> int:
    """Smallest number of principal components whose eigenvalues cover
    ``coverage`` of the total variance."""
    E = _check(embeddings)
    if len(E) < 2:
        raise ValueError("need at least two samples")
    cov = np.cov(E, rowvar=False).reshape(E.shape[1], E.shape[1])
    ev = np.linalg.eigvalsh(cov)[::-1]
    ev = np.where(ev > ev[0] * len(ev) * np.finfo(float).eps, ev, 0.0)
    cum = np.cumsum(ev)
    if cum[-1] <= 0.0:
        warnings.warn("zero total variance; effective dimensionality set to 1",
                      MetricWarning, stacklevel=2)
        return 1
    return int(np.searchsorted(cum / cum[-1], coverage - 1e-12) + 1)


def ed_knn(embeddings, k=10, chunk=CHUNK) -> float:
    """Mean over samples of the mean distance to their k nearest neighbours."""
    E = _check(embeddings)
    if k >= len(E):
        raise ValueError(f"k={k} needs more than {len(E)} samples")
    sq = (E ** 2).sum(1)
    total = 0.0
    for s in range(0, len(E), chunk):
        D = sq[s:s + chunk, None] - 2.0 * E[s:s + chunk] @ E.T + sq[None, :]
        rows = np.arange(len(D))
        D[rows, s + rows] = np.inf
        part = np.partition(D, k - 1, axis=1)[:, :k]
        total += float(np.sqrt(np.maximum(part, 0.0)).mean(axis=1).sum())
    return total / len(E)


def class_variance_stats(embeddings, labels):
    """(intra-class variance, inter-class variance, nearest-neighbour ratio).

    Intra: mean over classes of the mean squared distance to the class
    centroid.  Inter: mean squared distance of class centroids to their
    mean.  Ratio: mean over samples of distance to the nearest same-class
    sample divided by distance to the nearest other-class sample.
    """
    E, labels = _check(embeddings, labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    cents = np.array([E[labels == c].mean(0) for c in classes])
    intra = float(np.mean([((E[labels == c] - m) ** 2).sum(1).mean()
                           for c, m in zip(classes, cents)]))
    inter = float(((cents - cents.mean(0)) ** 2).sum(1).mean())
    ratios = []
    for s in range(0, len(E), CHUNK):
        D = np.sqrt(_sq_dist_rows(E[s:s + CHUNK], E))
        rows = np.arange(len(D))
        D[rows, s + rows] = np.inf
        same = labels[s:s + CHUNK, None] == labels[None, :]
        d_pos = np.where(same, D, np.inf).min(1)
        d_neg = np.where(~same, D, np.inf).min(1)
        ok = np.isfinite(d_pos) & (d_neg > 0)
        ratios.append(d_pos[ok] / d_neg[ok])
    ratios = np.concatenate(ratios)
    if len(ratios) == 0:
        raise ValueError("no sample has both a same-class and another-class "
                         "neighbour")
    return intra, inter, float(ratios.mean())


def pca_project(embeddings, n_components=2):
    """Coordinates on the top principal components (centred data)."""
    E = _check(embeddings)
    Xc = E - E.mean(0)
    cov = Xc.T @ Xc / max(len(E) - 1, 1)
    ev, vecs = np.linalg.eigh(cov)
    order = np.argsort(ev)[::-1][:n_components]
    V = vecs[:, order]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])])
    return Xc @ (V * np.where(signs == 0, 1.0, signs))


@dataclass
class MetricsReport:
    recall_at: dict = field(default_factory=dict)
    nmi: float = float("nan")
    marp: float = float("nan")
    effective_dim: int = 0
    ed_k: float = float("nan")
    ed_1: float = float("nan")
    intra_var: float = float("nan")
    inter_var: float = float("nan")
    nn_ratio: float = float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall_at"] = {str(k): v for k, v in sorted(self.recall_at.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self) -> dict:
        row = {f"recall@{k}": v for k, v in sorted(self.recall_at.items())}
        for name in ("nmi", "marp", "effective_dim", "ed_k", "ed_1",
                     "intra_var", "inter_var", "nn_ratio"):
            row[name] = getattr(self, name)
        return row


def evaluate(embeddings, labels, ks=(1, 2, 4, 8), ed_neighbors=10,
             seed=0) -> MetricsReport:
    """Full metric suite for one embedding matrix.

    NMI compares ground-truth classes to k-means clusters (k = number of
    classes) computed in the embedding space.
    """
    from .partition import kmeans

    E, labels = _check(embeddings, labels)
    n_classes = len(np.unique(labels))
    clusters = kmeans(E, n_classes, seed=seed).assignment
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        intra, inter, ratio = class_variance_stats(E, labels)
        return MetricsReport(
            recall_at=recall_curve(E, labels, ks),
            nmi=nmi(labels, clusters),
            marp=marp(E, labels),
            effective_dim=effective_dimensionality(E),
            ed_k=ed_knn(E, min(ed_neighbors, len(E) - 1)),
            ed_1=ed_knn(E, 1),
            intra_var=intra, inter_var=inter, nn_ratio=ratio,
        )
