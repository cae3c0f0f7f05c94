"""Metric-learning objectives and the mask orthogonality penalty.

Every loss takes a batch of embedding rows and returns the loss together
with its gradient wrt those rows.  Losses average over their tuples.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .embedder import normalize_rows

LOSS_KINDS = ("triplet", "margin", "npairs", "soft_triplet")
TRIPLET_CAP = 256


class DegenerateBatchWarning(UserWarning):
    pass


class DegenerateBatchError(ValueError):
    pass


@dataclass
class LossConfig:
    kind: str = "triplet"
    alpha: float = 0.2
    beta: float = 1.2
    learn_beta: bool = False
    triplet_cap: int = TRIPLET_CAP

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; "
                             f"choose from {LOSS_KINDS}")
        for name in ("alpha", "beta"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        if self.kind == "margin" and self.beta <= 0:
            raise ValueError("margin loss needs beta > 0")

    @property
    def uses_triplets(self) -> bool:
        return self.kind in ("triplet", "soft_triplet")


def masked_distance(e_i, e_j, mask) -> float:
    """Distance between two embeddings inside the subspace of ``mask``.

    Both rows are re-weighted by the ReLU-truncated mask and scaled to unit
    length before the Euclidean distance is taken.
    """
    e_i, e_j, mask = (np.asarray(a, dtype=np.float64) for a in (e_i, e_j, mask))
    if not (e_i.shape == e_j.shape == mask.shape):
        raise ValueError("embedding and mask lengths differ")
    m = np.maximum(mask, 0.0)
    u = normalize_rows(np.stack([e_i * m, e_j * m]))[0]
    return float(np.linalg.norm(u[0] - u[1]))


def all_triplets(labels) -> np.ndarray:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    a, p = np.nonzero(same)
    out = []
    for ai, pi in zip(a, p):
        negs = np.flatnonzero(labels != labels[ai])
        out.append(np.column_stack([np.full(len(negs), ai),
                                    np.full(len(negs), pi), negs]))
    if not out:
        return np.empty((0, 3), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def mine_triplets(labels, rng=None, cap: int = TRIPLET_CAP) -> np.ndarray:
    """All valid (anchor, positive, negative) index triples of a batch,
    subsampled uniformly to ``cap`` when there are more."""
    trips = all_triplets(labels)
    if cap and len(trips) > cap:
        if rng is None:
            raise ValueError("subsampling triplets needs an rng")
        keep = np.sort(rng.choice(len(trips), size=cap, replace=False))
        trips = trips[keep]
    return trips


def _triplet_terms(U, triplets):
    a, p, n = triplets.T
    d_ap = U[a] - U[p]
    d_an = U[a] - U[n]
    return a, p, n, d_ap, d_an, (d_ap ** 2).sum(1) - (d_an ** 2).sum(1)


def _scatter_triplet_grad(U, a, p, n, d_ap, d_an, w):
    # w[t] = dLoss/d(D2_ap - D2_an) for triplet t
    G = np.zeros_like(U)
    w = w[:, None]
    np.add.at(G, a, 2.0 * w * (d_ap - d_an))
    np.add.at(G, p, -2.0 * w * d_ap)
    np.add.at(G, n, 2.0 * w * d_an)
    return G


def _empty(U, what):
    warnings.warn(f"no valid {what} in batch; loss is zero",
                  DegenerateBatchWarning, stacklevel=3)
    return 0.0, np.zeros_like(U)


def triplet_loss(U, triplets, alpha=0.2):
    """Mean over triplets of ``[D_ap^2 - D_an^2 + alpha]_+``."""
    U = np.asarray(U, dtype=np.float64)
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if len(triplets) == 0:
        return _empty(U, "triplets")
    a, p, n, d_ap, d_an, diff = _triplet_terms(U, triplets)
    hinge = diff + alpha
    active = hinge > 0.0
    loss = float(np.where(active, hinge, 0.0).mean())
    w = active / len(triplets)
    return loss, _scatter_triplet_grad(U, a, p, n, d_ap, d_an, w)


def soft_triplet_loss(U, triplets):
    """Mean over triplets of ``log(1 + exp(D_ap^2 - D_an^2))``."""
    U = np.asarray(U, dtype=np.float64)
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if len(triplets) == 0:
        return _empty(U, "triplets")
    a, p, n, d_ap, d_an, diff = _triplet_terms(U, triplets)
    loss = float(np.logaddexp(0.0, diff).mean())
    w = expit(diff) / len(triplets)
    return loss, _scatter_triplet_grad(U, a, p, n, d_ap, d_an, w)


def margin_loss(U, labels, alpha=0.2, beta=1.2):
    """Mean over all batch pairs of ``[alpha + y (D - beta)]_+`` with y = +1
    for same-class pairs and -1 otherwise (plain, unsquared distance).

    Returns ``(loss, grad_U, grad_beta)``.
    """
    U = np.asarray(U, dtype=np.float64)
    labels = np.asarray(labels)
    if alpha <= 0 or beta <= 0:
        raise ValueError("margin loss needs alpha > 0 and beta > 0")
    i, j = np.triu_indices(len(U), k=1)
    if len(i) == 0:
        raise DegenerateBatchError("margin loss needs at least two samples")
    y = np.where(labels[i] == labels[j], 1.0, -1.0)
    diff = U[i] - U[j]
    D = np.sqrt((diff ** 2).sum(1))
    hinge = alpha + y * (D - beta)
    active = hinge > 0.0
    P = len(i)
    loss = float(np.where(active, hinge, 0.0).mean())
    coef = (active * y / np.maximum(D, 1e-12) / P)[:, None]
    G = np.zeros_like(U)
    np.add.at(G, i, coef * diff)
    np.add.at(G, j, -coef * diff)
    grad_beta = float(-(active * y).sum() / P)
    return loss, G, grad_beta


def npairs_loss(U, labels):
    """Multi-class N-pairs loss on dot-product similarities.

    For every ordered same-class pair (i, p) the term is
    ``log(1 + sum_n exp(u_i.u_n - u_i.u_p))`` over all other-class samples n.
    """
    U = np.asarray(U, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise DegenerateBatchError("N-pairs loss needs at least two classes")
    S = U @ U.T
    same = labels[:, None] == labels[None, :]
    pos = same.copy()
    np.fill_diagonal(pos, False)
    ai, pi = np.nonzero(pos)
    if len(ai) == 0:
        raise DegenerateBatchError("N-pairs loss needs a positive pair")
    n_pairs = len(ai)
    dS = np.zeros_like(S)
    total = 0.0
    for a, p in zip(ai, pi):
        negs = np.flatnonzero(~same[a])
        logits = np.concatenate([[0.0], S[a, negs] - S[a, p]])
        total += logsumexp(logits)
        w = softmax(logits)[1:] / n_pairs
        dS[a, negs] += w
        dS[a, p] -= w.sum()
    # S = U U^T, so dL/dU = (dS + dS^T) U
    G = (dS + dS.T) @ U
    return float(total / n_pairs), G


def mask_orthogonality_loss(masks, eps=1e-12):
    """Sum over ordered pairs i != j of the cosine between masks i and j.

    ``masks`` are the (already truncated) non-negative masks, shape (K, d).
    A zero-norm mask contributes zero cosine and receives zero gradient.
    """
    M = np.asarray(masks, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 2:
        raise ValueError("orthogonality loss needs at least two masks")
    norms = np.linalg.norm(M, axis=1)
    live = norms > eps
    if not live.all():
        warnings.warn("zero-norm mask in orthogonality loss",
                      DegenerateBatchWarning, stacklevel=2)
    safe = np.where(live, norms, 1.0)
    N = np.where(live[:, None], M / safe[:, None], 0.0)
    C = N @ N.T
    np.fill_diagonal(C, 0.0)
    loss = float(C.sum())
    others = N.sum(axis=0)[None, :] - N
    G = 2.0 * (others - C.sum(axis=1)[:, None] * N) / safe[:, None]
    G[~live] = 0.0
    return loss, G


def compute_loss(cfg: LossConfig, U, labels, triplets=None, beta=None):
    """Dispatch on ``cfg.kind``; returns ``(loss, grad_U, grad_beta)``.

    ``grad_beta`` is None except for the margin loss.  Triplet-based losses
    need ``triplets`` from ``mine_triplets``.
    """
    if cfg.kind == "triplet":
        return (*triplet_loss(U, triplets, cfg.alpha), None)
    if cfg.kind == "soft_triplet":
        return (*soft_triplet_loss(U, triplets), None)
    if cfg.kind == "margin":
        return margin_loss(U, labels, cfg.alpha,
                           cfg.beta if beta is None else beta)
    return (*npairs_loss(U, labels), None)
