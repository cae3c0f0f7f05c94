"""Divide-and-conquer training schedule.

Training alternates between clusters: each step picks a cluster, draws a
batch from it and optimises the loss measured inside that cluster's
subspace.  Every ``epochs_between_divisions`` epochs the data are
re-clustered in the current embedding space (cluster identities kept by a
max-IoU assignment) and, until ``k_max`` is reached, every cluster and its
mask are split in two.  From ``finetune_start_epoch`` on, all distances use
the conquered (summed) mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import partition as part_mod
from .embedder import NORM_EPS, Adam, EmbeddingNetwork, \
    NonFiniteGradientError, normalize_rows, normalize_rows_backward
from .losses import LossConfig, compute_loss, mask_orthogonality_loss, \
    mine_triplets
from .partition import Partition, bisect, kmeans, random_bisect, \
    recluster_and_match
from .subspace import FIXED, LEARNABLE, MaskSet, conquer, \
    init_fixed_orthogonal, init_root_mask, split_masks

DIVISION_MODES = ("progressive", "not_progressive", "random_splits",
                  "label_grouping")
DIVIDE, FINETUNE = "divide", "finetune"


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, dump):
        self.dump = dump
        super().__init__(message)


class InvariantViolation(AssertionError):
    pass


@dataclass
class TrainConfig:
    k_max: int = 4
    epochs_between_divisions: int = 2
    lambda_: float = 0.0
    total_epochs: int = 40
    finetune_start_epoch: int | None = None
    batch_size: int = 32
    images_per_class: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    mask_mode: str = FIXED
    division_mode: str = "progressive"
    embedding_dim: int = 32
    hidden_dims: tuple = (64, 64)
    lr: float = 1e-3
    mask_lr_multiplier: float = 100.0
    dropout: float = 0.0
    seed: int = 0
    class_groups: dict | None = None
    check_invariants: bool = False

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.class_groups is not None:
            self.class_groups = {int(k): int(v)
                                 for k, v in self.class_groups.items()}
        self.validate()

    def validate(self):
        k = self.k_max
        if k < 1 or k & (k - 1):
            raise ConfigError("k_max", "must be a power of two >= 1")
        if self.epochs_between_divisions < 1:
            raise ConfigError("epochs_between_divisions", "must be >= 1")
        if not np.isfinite(self.lambda_) or self.lambda_ < 0:
            raise ConfigError("lambda", "must be finite and >= 0")
        if self.total_epochs < 0:
            raise ConfigError("total_epochs", "must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size", "must be >= 2")
        if self.images_per_class < 0:
            raise ConfigError("images_per_class", "must be >= 0")
        if self.mask_mode not in (FIXED, LEARNABLE):
            raise ConfigError("mask_mode", f"must be {FIXED} or {LEARNABLE}")
        if self.division_mode not in DIVISION_MODES:
            raise ConfigError("division_mode",
                              f"must be one of {DIVISION_MODES}")
        if self.division_mode == "label_grouping" and not self.class_groups:
            raise ConfigError("class_groups",
                              "label_grouping needs a class-group map")
        if self.embedding_dim % self.k_max:
            raise ConfigError("embedding_dim",
                              f"must be divisible by k_max={self.k_max}")
        if self.lr <= 0 or self.mask_lr_multiplier <= 0:
            raise ConfigError("lr", "learning rates must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        d["hidden_dims"] = list(self.hidden_dims)
        if self.class_groups is not None:
            d["class_groups"] = {str(k): v for k, v in
                                 sorted(self.class_groups.items())}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lambda_"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        return cls(**data)


@dataclass
class TrainerState:
    config: TrainConfig
    X: np.ndarray
    y: np.ndarray
    net: EmbeddingNetwork
    partition: Partition
    masks: MaskSet
    opt: Adam
    rng: np.random.Generator
    beta: np.ndarray | None = None
    epoch: int = 0
    step: int = 0
    events: list = field(default_factory=list)

    @property
    def phase(self) -> str:
        f = self.config.finetune_start_epoch
        return FINETUNE if f is not None and self.epoch >= f else DIVIDE

    @property
    def masks_trainable(self) -> bool:
        return self.masks.learnable and self._mask_slot is not None

    @property
    def _mask_slot(self):
        n = len(self.net.parameters())
        return n if len(self.opt.params) > n and \
            self.opt.params[n] is self.masks.masks else None


# ---------------------------------------------------------------------------
# objective


def step_objective(net, mask_raw, k, Xb, yb, loss_cfg, lam=0.0, triplets=None,
                   learnable=False, finetune=False, beta=None, rng=None):
    """Total objective of one step and its gradients.

    ``mask_raw`` is the (K, d) raw mask array; cluster ``k`` selects the
    active mask unless ``finetune`` is set, in which case the conquered mask
    (sum over all truncated masks) is used and the orthogonality term is
    dropped.

    Returns ``(total, parts, net_grads, mask_grad, beta_grad)`` where
    ``mask_grad`` is None unless ``learnable``.
    """
    mask_raw = np.asarray(mask_raw, dtype=np.float64)
    E = net.forward(Xb, train=rng is not None, rng=rng)
    if finetune:
        m = np.maximum(mask_raw, 0.0).sum(axis=0)
    else:
        m = np.maximum(mask_raw[k], 0.0)
    Z = E * m
    U, norms = normalize_rows(Z)
    loss, gU, gbeta = compute_loss(loss_cfg, U, yb, triplets,
                                   None if beta is None else float(beta[0]))
    gZ = normalize_rows_backward(U, norms, gU)
    net_grads = net.backward(gZ * m)
    # rows at the normalisation guard are reported, not silently hidden
    parts = {"metric": loss, "ortho": 0.0,
             "zero_rows": int((norms[:, 0] <= NORM_EPS).sum())}
    mask_grad = None
    if learnable:
        gm = (gZ * E).sum(axis=0)
        mask_grad = np.zeros_like(mask_raw)
        if finetune:
            mask_grad += gm[None, :] * (mask_raw > 0.0)
        else:
            mask_grad[k] = gm * (mask_raw[k] > 0.0)
    if not finetune and len(mask_raw) >= 2:
        lo, gM = mask_orthogonality_loss(np.maximum(mask_raw, 0.0))
        parts["ortho"] = lo
        if learnable and lam > 0.0:
            mask_grad += lam * gM * (mask_raw > 0.0)
    total = loss + lam * parts["ortho"] if learnable else loss
    return total, parts, net_grads, mask_grad, gbeta


# ---------------------------------------------------------------------------
# batch sampling


def draw_batch(members, labels, batch_size, images_per_class, rng):
    """Batch from ``members``: ``images_per_class`` samples for each of
    ``batch_size // images_per_class`` random classes when the pool allows at
    least two such classes, otherwise a uniform draw."""
    members = np.asarray(members)
    m = images_per_class
    if m >= 1:
        cls, counts = np.unique(labels[members], return_counts=True)
        eligible = cls[counts >= m]
        n_cls = min(batch_size // m, len(eligible))
        if n_cls >= 2:
            chosen = rng.choice(eligible, size=n_cls, replace=False)
            return np.concatenate([
                rng.choice(members[labels[members] == c], size=m,
                           replace=False)
                for c in chosen])
    return rng.choice(members, size=min(batch_size, len(members)),
                      replace=False)


def sample_cluster_batch(state: TrainerState):
    """Pick a cluster uniformly among those with at least two samples and
    draw a batch from it.  Returns ``(cluster, indices)``."""
    sizes = state.partition.sizes
    usable = np.flatnonzero(sizes >= 2)
    small = np.flatnonzero((sizes < 2) & ~state.partition.empty)
    if len(small):
        state.events.append({"event": "skip_small_clusters",
                             "epoch": state.epoch, "step": state.step,
                             "clusters": small.tolist()})
    if len(usable) == 0:
        raise RuntimeError("no cluster has two or more samples")
    k = int(usable[0]) if len(usable) == 1 else \
        int(usable[state.rng.integers(len(usable))])
    idx = draw_batch(state.partition.members(k), state.y,
                     state.config.batch_size, state.config.images_per_class,
                     state.rng)
    return k, idx


def _batch_usable(loss_cfg, yb):
    _, counts = np.unique(yb, return_counts=True)
    if len(counts) < 2:
        return False
    if loss_cfg.kind != "margin" and counts.max() < 2:
        return False
    return True


# ---------------------------------------------------------------------------
# state construction


def _derived_seed(seed, *tags):
    return np.random.SeedSequence([int(seed), *map(int, tags)])


def clustering_embeddings(net, X):
    """Unit-normalised full-space embeddings used for clustering."""
    return normalize_rows(net.embed(X))[0]


def init_state(X, y, config: TrainConfig) -> TrainerState:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    cfg = config
    if len(X) < 2 * cfg.k_max:
        raise ConfigError("k_max", f"{len(X)} samples cannot support "
                                   f"{cfg.k_max} clusters")
    net = EmbeddingNetwork(X.shape[1], cfg.embedding_dim, cfg.hidden_dims,
                           seed=cfg.seed, dropout=cfg.dropout)
    d = cfg.embedding_dim
    mode = cfg.division_mode
    if mode in ("progressive", "random_splits"):
        partition = Partition(np.zeros(len(X), dtype=np.int64), 1, 0)
        masks = init_root_mask(d, cfg.mask_mode)
    else:
        if mode == "not_progressive":
            partition = kmeans(clustering_embeddings(net, X), cfg.k_max,
                               seed=_derived_seed(cfg.seed, 0, 0))
        else:
            partition = part_mod.label_grouping(y, cfg.class_groups)
        masks = init_fixed_orthogonal(d, partition.k)
        masks.mode = cfg.mask_mode
    params = net.parameters()
    scales = [1.0] * len(params)
    trainable_masks = cfg.mask_mode == LEARNABLE and \
        (cfg.k_max > 1 or partition.k > 1)
    if trainable_masks:
        params.append(masks.masks)
        scales.append(cfg.mask_lr_multiplier)
    beta = None
    if cfg.loss.kind == "margin":
        beta = np.array([cfg.loss.beta])
        if cfg.loss.learn_beta:
            params.append(beta)
            scales.append(1.0)
    opt = Adam(params, lr=cfg.lr, lr_scale=scales)
    return TrainerState(cfg, X, y, net, partition, masks, opt,
                        np.random.default_rng(cfg.seed), beta)


# ---------------------------------------------------------------------------
# training


def train_step(state: TrainerState) -> dict | None:
    cfg = state.config
    k, idx = sample_cluster_batch(state)
    yb = state.y[idx]
    state.step += 1
    if cfg.check_invariants:
        _check_batch(state, k, idx)
    if not _batch_usable(cfg.loss, yb):
        ev = {"event": "skip_batch", "epoch": state.epoch + 1,
              "step": state.step, "cluster": k}
        state.events.append(ev)
        return None
    triplets = None
    if cfg.loss.uses_triplets:
        triplets = mine_triplets(yb, state.rng, cfg.loss.triplet_cap)
    finetune = state.phase == FINETUNE
    trainable = state.masks_trainable
    total, parts, net_grads, mask_grad, gbeta = step_objective(
        state.net, state.masks.masks, k, state.X[idx], yb, cfg.loss,
        cfg.lambda_, triplets, learnable=trainable, finetune=finetune,
        beta=state.beta, rng=state.rng if cfg.dropout > 0 else None)
    ev = {"epoch": state.epoch + 1, "step": state.step, "cluster": k,
          "mask": k, "loss": total, "ortho": parts["ortho"],
          "phase": state.phase}
    if parts["zero_rows"]:
        ev["zero_rows"] = parts["zero_rows"]
    dump = {"event": ev, "batch": idx.tolist()}
    if not np.isfinite(total):
        raise TrainingDiverged(f"non-finite loss at step {state.step}", dump)
    grads = list(net_grads)
    if trainable:
        grads.append(mask_grad)
    if len(state.opt.params) > len(grads):
        grads.append(np.array([gbeta]))
    try:
        state.opt.step(grads)
    except NonFiniteGradientError as exc:
        raise TrainingDiverged(f"{exc} at step {state.step}", dump) from exc
    state.events.append(ev)
    if cfg.check_invariants:
        _check_state(state)
        if state.masks.mode == FIXED and parts["ortho"] != 0.0:
            raise InvariantViolation("fixed masks with non-zero ortho loss")
    return ev


def steps_per_epoch(n, batch_size):
    return math.ceil(n / batch_size)


def train_epoch(state: TrainerState) -> TrainerState:
    for _ in range(steps_per_epoch(len(state.X), state.config.batch_size)):
        train_step(state)
    state.epoch += 1
    return state


def _set_masks(state: TrainerState, new_masks: MaskSet, parent_rows=None):
    slot = state._mask_slot
    state.masks = new_masks
    if slot is not None:
        m = v = None
        if parent_rows is not None:
            m = state.opt.m[slot][parent_rows]
            v = state.opt.v[slot][parent_rows]
        state.opt.replace_param(slot, new_masks.masks, m, v)


def division_step(state: TrainerState) -> TrainerState:
    """Re-cluster (identities kept) and, below k_max, bisect clusters and
    masks.  Random splits skip re-clustering; label grouping is static."""
    cfg = state.config
    mode = cfg.division_mode
    if mode == "label_grouping":
        return state
    ev = {"event": "division", "epoch": state.epoch, "k_before":
          state.partition.k}
    if mode in ("progressive", "not_progressive"):
        emb = clustering_embeddings(state.net, state.X)
        rec = recluster_and_match(emb, state.partition,
                                  seed=_derived_seed(cfg.seed, state.epoch, 1))
        state.partition = rec.partition
        ev["consistency_nmi"] = rec.consistency_nmi
        ev["retained"] = rec.retained
    if state.partition.k < cfg.k_max and mode != "not_progressive":
        if mode == "random_splits":
            state.partition = random_bisect(
                state.partition, seed=_derived_seed(cfg.seed, state.epoch, 2))
        else:
            state.partition = bisect(
                state.partition, emb,
                seed=_derived_seed(cfg.seed, state.epoch, 2))
        parents = np.repeat(np.arange(state.masks.k), 2)
        _set_masks(state, split_masks(state.masks), parents)
    ev["k_after"] = state.partition.k
    state.events.append(ev)
    if cfg.check_invariants:
        _check_state(state)
    return state


def conquer_and_finetune(state: TrainerState) -> TrainerState:
    """Switch to the conquered mask for all later steps."""
    state.config.finetune_start_epoch = state.epoch
    state.events.append({"event": "finetune", "epoch": state.epoch})
    return state


def is_division_epoch(epoch, config: TrainConfig) -> bool:
    return epoch > 0 and epoch % config.epochs_between_divisions == 0


def fit(X, y, config: TrainConfig,
        callback: Callable[[TrainerState], None] | None = None,
        state: TrainerState | None = None) -> TrainerState:
    """Run the full schedule for ``config.total_epochs`` epochs.

    ``callback`` is called after every epoch (after any division step).
    """
    if state is None:
        state = init_state(X, y, config)
    f = config.finetune_start_epoch
    while state.epoch < config.total_epochs:
        if f is not None and state.epoch == f:
            state.events.append({"event": "finetune", "epoch": state.epoch})
        train_epoch(state)
        if is_division_epoch(state.epoch, config):
            division_step(state)
        if callback is not None:
            callback(state)
    return state


def train_baseline(X, y, config: TrainConfig):
    """Plain single-space metric learning with the same sampling, loss and
    optimiser; no partitions, masks or division steps."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    cfg = config
    net = EmbeddingNetwork(X.shape[1], cfg.embedding_dim, cfg.hidden_dims,
                           seed=cfg.seed, dropout=cfg.dropout)
    params = net.parameters()
    beta = None
    if cfg.loss.kind == "margin":
        beta = np.array([cfg.loss.beta])
        if cfg.loss.learn_beta:
            params.append(beta)
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    everyone = np.arange(len(X))
    trajectory = []
    for _ in range(cfg.total_epochs):
        for _ in range(steps_per_epoch(len(X), cfg.batch_size)):
            idx = draw_batch(everyone, y, cfg.batch_size,
                             cfg.images_per_class, rng)
            yb = y[idx]
            if not _batch_usable(cfg.loss, yb):
                continue
            triplets = None
            if cfg.loss.uses_triplets:
                triplets = mine_triplets(yb, rng, cfg.loss.triplet_cap)
            E = net.forward(X[idx], train=cfg.dropout > 0,
                            rng=rng if cfg.dropout > 0 else None)
            U, norms = normalize_rows(E)
            loss, gU, gbeta = compute_loss(
                cfg.loss, U, yb, triplets,
                None if beta is None else float(beta[0]))
            grads = net.backward(normalize_rows_backward(U, norms, gU))
            if len(opt.params) > len(grads):
                grads.append(np.array([gbeta]))
            opt.step(grads)
            trajectory.append(loss)
    return net, trajectory


# ---------------------------------------------------------------------------
# embeddings of a trained state


def conquered_mask(state_or_masks) -> np.ndarray:
    masks = getattr(state_or_masks, "masks", state_or_masks)
    return conquer(masks)


def embed_final(net, masks: MaskSet, X):
    """Final embedding: network output re-weighted by the conquered mask,
    scaled to unit length."""
    return normalize_rows(net.embed(X) * conquer(masks))[0]


def embed_subspace(net, masks: MaskSet, X, k):
    return normalize_rows(net.embed(X) * masks.truncated()[k])[0]


# ---------------------------------------------------------------------------
# invariants


def _check_batch(state, k, idx):
    if not np.all(state.partition.assignment[idx] == k):
        raise InvariantViolation("batch contains samples outside its cluster")


def _check_state(state):
    p = state.partition
    if len(p.assignment) != len(state.X):
        raise InvariantViolation("partition does not cover the dataset")
    p.validate()
    if p.k != state.masks.k:
        raise InvariantViolation(
            f"partition has {p.k} clusters but {state.masks.k} masks")
    mode = state.config.division_mode
    if mode in ("progressive", "random_splits") and p.k != 2 ** p.depth:
        raise InvariantViolation(f"K={p.k} at depth {p.depth}")
