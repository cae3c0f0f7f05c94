"""scikit-learn compatible front end for the divide-and-conquer trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .losses import LossConfig
from .metrics import recall_at_k
from .trainer import TrainConfig, embed_final, embed_subspace, fit


class DivideConquerEmbedding(TransformerMixin, BaseEstimator):
    """Metric-learning embedding trained by jointly splitting data and
    embedding space.

    Parameters
    ----------
    k_max : int, default=4
        Final number of clusters/subspaces (a power of two).
    epochs_between_divisions : int, default=2
        Re-cluster (and, below ``k_max``, split) every this many epochs.
    lam : float, default=0.0
        Weight of the mask orthogonality penalty (learnable masks only).
    n_epochs : int, default=40
    finetune_start_epoch : int or None, default=None
        Epoch after which distances use the conquered mask; None disables
        fine-tuning.
    batch_size : int, default=32
    images_per_class : int, default=2
        Samples per class in a batch; 0 samples batches uniformly.
    loss : {"triplet", "margin", "npairs", "soft_triplet"}, default="triplet"
    alpha, beta : float
        Margins of the triplet/margin losses.
    mask_mode : {"fixed", "learnable"}, default="fixed"
    division_mode : {"progressive", "not_progressive", "random_splits", \
"label_grouping"}, default="progressive"
    class_groups : dict or None
        Class -> group map, required by ``label_grouping``.
    embedding_dim : int, default=32
    hidden_dims : tuple of int, default=(64, 64)
    lr : float, default=1e-3
    mask_lr_multiplier : float, default=100.0
    random_state : int, default=0

    Attributes
    ----------
    net_ : EmbeddingNetwork
    masks_ : MaskSet
    partition_ : Partition
        Training-data partition at the end of training.
    events_ : list of dict
        Per-step and per-division log records.
    """

    def __init__(self, k_max=4, epochs_between_divisions=2, lam=0.0,
                 n_epochs=40, finetune_start_epoch=None, batch_size=32,
                 images_per_class=2, loss="triplet", alpha=0.2, beta=1.2,
                 mask_mode="fixed", division_mode="progressive",
                 class_groups=None, embedding_dim=32, hidden_dims=(64, 64),
                 lr=1e-3, mask_lr_multiplier=100.0, dropout=0.0,
                 random_state=0):
        self.k_max = k_max
        self.epochs_between_divisions = epochs_between_divisions
        self.lam = lam
        self.n_epochs = n_epochs
        self.finetune_start_epoch = finetune_start_epoch
        self.batch_size = batch_size
        self.images_per_class = images_per_class
        self.loss = loss
        self.alpha = alpha
        self.beta = beta
        self.mask_mode = mask_mode
        self.division_mode = division_mode
        self.class_groups = class_groups
        self.embedding_dim = embedding_dim
        self.hidden_dims = hidden_dims
        self.lr = lr
        self.mask_lr_multiplier = mask_lr_multiplier
        self.dropout = dropout
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            k_max=self.k_max,
            epochs_between_divisions=self.epochs_between_divisions,
            lambda_=self.lam, total_epochs=self.n_epochs,
            finetune_start_epoch=self.finetune_start_epoch,
            batch_size=self.batch_size,
            images_per_class=self.images_per_class,
            loss=LossConfig(self.loss, self.alpha, self.beta),
            mask_mode=self.mask_mode, division_mode=self.division_mode,
            embedding_dim=self.embedding_dim, hidden_dims=self.hidden_dims,
            lr=self.lr, mask_lr_multiplier=self.mask_lr_multiplier,
            dropout=self.dropout, seed=self.random_state,
            class_groups=self.class_groups)

    def fit(self, X, y, callback=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        state = fit(X, y, self._config(), callback=callback)
        self.state_ = state
        self.net_ = state.net
        self.masks_ = state.masks
        self.partition_ = state.partition
        self.events_ = state.events
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        """Unit-length embeddings in the conquered space."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected "
                             f"{self.n_features_in_}")
        return embed_final(self.net_, self.masks_, X)

    def transform_subspace(self, X, k):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        return embed_subspace(self.net_, self.masks_, X, k)

    def score(self, X, y):
        """Recall@1 of the conquered embedding (self excluded)."""
        return recall_at_k(self.transform(X), np.asarray(y), 1)
