"""Perceptron embedding network with hand-derived gradients and Adam."""

from __future__ import annotations

import numpy as np

NORM_EPS = 1e-12
CHECKPOINT_VERSION = "divconq-net/1"


class NoForwardCacheError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class EmbeddingNetwork:
    """Fully connected network ``feature_dim -> hidden... -> embedding_dim``.

    Hidden layers use ReLU, the output layer is linear.  Weights are stored
    as (fan_in, fan_out) matrices so ``forward`` computes ``X @ W + b``.
    With ``dropout > 0`` inverted dropout is applied to the input of the
    embedding layer, in training mode only.
    """

    def __init__(self, feature_dim, embedding_dim, hidden_dims=(64, 64),
                 seed=0, dropout=0.0):
        self.sizes = [int(feature_dim), *map(int, hidden_dims),
                      int(embedding_dim)]
        self.dropout = float(dropout)
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, fan_out))
        self._cache = None

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def embedding_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "EmbeddingNetwork":
        new = object.__new__(EmbeddingNetwork)
        new.sizes = list(self.sizes)
        new.dropout = self.dropout
        new.weights = [W.copy() for W in self.weights]
        new.biases = [b.copy() for b in self.biases]
        new._cache = None
        return new

    def forward(self, X, train=False, rng=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(
                f"expected input of shape (n, {self.input_dim}), got {X.shape}")
        inputs, pre = [], []
        drop = None
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if i == last and train and self.dropout > 0.0:
                if rng is None:
                    raise ValueError("dropout in training mode needs an rng")
                keep = 1.0 - self.dropout
                drop = (rng.random(h.shape) < keep) / keep
                h = h * drop
            inputs.append(h)
            z = h @ W + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < last else z
        self._cache = (inputs, pre, drop)
        return h

    def backward(self, grad_out):
        """Gradients of a scalar loss wrt parameters, same order as
        ``parameters()``, given dLoss/dOutput of the last ``forward``."""
        if self._cache is None:
            raise NoForwardCacheError("backward called before forward")
        inputs, pre, drop = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != pre[-1].shape:
            raise ValueError("upstream gradient shape does not match output")
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (pre[i] > 0.0)
            grads[2 * i] = inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i].T
                if i == len(self.weights) - 1 and drop is not None:
                    g = g * drop
        return grads

    def embed(self, X, batch_size=4096):
        """Raw embeddings without touching the backward cache."""
        X = np.asarray(X, dtype=np.float64)
        saved = self._cache
        out = np.vstack([self.forward(X[i:i + batch_size])
                         for i in range(0, max(len(X), 1), batch_size)])
        self._cache = saved
        return out[:len(X)]

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "sizes": list(self.sizes),
            "dropout": self.dropout,
            "layers": [
                {"weight_shape": list(W.shape),
                 "weight": W.ravel().tolist(),
                 "bias": b.tolist()}
                for W, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EmbeddingNetwork":
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version "
                             f"{data.get('version')!r}")
        net = object.__new__(cls)
        net.sizes = [int(s) for s in data["sizes"]]
        net.dropout = float(data.get("dropout", 0.0))
        net.weights, net.biases = [], []
        for layer in data["layers"]:
            shape = tuple(layer["weight_shape"])
            net.weights.append(np.array(layer["weight"], dtype=np.float64)
                               .reshape(shape))
            net.biases.append(np.array(layer["bias"], dtype=np.float64))
        net._cache = None
        return net


def normalize_rows(E, eps=NORM_EPS):
    """Scale each row to unit L2 norm; rows with norm below ``eps`` are
    divided by ``eps`` (so an all-zero row stays zero).

    Returns ``(U, norms)`` where ``norms`` are the guarded divisors, needed
    by ``normalize_rows_backward``.
    """
    E = np.asarray(E, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(E, axis=-1, keepdims=True), eps)
    return E / norms, norms


def normalize_rows_backward(U, norms, grad_U, eps=NORM_EPS):
    grad_U = np.asarray(grad_U, dtype=np.float64)
    radial = np.sum(U * grad_U, axis=-1, keepdims=True)
    # below the guard the map is a plain division by eps
    live = norms > eps
    return np.where(live, (grad_U - U * radial) / norms, grad_U / norms)


class Adam:
    """Bias-corrected Adam over a fixed list of parameter arrays.

    Parameters are updated in place.  ``lr_scale`` gives a per-parameter
    learning-rate multiplier (the subspace masks run at 100x the base rate).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 lr_scale=None):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = map(float, betas)
        self.eps = float(eps)
        self.lr_scale = (list(lr_scale) if lr_scale is not None
                         else [1.0] * len(self.params))
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("gradient list length does not match parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError("non-finite gradient, step rejected")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] *= self.beta1
            self.m[i] += (1.0 - self.beta1) * g
            self.v[i] *= self.beta2
            self.v[i] += (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p -= self.lr * self.lr_scale[i] * m_hat / (np.sqrt(v_hat) + self.eps)

    def replace_param(self, index, new_param, m=None, v=None):
        """Swap in a reshaped parameter (e.g. after masks are split)."""
        self.params[index] = new_param
        self.m[index] = np.zeros_like(new_param) if m is None else m
        self.v[index] = np.zeros_like(new_param) if v is None else v

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr,
                "m": [a.ravel().tolist() for a in self.m],
                "v": [a.ravel().tolist() for a in self.v]}
