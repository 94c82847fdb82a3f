"""Device loss models with exact analytic gradients.

All models share one parameter convention: a flat float64 vector of fixed
length ``dim``. Losses are the mean per-sample loss over a data shard plus an
L2 weight-decay term ``(weight_decay / 2) * ||params||^2``, so exact
minimization of a device objective is well defined.

Three families are provided:

* :class:`QuadraticLoss` - data-free ``0.5 (t - c)' S (t - c)`` with exact
  curvature constants; exists because closed-form minimizers make exactness
  tests possible.
* :class:`MulticlassLogisticLoss` - softmax cross entropy over a linear model.
* :class:`TwoLayerMlpLoss` - one ReLU hidden layer, softmax output; enough to
  exercise nonconvexity without an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ParamVector = np.ndarray


class ContractError(ValueError):
    """An operation was called outside its contract (bad shapes, bad inputs)."""


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if arr.ndim != 2:
        raise ContractError(f"{name} must be a 2-d array, got ndim={arr.ndim}")
    return arr


@dataclass(frozen=True)
class DataShard:
    """Feature matrix (n x p) plus integer labels (n,) for one device."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = _as_matrix(self.features, "features")
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ContractError(
                f"labels must be 1-d with one entry per feature row, "
                f"got {labels.shape} for {features.shape[0]} rows"
            )
        if features.size and not np.isfinite(features).all():
            raise ContractError("features contain non-finite entries")
        if labels.size and labels.min() < 0:
            raise ContractError("labels must be nonnegative class indices")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "DataShard":
        return DataShard(self.features[idx], self.labels[idx])

    @staticmethod
    def empty(p: int) -> "DataShard":
        return DataShard(np.zeros((0, p)), np.zeros(0, dtype=np.int64))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    # Max-subtraction keeps exp() in range for large logits.
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    e /= e.sum(axis=1, keepdims=True)
    return e


class LossModel:
    """Base class for device losses over flat parameter vectors.

    Subclasses set ``dim`` and ``weight_decay`` and implement
    ``value_arrays`` / ``gradient_arrays`` on raw feature/label arrays. All
    operations are pure functions of their inputs and safe to call from any
    number of workers.
    """

    dim: int
    weight_decay: float

    def check_params(self, params) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.dim,):
            raise ContractError(
                f"expected parameter vector of length {self.dim}, got shape {params.shape}"
            )
        return params

    def value(self, params: ParamVector, shard: DataShard | None = None) -> float:
        params = self.check_params(params)
        X, y = self._shard_arrays(shard)
        return self.value_arrays(params, X, y)

    def gradient(self, params: ParamVector, shard: DataShard | None = None) -> ParamVector:
        params = self.check_params(params)
        X, y = self._shard_arrays(shard)
        return self.gradient_arrays(params, X, y)

    def init_params(self, rng: np.random.Generator | None = None) -> ParamVector:
        return np.zeros(self.dim)

    def predict(self, params: ParamVector, features: np.ndarray) -> np.ndarray:
        raise ContractError(f"{type(self).__name__} does not define predictions")

    def _shard_arrays(self, shard: DataShard | None):
        if shard is None:
            raise ContractError(f"{type(self).__name__} requires a data shard")
        if shard.n == 0:
            raise ContractError(f"{type(self).__name__} is undefined on an empty shard")
        return shard.features, shard.labels

    def value_arrays(self, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        raise NotImplementedError

    def gradient_arrays(self, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _decay_value(self, params: np.ndarray) -> float:
        if self.weight_decay == 0.0:
            return 0.0
        return 0.5 * self.weight_decay * float(params @ params)


class QuadraticLoss(LossModel):
    """Data-free quadratic ``0.5 (t - center)' scale (t - center)`` plus decay.

    ``scale`` may be omitted (identity), a scalar (multiple of identity) or a
    symmetric PSD matrix. The strong-convexity and smoothness constants
    ``mu`` / ``smoothness`` are the extreme eigenvalues of ``scale`` shifted
    by the weight decay. Any shard argument is ignored; the loss carries its
    own data through ``center``.
    """

    def __init__(self, center, scale=None, weight_decay: float = 0.0):
        center = np.ascontiguousarray(np.atleast_1d(np.asarray(center, dtype=np.float64)))
        if center.ndim != 1 or center.size == 0:
            raise ContractError("center must be a nonempty vector")
        d = center.size
        if scale is None:
            scale_mat = np.eye(d)
        elif np.isscalar(scale):
            if scale < 0:
                raise ContractError("scalar scale must be nonnegative")
            scale_mat = float(scale) * np.eye(d)
        else:
            scale_mat = _as_matrix(scale, "scale")
            if scale_mat.shape != (d, d):
                raise ContractError(f"scale must be {d}x{d}, got {scale_mat.shape}")
            scale_mat = 0.5 * (scale_mat + scale_mat.T)
        if weight_decay < 0:
            raise ContractError("weight_decay must be nonnegative")
        eigs = np.linalg.eigvalsh(scale_mat)
        if eigs[0] < -1e-10:
            raise ContractError(f"scale must be PSD, smallest eigenvalue {eigs[0]:g}")
        self.center = center
        self.scale = scale_mat
        self.weight_decay = float(weight_decay)
        self.dim = d
        self.mu = float(eigs[0]) + self.weight_decay
        self.smoothness = float(eigs[-1]) + self.weight_decay

    def _shard_arrays(self, shard):
        return None, None

    def value_arrays(self, params, X, y) -> float:
        diff = params - self.center
        return 0.5 * float(diff @ (self.scale @ diff)) + self._decay_value(params)

    def gradient_arrays(self, params, X, y) -> np.ndarray:
        grad = self.scale @ (params - self.center)
        if self.weight_decay:
            grad += self.weight_decay * params
        return grad


class MulticlassLogisticLoss(LossModel):
    """Softmax cross entropy for a linear classifier.

    Parameter layout: row-major weight matrix (n_classes x n_features)
    followed by the bias vector, so ``dim = C * p + C``.
    """

    def __init__(self, n_features: int, n_classes: int, weight_decay: float = 1e-4):
        if n_features < 1 or n_classes < 2:
            raise ContractError("need n_features >= 1 and n_classes >= 2")
        if weight_decay < 0:
            raise ContractError("weight_decay must be nonnegative")
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.weight_decay = float(weight_decay)
        self.dim = self.n_classes * self.n_features + self.n_classes

    def unpack(self, params: np.ndarray):
        split = self.n_classes * self.n_features
        W = params[:split].reshape(self.n_classes, self.n_features)
        b = params[split:]
        return W, b

    def _check_labels(self, y: np.ndarray):
        if y.size and y.max() >= self.n_classes:
            raise ContractError(f"label {y.max()} out of range for {self.n_classes} classes")

    def value_arrays(self, params, X, y) -> float:
        self._check_labels(y)
        W, b = self.unpack(params)
        logp = _log_softmax(X @ W.T + b)
        ce = -logp[np.arange(X.shape[0]), y].mean()
        return float(ce) + self._decay_value(params)

    def gradient_arrays(self, params, X, y) -> np.ndarray:
        self._check_labels(y)
        W, b = self.unpack(params)
        n = X.shape[0]
        R = _softmax(X @ W.T + b)
        R[np.arange(n), y] -= 1.0
        R /= n
        grad = np.empty(self.dim)
        split = self.n_classes * self.n_features
        np.matmul(R.T, X, out=grad[:split].reshape(self.n_classes, self.n_features))
        grad[split:] = R.sum(axis=0)
        if self.weight_decay:
            grad += self.weight_decay * params
        return grad

    def predict(self, params, features) -> np.ndarray:
        params = self.check_params(params)
        W, b = self.unpack(params)
        # argmax picks the smallest class index on ties.
        return np.argmax(features @ W.T + b, axis=1)


class TwoLayerMlpLoss(LossModel):
    """One ReLU hidden layer with a softmax cross-entropy head.

    Parameter layout: W1 (H x p), b1 (H), W2 (C x H), b2 (C), so
    ``dim = H*p + H + C*H + C``.
    """

    def __init__(self, n_features: int, n_hidden: int, n_classes: int,
                 weight_decay: float = 1e-4):
        if n_features < 1 or n_hidden < 1 or n_classes < 2:
            raise ContractError("need n_features, n_hidden >= 1 and n_classes >= 2")
        if weight_decay < 0:
            raise ContractError("weight_decay must be nonnegative")
        self.n_features = int(n_features)
        self.n_hidden = int(n_hidden)
        self.n_classes = int(n_classes)
        self.weight_decay = float(weight_decay)
        p, H, C = self.n_features, self.n_hidden, self.n_classes
        self._splits = np.cumsum([H * p, H, C * H])
        self.dim = H * p + H + C * H + C

    def unpack(self, params: np.ndarray):
        p, H, C = self.n_features, self.n_hidden, self.n_classes
        s = self._splits
        W1 = params[: s[0]].reshape(H, p)
        b1 = params[s[0]: s[1]]
        W2 = params[s[1]: s[2]].reshape(C, H)
        b2 = params[s[2]:]
        return W1, b1, W2, b2

    def _check_labels(self, y: np.ndarray):
        if y.size and y.max() >= self.n_classes:
            raise ContractError(f"label {y.max()} out of range for {self.n_classes} classes")

    def _forward(self, params, X):
        W1, b1, W2, b2 = self.unpack(params)
        Z1 = X @ W1.T + b1
        A1 = np.maximum(Z1, 0.0)
        return Z1, A1, A1 @ W2.T + b2

    def value_arrays(self, params, X, y) -> float:
        self._check_labels(y)
        _, _, logits = self._forward(params, X)
        logp = _log_softmax(logits)
        ce = -logp[np.arange(X.shape[0]), y].mean()
        return float(ce) + self._decay_value(params)

    def gradient_arrays(self, params, X, y) -> np.ndarray:
        self._check_labels(y)
        W1, b1, W2, b2 = self.unpack(params)
        n = X.shape[0]
        Z1, A1, logits = self._forward(params, X)
        dlogits = _softmax(logits)
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        dA1 = dlogits @ W2
        dZ1 = dA1 * (Z1 > 0.0)
        grad = np.empty(self.dim)
        s = self._splits
        np.matmul(dZ1.T, X, out=grad[: s[0]].reshape(self.n_hidden, self.n_features))
        grad[s[0]: s[1]] = dZ1.sum(axis=0)
        np.matmul(dlogits.T, A1, out=grad[s[1]: s[2]].reshape(self.n_classes, self.n_hidden))
        grad[s[2]:] = dlogits.sum(axis=0)
        if self.weight_decay:
            grad += self.weight_decay * params
        return grad

    def init_params(self, rng: np.random.Generator | None = None) -> ParamVector:
        if rng is None:
            raise ContractError("MLP initialization requires an RNG")
        p, H, C = self.n_features, self.n_hidden, self.n_classes
        lim1, lim2 = 1.0 / np.sqrt(p), 1.0 / np.sqrt(H)
        parts = [
            rng.uniform(-lim1, lim1, H * p),
            rng.uniform(-lim1, lim1, H),
            rng.uniform(-lim2, lim2, C * H),
            rng.uniform(-lim2, lim2, C),
        ]
        return np.concatenate(parts)

    def predict(self, params, features) -> np.ndarray:
        params = self.check_params(params)
        _, _, logits = self._forward(params, features)
        return np.argmax(logits, axis=1)


def loss_value(model: LossModel, params: ParamVector, shard: DataShard | None = None) -> float:
    """Mean per-sample loss plus the weight-decay term."""
    return model.value(params, shard)


def loss_gradient(model: LossModel, params: ParamVector,
                  shard: DataShard | None = None) -> ParamVector:
    """Exact analytic gradient of :func:`loss_value`."""
    return model.gradient(params, shard)


def fd_gradient_check(model: LossModel, params: ParamVector,
                      shard: DataShard | None = None, step: float = 1e-6) -> float:
    """Max relative disagreement between analytic and central-difference gradients.

    Per coordinate the disagreement is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    params = model.check_params(params)
    analytic = model.gradient(params, shard)
    worst = 0.0
    probe = params.copy()
    for i in range(params.size):
        base = probe[i]
        probe[i] = base + step
        hi = model.value(probe, shard)
        probe[i] = base - step
        lo = model.value(probe, shard)
        probe[i] = base
        numeric = (hi - lo) / (2.0 * step)
        rel = abs(analytic[i] - numeric) / (abs(analytic[i]) + abs(numeric) + 1e-12)
        worst = max(worst, rel)
    return worst


@dataclass
class FederatedProblem:
    """Per-device loss models and shards, plus an optional held-out test shard.

    The global empirical loss is the unweighted mean of the device losses.
    For data-driven models the same (stateless) model instance is typically
    shared across devices; quadratic ensembles carry one model per device.
    """

    models: list
    shards: list
    test: DataShard | None = None

    def __post_init__(self):
        if len(self.models) != len(self.shards) or not self.models:
            raise ContractError("need one model per shard, at least one device")
        dims = {m.dim for m in self.models}
        if len(dims) != 1:
            raise ContractError(f"all device models must share one dimension, got {dims}")

    @property
    def m(self) -> int:
        return len(self.models)

    @property
    def dim(self) -> int:
        return self.models[0].dim


def quadratic_ensemble(centers, scales=None, weight_decay: float = 0.0) -> FederatedProblem:
    """Build a quadratic device ensemble from per-device centers (and scales)."""
    centers = [np.atleast_1d(np.asarray(c, dtype=np.float64)) for c in centers]
    if scales is None:
        scales = [None] * len(centers)
    if len(scales) != len(centers):
        raise ContractError("need one scale per center")
    models = [QuadraticLoss(c, s, weight_decay) for c, s in zip(centers, scales)]
    shards = [DataShard.empty(1) for _ in models]
    return FederatedProblem(models=models, shards=shards, test=None)
