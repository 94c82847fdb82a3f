"""Inner optimizers for device updates.

Three routes share one entry point, :func:`minimize`:

* ``SGD`` - epoch passes over a seeded shuffle of the shard, optional
  per-round learning-rate decay and gradient clipping. This is the route the
  round-level algorithms use in their practical (inexact) mode.
* ``FULL_GD`` - damped full-gradient descent to a gradient-norm tolerance;
  the step halves whenever it fails to decrease the objective, so it doubles
  as the "exact" solver for strongly convex non-quadratic losses.
* ``CLOSED_FORM_QUADRATIC`` - direct linear solve, exact up to roundoff, only
  valid on quadratic device losses.

Objectives wrap a loss model over a shard plus the optional linear and
proximal terms the federated strategies add; see :class:`DeviceObjective`.
All routes are pure functions of their inputs and the supplied generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .losses import ContractError, DataShard, LossModel, QuadraticLoss


class SolverMethod(Enum):
    SGD = "sgd"
    FULL_GD = "full_gd"
    CLOSED_FORM_QUADRATIC = "closed_form"


class DivergenceError(RuntimeError):
    """A solver produced a non-finite iterate."""

    def __init__(self, message: str, round_index: int | None = None,
                 device_id: int | None = None):
        context = ""
        if round_index is not None or device_id is not None:
            context = f" (round={round_index}, device={device_id})"
        super().__init__(message + context)
        self.round_index = round_index
        self.device_id = device_id


@dataclass
class LocalSolverConfig:
    method: SolverMethod = SolverMethod.SGD
    lr: float = 0.1
    epochs: int = 1
    batch: int = 50
    lr_decay_per_round: float = 1.0
    grad_clip_norm: float | None = 10.0
    tol: float = 1e-9
    max_iters: int = 10000

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = SolverMethod(self.method)
        if self.lr <= 0 or self.tol <= 0:
            raise ContractError("lr and tol must be positive")
        if self.epochs < 1 or self.batch < 1 or self.max_iters < 1:
            raise ContractError("epochs, batch and max_iters must be >= 1")
        if not 0.0 < self.lr_decay_per_round <= 1.0:
            raise ContractError("lr_decay_per_round must lie in (0, 1]")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ContractError("grad_clip_norm must be positive or None")


def exact_solver_config() -> LocalSolverConfig:
    """Closed-form solver preset for exactness-dependent runs on quadratics."""
    return LocalSolverConfig(method=SolverMethod.CLOSED_FORM_QUADRATIC,
                             grad_clip_norm=None)


def exact_gd_solver_config(lr: float = 0.5) -> LocalSolverConfig:
    """Damped full-GD preset for near-exact solves on smooth convex losses."""
    return LocalSolverConfig(method=SolverMethod.FULL_GD, lr=lr, tol=1e-9,
                             max_iters=10000, grad_clip_norm=None)


@dataclass
class DeviceObjective:
    """Differentiable objective for one device's local solve.

    ``f(t) = loss(t) - <linear, t> + 0.5 * prox_weight * ||t - prox_center||^2``

    The linear and proximal terms are deterministic, so minibatch gradients
    add them in full at every step.
    """

    model: LossModel
    shard: DataShard
    linear: np.ndarray | None = None
    prox_center: np.ndarray | None = None
    prox_weight: float = 0.0

    def __post_init__(self):
        d = self.model.dim
        for name in ("linear", "prox_center"):
            vec = getattr(self, name)
            if vec is not None and vec.shape != (d,):
                raise ContractError(f"{name} must have shape ({d},)")
        if self.prox_weight < 0:
            raise ContractError("prox_weight must be nonnegative")
        if self.prox_weight > 0 and self.prox_center is None:
            raise ContractError("prox_weight > 0 requires a prox_center")

    @property
    def n_samples(self) -> int:
        return 0 if isinstance(self.model, QuadraticLoss) else self.shard.n

    def value(self, params: np.ndarray) -> float:
        out = self.model.value(params, self.shard)
        if self.linear is not None:
            out -= float(self.linear @ params)
        if self.prox_weight > 0:
            diff = params - self.prox_center
            out += 0.5 * self.prox_weight * float(diff @ diff)
        return out

    def gradient(self, params: np.ndarray) -> np.ndarray:
        return self._with_penalties(self.model.gradient(params, self.shard), params)

    def gradient_at(self, params: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Minibatch gradient over sample indices ``idx`` (full penalties)."""
        if self.n_samples == 0:
            grad = self.model.gradient_arrays(params, None, None)
        else:
            grad = self.model.gradient_arrays(params, self.shard.features[idx],
                                              self.shard.labels[idx])
        return self._with_penalties(grad, params)

    def _with_penalties(self, grad: np.ndarray, params: np.ndarray) -> np.ndarray:
        if self.linear is not None:
            grad -= self.linear
        if self.prox_weight > 0:
            grad += self.prox_weight * (params - self.prox_center)
        return grad


def _clip(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = math.sqrt(float(grad @ grad))
    if norm > max_norm:
        grad *= max_norm / norm
    return grad


def _check_finite(params: np.ndarray, where: str):
    if not np.isfinite(params).all():
        raise DivergenceError(f"non-finite iterate during {where}")


def _run_sgd(objective: DeviceObjective, init: np.ndarray, cfg: LocalSolverConfig,
             rng: np.random.Generator | None, round_index: int) -> np.ndarray:
    lr = cfg.lr * cfg.lr_decay_per_round ** round_index
    theta = init.copy()
    n = objective.n_samples
    clip = cfg.grad_clip_norm
    if n == 0:
        # Data-free objective: one full-gradient step per epoch.
        for _ in range(cfg.epochs):
            grad = _clip(objective.gradient(theta), clip)
            theta -= lr * grad
            _check_finite(theta, "sgd")
        return theta
    if rng is None:
        raise ContractError("SGD over a shard requires an RNG for shuffling")
    batch = min(cfg.batch, n)
    gradient_at = objective.gradient_at
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            grad = _clip(gradient_at(theta, perm[start: start + batch]), clip)
            theta -= lr * grad
        _check_finite(theta, "sgd epoch")
    return theta


def _run_full_gd(objective: DeviceObjective, init: np.ndarray,
                 cfg: LocalSolverConfig) -> np.ndarray:
    theta = init.copy()
    lr = cfg.lr
    value = objective.value(theta)
    for _ in range(cfg.max_iters):
        grad = objective.gradient(theta)
        if math.sqrt(float(grad @ grad)) <= cfg.tol:
            break
        trial = theta - lr * grad
        _check_finite(trial, "full gradient descent")
        trial_value = objective.value(trial)
        if trial_value <= value:
            theta, value = trial, trial_value
            lr = min(lr * 1.25, cfg.lr)
        else:
            lr *= 0.5
            if lr < 1e-18:  # no descent possible at float resolution
                break
    return theta


def _run_closed_form(objective: DeviceObjective) -> np.ndarray:
    model = objective.model
    if not isinstance(model, QuadraticLoss):
        raise ContractError("closed-form solve requires a quadratic loss model")
    shift = model.weight_decay + objective.prox_weight
    lhs = model.scale + shift * np.eye(model.dim)
    rhs = model.scale @ model.center
    if objective.linear is not None:
        rhs = rhs + objective.linear
    if objective.prox_weight > 0:
        rhs = rhs + objective.prox_weight * objective.prox_center
    return np.linalg.solve(lhs, rhs)


def minimize(objective: DeviceObjective, init: np.ndarray, cfg: LocalSolverConfig,
             rng: np.random.Generator | None = None, round_index: int = 0) -> np.ndarray:
    """Run the configured solver and return the final iterate.

    Deterministic given (objective, init, cfg, rng state, round_index).
    """
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (objective.model.dim,):
        raise ContractError(f"init must have shape ({objective.model.dim},)")
    if not np.isfinite(init).all():
        raise ContractError("init must be finite")
    if cfg.method is SolverMethod.SGD:
        result = _run_sgd(objective, init, cfg, rng, round_index)
    elif cfg.method is SolverMethod.FULL_GD:
        result = _run_full_gd(objective, init, cfg)
    else:
        result = _run_closed_form(objective)
    _check_finite(result, cfg.method.value)
    return result
