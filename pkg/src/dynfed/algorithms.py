"""Round-level device and server update rules.

Five strategies sit behind one interface: FedDyn (dynamically regularized
exact/inexact local minimization), its one-gradient-step variant, FedAvg,
FedProx and SCAFFOLD. Device updates are pure functions of the incoming
states, so rounds may fan out across workers; server aggregation is a single
sequential step that consumes payloads in fixed device-id order.

FedDyn device round: minimize

    ``L_k(t) - <grad_cache, t> + (alpha / 2) * ||t - server_model||^2``

then advance the cached gradient by the first-order condition,
``grad_cache <- grad_cache - alpha * (t_new - server_model)``. The server
keeps a running state equal (for exact solves) to the mean cached gradient
and subtracts it, scaled by ``1/alpha``, from the active-device average.

SCAFFOLD follows the option-II control-variate convention of its original
description (client control updated from the realized displacement); it
transmits a model and a control vector each way, so its rounds cost twice
the communication of the other methods.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .localsolve import (
    DeviceObjective,
    DivergenceError,
    LocalSolverConfig,
    SolverMethod,
    minimize,
)
from .losses import ContractError, DataShard, LossModel


class AlgorithmKind(Enum):
    FEDDYN = "feddyn"
    FEDDYN_ONESTEP = "feddyn_onestep"
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    SCAFFOLD = "scaffold"


DYN_REG_FAMILY = (AlgorithmKind.FEDDYN, AlgorithmKind.FEDDYN_ONESTEP)


@dataclass
class AlgorithmConfig:
    kind: AlgorithmKind = AlgorithmKind.FEDDYN
    alpha: float = 0.01
    mu_prox: float = 1e-4
    scaffold_steps: int | None = None  # None: epochs * ceil(n / batch) per device
    solver: LocalSolverConfig = field(default_factory=LocalSolverConfig)

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = AlgorithmKind(self.kind)
        if self.kind in DYN_REG_FAMILY and self.alpha <= 0:
            raise ContractError(f"{self.kind.value} requires alpha > 0")
        if self.mu_prox < 0:
            raise ContractError("mu_prox must be nonnegative")
        if self.scaffold_steps is not None and self.scaffold_steps < 1:
            raise ContractError("scaffold_steps must be >= 1")

    @property
    def comm_units_per_round(self) -> float:
        """Round cost relative to a FedAvg round at the same participation."""
        return 2.0 if self.kind is AlgorithmKind.SCAFFOLD else 1.0


@dataclass
class DeviceState:
    """Persistent per-device state.

    ``model`` is the last local model, ``grad_cache`` the cached local
    gradient the FedDyn family maintains recursively, and ``control`` the
    per-device control vector (one-step state or SCAFFOLD client control).
    A device never activated keeps its initialization unchanged.
    """

    model: np.ndarray
    grad_cache: np.ndarray
    control: np.ndarray
    last_active_round: int = -1


@dataclass
class ServerState:
    """Server model plus the running control state (zero-initialized)."""

    model: np.ndarray
    control: np.ndarray
    round_index: int = 0


def init_states(theta0: np.ndarray, m: int) -> tuple[ServerState, list[DeviceState]]:
    """Zero control/cache states with every device at the server model."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    d = theta0.shape[0]
    server = ServerState(model=theta0.copy(), control=np.zeros(d))
    devices = [DeviceState(model=theta0.copy(), grad_cache=np.zeros(d),
                           control=np.zeros(d)) for _ in range(m)]
    return server, devices


def _check_state_finite(vectors, round_index=None, device_id=None):
    for vec in vectors:
        if not np.isfinite(vec).all():
            raise DivergenceError("device update produced non-finite state",
                                  round_index=round_index, device_id=device_id)


def feddyn_device_update(state: DeviceState, server_model: np.ndarray,
                         model: LossModel, shard: DataShard, alpha: float,
                         solver: LocalSolverConfig,
                         rng: np.random.Generator | None = None,
                         round_index: int = 0) -> DeviceState:
    """Solve the dynamically regularized local objective, advance the cache."""
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    objective = DeviceObjective(model=model, shard=shard, linear=state.grad_cache,
                                prox_center=server_model, prox_weight=alpha)
    theta = minimize(objective, server_model, solver, rng=rng, round_index=round_index)
    grad_cache = state.grad_cache - alpha * (theta - server_model)
    _check_state_finite([theta, grad_cache], round_index)
    return DeviceState(model=theta, grad_cache=grad_cache, control=state.control,
                       last_active_round=round_index)


def feddyn_server_update(server: ServerState, returned: list[np.ndarray],
                         m: int, alpha: float) -> ServerState:
    """Shift the server state by the active displacements, then average.

    ``control <- control - (alpha / m) * sum_k (theta_k - model_old)`` and
    ``model <- mean(theta_k) - control / alpha``. An empty active set leaves
    the server unchanged (the caller records the no-op).
    """
    if not returned:
        return replace(server, round_index=server.round_index + 1)
    stacked = np.stack(returned)
    control = server.control - alpha / m * (stacked - server.model).sum(axis=0)
    model = stacked.mean(axis=0) - control / alpha
    return ServerState(model=model, control=control, round_index=server.round_index + 1)


def feddyn_onestep_device_update(state: DeviceState, server_model: np.ndarray,
                                 model: LossModel, shard: DataShard, alpha: float,
                                 round_index: int = 0) -> DeviceState:
    """Single gradient step preconditioned by the device control state.

    ``theta <- server - (grad L_k(server) - control) / alpha`` followed by
    ``control <- control - alpha * (theta - server)``, which lands the
    control exactly on ``grad L_k(server)``.
    """
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    grad = model.gradient(server_model, shard)
    theta = server_model - (grad - state.control) / alpha
    control = state.control - alpha * (theta - server_model)
    _check_state_finite([theta, control], round_index)
    return DeviceState(model=theta, grad_cache=state.grad_cache, control=control,
                       last_active_round=round_index)


def fedavg_device_update(state: DeviceState, server_model: np.ndarray,
                         model: LossModel, shard: DataShard,
                         solver: LocalSolverConfig,
                         rng: np.random.Generator | None = None,
                         round_index: int = 0) -> DeviceState:
    """Run the local solver on the plain device loss from the server model."""
    objective = DeviceObjective(model=model, shard=shard)
    theta = minimize(objective, server_model, solver, rng=rng, round_index=round_index)
    _check_state_finite([theta], round_index)
    return DeviceState(model=theta, grad_cache=state.grad_cache, control=state.control,
                       last_active_round=round_index)


def fedprox_device_update(state: DeviceState, server_model: np.ndarray,
                          model: LossModel, shard: DataShard, mu_prox: float,
                          solver: LocalSolverConfig,
                          rng: np.random.Generator | None = None,
                          round_index: int = 0) -> DeviceState:
    """Local solve of the loss plus a proximal pull toward the server model."""
    if mu_prox < 0:
        raise ContractError("mu_prox must be nonnegative")
    objective = DeviceObjective(model=model, shard=shard, prox_center=server_model,
                                prox_weight=mu_prox)
    theta = minimize(objective, server_model, solver, rng=rng, round_index=round_index)
    _check_state_finite([theta], round_index)
    return DeviceState(model=theta, grad_cache=state.grad_cache, control=state.control,
                       last_active_round=round_index)


def fedavg_server_update(server: ServerState, returned: list[np.ndarray]) -> ServerState:
    if not returned:
        return replace(server, round_index=server.round_index + 1)
    model = np.stack(returned).mean(axis=0)
    return ServerState(model=model, control=server.control,
                       round_index=server.round_index + 1)


def scaffold_device_update(state: DeviceState, server_model: np.ndarray,
                           server_control: np.ndarray, model: LossModel,
                           shard: DataShard, solver: LocalSolverConfig, steps: int,
                           rng: np.random.Generator | None = None,
                           round_index: int = 0):
    """K corrected SGD steps plus the option-II client-control update.

    Each step follows ``grad_batch - control_k + control_server``; afterwards
    ``control_k <- control_k - control_server +
    (server_model - theta_final) / (steps * lr)``. Returns the new state, the
    model delta and the control delta; the pair of transmitted vectors is why
    a SCAFFOLD round costs two communication units.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    lr = solver.lr * solver.lr_decay_per_round ** round_index
    correction = state.control - server_control
    # The correction enters each step as a linear term on the objective.
    step_cfg = LocalSolverConfig(method=SolverMethod.SGD, lr=lr, epochs=1,
                                 batch=solver.batch,
                                 grad_clip_norm=solver.grad_clip_norm)
    objective = DeviceObjective(model=model, shard=shard, linear=correction)
    theta = server_model.copy()
    n = objective.n_samples
    if n == 0:
        for _ in range(steps):
            theta = minimize(objective, theta, step_cfg)
    else:
        if rng is None:
            raise ContractError("SCAFFOLD over a shard requires an RNG")
        batch = min(solver.batch, n)
        done = 0
        while done < steps:
            perm = rng.permutation(n)
            for start in range(0, n, batch):
                grad = objective.gradient_at(theta, perm[start: start + batch])
                if solver.grad_clip_norm is not None:
                    norm = float(np.sqrt(grad @ grad))
                    if norm > solver.grad_clip_norm:
                        grad *= solver.grad_clip_norm / norm
                theta = theta - lr * grad
                done += 1
                if done >= steps:
                    break
    control = state.control - server_control + (server_model - theta) / (steps * lr)
    _check_state_finite([theta, control], round_index)
    new_state = DeviceState(model=theta, grad_cache=state.grad_cache, control=control,
                            last_active_round=round_index)
    return new_state, theta - server_model, control - state.control


def scaffold_server_update(server: ServerState, model_deltas: list[np.ndarray],
                           control_deltas: list[np.ndarray], m: int) -> ServerState:
    """Apply the mean model delta and the 1/m-weighted control deltas."""
    if not model_deltas:
        return replace(server, round_index=server.round_index + 1)
    model = server.model + np.stack(model_deltas).mean(axis=0)
    control = server.control + np.stack(control_deltas).sum(axis=0) / m
    return ServerState(model=model, control=control,
                       round_index=server.round_index + 1)


class Strategy:
    """Uniform round interface driven by the simulator.

    ``device_step`` consumes one device's state and returns the new state plus
    an opaque payload; ``server_step`` folds the payloads (in device-id order)
    into the server state.
    """

    def __init__(self, cfg: AlgorithmConfig):
        self.cfg = cfg

    @property
    def comm_units_per_round(self) -> float:
        return self.cfg.comm_units_per_round

    def device_step(self, state, server, model, shard, rng, round_index):
        raise NotImplementedError

    def server_step(self, server, payloads, m):
        raise NotImplementedError


class _FedDynStrategy(Strategy):
    def device_step(self, state, server, model, shard, rng, round_index):
        new = feddyn_device_update(state, server.model, model, shard,
                                   self.cfg.alpha, self.cfg.solver, rng, round_index)
        return new, new.model

    def server_step(self, server, payloads, m):
        return feddyn_server_update(server, payloads, m, self.cfg.alpha)


class _FedDynOneStepStrategy(Strategy):
    def device_step(self, state, server, model, shard, rng, round_index):
        new = feddyn_onestep_device_update(state, server.model, model, shard,
                                           self.cfg.alpha, round_index)
        return new, new.model

    def server_step(self, server, payloads, m):
        return feddyn_server_update(server, payloads, m, self.cfg.alpha)


class _FedAvgStrategy(Strategy):
    def device_step(self, state, server, model, shard, rng, round_index):
        new = fedavg_device_update(state, server.model, model, shard,
                                   self.cfg.solver, rng, round_index)
        return new, new.model

    def server_step(self, server, payloads, m):
        return fedavg_server_update(server, payloads)


class _FedProxStrategy(Strategy):
    def device_step(self, state, server, model, shard, rng, round_index):
        new = fedprox_device_update(state, server.model, model, shard,
                                    self.cfg.mu_prox, self.cfg.solver, rng, round_index)
        return new, new.model

    def server_step(self, server, payloads, m):
        return fedavg_server_update(server, payloads)


class _ScaffoldStrategy(Strategy):
    def _steps_for(self, shard: DataShard) -> int:
        if self.cfg.scaffold_steps is not None:
            return self.cfg.scaffold_steps
        solver = self.cfg.solver
        per_epoch = max(1, -(-shard.n // solver.batch)) if shard.n else 1
        return solver.epochs * per_epoch

    def device_step(self, state, server, model, shard, rng, round_index):
        new, d_model, d_control = scaffold_device_update(
            state, server.model, server.control, model, shard, self.cfg.solver,
            self._steps_for(shard), rng, round_index)
        return new, (d_model, d_control)

    def server_step(self, server, payloads, m):
        model_deltas = [p[0] for p in payloads]
        control_deltas = [p[1] for p in payloads]
        return scaffold_server_update(server, model_deltas, control_deltas, m)


_STRATEGIES = {
    AlgorithmKind.FEDDYN: _FedDynStrategy,
    AlgorithmKind.FEDDYN_ONESTEP: _FedDynOneStepStrategy,
    AlgorithmKind.FEDAVG: _FedAvgStrategy,
    AlgorithmKind.FEDPROX: _FedProxStrategy,
    AlgorithmKind.SCAFFOLD: _ScaffoldStrategy,
}


def make_strategy(cfg: AlgorithmConfig) -> Strategy:
    return _STRATEGIES[cfg.kind](cfg)
