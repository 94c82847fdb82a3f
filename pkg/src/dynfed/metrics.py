"""Global-loss evaluation, stationarity probes, rate fitting and summaries.

The global empirical loss is the unweighted mean of the per-device losses,
which matches the pooled-data loss only under balanced shards. Stationarity
is the L2 norm of the mean device gradient; it vanishes exactly at global
stationary points regardless of how heterogeneous the devices are.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .localsolve import DeviceObjective, LocalSolverConfig, SolverMethod, minimize
from .losses import ContractError, DataShard, FederatedProblem, LossModel, QuadraticLoss

ROUNDS_CSV_COLUMNS = (
    "round", "train_loss", "test_accuracy", "stationarity_norm",
    "gamma_train_loss", "cumulative_comm_units",
    "avg_train_loss", "avg_test_accuracy", "avg_stationarity_norm",
)


def global_loss(params: np.ndarray, problem: FederatedProblem) -> float:
    """Unweighted mean of the device losses at ``params``."""
    if problem.m == 0:
        raise ContractError("problem has no devices")
    total = 0.0
    for model, shard in zip(problem.models, problem.shards):
        total += model.value(params, shard)
    return total / problem.m


def stationarity_norm(params: np.ndarray, problem: FederatedProblem) -> float:
    """L2 norm of the mean device gradient at ``params``."""
    if problem.m == 0:
        raise ContractError("problem has no devices")
    mean_grad = np.zeros(problem.dim)
    for model, shard in zip(problem.models, problem.shards):
        mean_grad += model.gradient(params, shard)
    mean_grad /= problem.m
    return float(np.linalg.norm(mean_grad))


def accuracy(params: np.ndarray, model: LossModel, shard: DataShard) -> float:
    """Fraction of correct argmax predictions; nan when the shard is empty."""
    if shard is None or shard.n == 0:
        return float("nan")
    try:
        predictions = model.predict(params, shard.features)
    except ContractError:
        return float("nan")
    return float((predictions == shard.labels).mean())


def verify_h_invariant(server, devices, field: str = "grad_cache") -> float:
    """Entrywise max |server control - mean per-device cached vector|.

    Exact in exact-solve runs of the dynamic-regularization family; merely a
    diagnostic (finite but nonzero) under inexact SGD local solves.
    """
    mean_cache = np.mean([getattr(d, field) for d in devices], axis=0)
    return float(np.abs(server.control - mean_cache).max())


def empirical_rate(records, window: tuple[int, int], optimum: float,
                   metric: str = "gamma_train_loss") -> float:
    """Least-squares per-round contraction of the excess loss over a window.

    Fits ``log(metric - optimum)`` against the round index for records inside
    ``window = (first_round, last_round)`` and returns ``exp(slope)``. Records
    whose excess is not positive are dropped (converged below resolution).
    """
    lo, hi = window
    rounds, excesses = [], []
    for record in records:
        if lo <= record.round_index <= hi:
            excess = getattr(record, metric) - optimum
            if excess > 0 and math.isfinite(excess):
                rounds.append(record.round_index)
                excesses.append(excess)
    if len(rounds) < 2:
        raise ContractError("not enough positive-excess records to fit a rate")
    slope = np.polyfit(np.asarray(rounds, dtype=np.float64),
                       np.log(np.asarray(excesses)), 1)[0]
    return float(np.exp(slope))


def quadratic_ensemble_optimum(problem: FederatedProblem) -> tuple[np.ndarray, float]:
    """Analytic minimizer and value of the global loss for quadratic devices."""
    if not all(isinstance(m, QuadraticLoss) for m in problem.models):
        raise ContractError("analytic optimum requires quadratic device losses")
    d = problem.dim
    lhs = np.zeros((d, d))
    rhs = np.zeros(d)
    decay = problem.models[0].weight_decay
    for model in problem.models:
        if model.weight_decay != decay:
            raise ContractError("devices must share one weight decay")
        lhs += model.scale
        rhs += model.scale @ model.center
    lhs = lhs / problem.m + decay * np.eye(d)
    theta = np.linalg.solve(lhs, rhs / problem.m)
    return theta, global_loss(theta, problem)


class _MeanLossObjective:
    """Adapter exposing the global loss to the full-GD solver."""

    def __init__(self, problem: FederatedProblem):
        self.problem = problem
        self.model = problem.models[0]

    def value(self, params):
        return global_loss(params, self.problem)

    def gradient(self, params):
        grads = np.zeros(self.problem.dim)
        for model, shard in zip(self.problem.models, self.problem.shards):
            grads += model.gradient(params, shard)
        return grads / self.problem.m


def numeric_global_optimum(problem: FederatedProblem, init: np.ndarray | None = None,
                           lr: float = 1.0, tol: float = 1e-10,
                           max_iters: int = 200000) -> tuple[np.ndarray, float]:
    """Long damped full-GD oracle for the global optimum of smooth problems."""
    objective = _MeanLossObjective(problem)
    cfg = LocalSolverConfig(method=SolverMethod.FULL_GD, lr=lr, tol=tol,
                            max_iters=max_iters, grad_clip_norm=None)
    if init is None:
        init = np.zeros(problem.dim)
    theta = minimize(objective, init, cfg)
    return theta, global_loss(theta, problem)


@dataclass
class SummaryRow:
    """Comm cost of one (algorithm, setting) pair relative to the FedDyn row."""

    algorithm: str
    setting: str
    target: float
    comm_units: float
    reached: bool
    savings_vs_feddyn: float | None = None  # competitor units / feddyn units

    def ratio_text(self) -> str:
        if self.savings_vs_feddyn is None:
            return ""
        prefix = "" if self.reached else ">"
        return f"{prefix}{self.savings_vs_feddyn:.1f}x"

    def units_text(self) -> str:
        return f"{self.comm_units:g}" if self.reached else f"{self.comm_units:g}+"


def build_summary(setting: str, target: float, costs: dict) -> list[SummaryRow]:
    """Rank method costs against FedDyn's.

    ``costs`` maps algorithm name to a ``(units, reached)`` pair; a method
    that never reached the target contributes its final cumulative units,
    annotated as a lower bound.
    """
    if "feddyn" not in costs:
        raise ContractError("summary requires a feddyn row")
    feddyn_units = costs["feddyn"][0]
    rows = []
    for name, (units, reached) in costs.items():
        ratio = None if name == "feddyn" else units / feddyn_units
        rows.append(SummaryRow(algorithm=name, setting=setting, target=target,
                               comm_units=units, reached=reached,
                               savings_vs_feddyn=ratio))
    return rows


def write_summary_csv(rows, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algorithm", "setting", "target", "comm_units",
                         "reached", "savings_vs_feddyn"])
        for row in rows:
            writer.writerow([row.algorithm, row.setting, repr(float(row.target)),
                             row.units_text(), int(row.reached), row.ratio_text()])


def _fmt(value: float) -> str:
    return repr(float(value))


def write_rounds_csv(records, path: str) -> None:
    """One row per round record, columns in ``ROUNDS_CSV_COLUMNS`` order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUNDS_CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.round_index, _fmt(r.train_loss), _fmt(r.test_accuracy),
                _fmt(r.stationarity_norm), _fmt(r.gamma_train_loss),
                _fmt(r.cumulative_comm_units), _fmt(r.avg_train_loss),
                _fmt(r.avg_test_accuracy), _fmt(r.avg_stationarity_norm),
            ])
