"""Round orchestration: sampling, dispatch, aggregation, accounting.

One experiment runs T rounds of a single strategy over a fixed device
population. Each round samples a constant-size participant set uniformly
without replacement (independently across rounds), fans the active devices
out (optionally across threads), folds the results into the server state in
device-id order, and accrues communication cost.

Communication is accounted in FedAvg-round equivalents: one unit per round
covers a model down and up per active device; SCAFFOLD rounds cost two units
because a control vector rides along in both directions. The cumulative
column therefore reads directly as "models transmitted relative to one
FedAvg round at the same participation".

Replaying a config+seed yields bit-identical records at any worker count:
all randomness flows through named streams keyed by (seed, round, device).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import rng as rngs
from .algorithms import AlgorithmConfig, init_states, make_strategy
from .datagen import (
    FederatedDataset,
    SyntheticConfig,
    generate_synthetic,
    load_csv_pool,
    partition_dirichlet,
    partition_iid,
    sample_unbalanced_sizes,
)
from .localsolve import DivergenceError
from .losses import (
    ContractError,
    FederatedProblem,
    MulticlassLogisticLoss,
    TwoLayerMlpLoss,
)
from .metrics import accuracy, global_loss, stationarity_norm


class ReportMode(Enum):
    SERVER_MODEL = "server"
    ALL_DEVICE_AVERAGE = "avg"
    BOTH = "both"


@dataclass
class ModelSettings:
    """Loss family used on top of a generated or ingested dataset."""

    kind: str = "logistic"  # logistic | mlp
    hidden: int = 16
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ContractError(f"unknown model kind '{self.kind}'")
        if self.hidden < 1 or self.weight_decay < 0:
            raise ContractError("hidden >= 1 and weight_decay >= 0 required")


@dataclass
class DataSettings:
    """Dataset source plus partition spec for CSV pools."""

    source: str = "synthetic"  # synthetic | csv
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    features_csv: str = ""
    labels_csv: str = ""
    test_features_csv: str = ""
    test_labels_csv: str = ""
    devices: int = 20
    partition: str = "iid"  # iid | dirichlet
    dirichlet_prior: float = 0.3
    unbalanced_sigma: float = 0.0
    model: ModelSettings = field(default_factory=ModelSettings)

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ContractError(f"unknown data source '{self.source}'")
        if self.partition not in ("iid", "dirichlet"):
            raise ContractError(f"unknown partition '{self.partition}'")
        if self.dirichlet_prior <= 0:
            raise ContractError("dirichlet_prior must be positive")
        if self.unbalanced_sigma < 0:
            raise ContractError("unbalanced_sigma must be nonnegative")
        if self.partition == "dirichlet" and self.unbalanced_sigma > 0:
            raise ContractError("unbalanced sizes combine only with the iid partition")

    @property
    def m(self) -> int:
        return self.synthetic.m if self.source == "synthetic" else self.devices


def build_dataset(data: DataSettings, seed: int) -> FederatedDataset:
    if data.source == "synthetic":
        cfg = replace(data.synthetic, seed=seed)
        return generate_synthetic(cfg)
    features, labels = load_csv_pool(data.features_csv, data.labels_csv)
    test_features = test_labels = None
    if data.test_features_csv:
        test_features, test_labels = load_csv_pool(data.test_features_csv,
                                                   data.test_labels_csv)
    if data.partition == "dirichlet":
        return partition_dirichlet(features, labels, data.devices,
                                   data.dirichlet_prior, seed,
                                   test_features=test_features, test_labels=test_labels)
    sizes = None
    if data.unbalanced_sigma > 0:
        sizes = sample_unbalanced_sizes(data.devices, data.unbalanced_sigma,
                                        features.shape[0], seed)
    return partition_iid(features, labels, data.devices, seed, sizes=sizes,
                         test_features=test_features, test_labels=test_labels)


def build_problem(data: DataSettings, seed: int) -> tuple[FederatedProblem, FederatedDataset]:
    """Materialize the dataset and wrap it with the configured loss model."""
    dataset = build_dataset(data, seed)
    p = dataset.shards[0].p
    n_classes = int(max(int(s.labels.max(initial=0)) for s in dataset.shards)) + 1
    if data.source == "synthetic":
        n_classes = max(n_classes, data.synthetic.n_classes)
    model_cfg = data.model
    if model_cfg.kind == "logistic":
        model = MulticlassLogisticLoss(p, n_classes, model_cfg.weight_decay)
    else:
        model = TwoLayerMlpLoss(p, model_cfg.hidden, n_classes, model_cfg.weight_decay)
    problem = FederatedProblem(models=[model] * dataset.m, shards=list(dataset.shards),
                               test=dataset.test)
    return problem, dataset


@dataclass
class ExperimentConfig:
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    data: DataSettings | None = None
    rounds: int = 100
    participation: float = 1.0
    eval_every: int = 1
    seed: int = 0
    report_mode: ReportMode = ReportMode.BOTH
    workers: int = 1
    name: str = "run"

    def __post_init__(self):
        if isinstance(self.report_mode, str):
            self.report_mode = ReportMode(self.report_mode)
        if self.rounds < 1:
            raise ContractError("rounds must be >= 1")
        if self.eval_every < 1:
            raise ContractError("eval_every must be >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise ContractError("participation must yield >= 1 device (0 < p <= 1)")
        if self.workers < 1:
            raise ContractError("workers must be >= 1")

    def participants_per_round(self, m: int) -> int:
        p = max(1, int(round(self.participation * m)))
        if p > m:
            raise ContractError("participation exceeds the device count")
        return p


@dataclass
class RoundRecord:
    """Metrics captured at one evaluation point.

    ``train_loss`` / ``test_accuracy`` / ``stationarity_norm`` refer to the
    server model; the ``avg_*`` triple refers to the all-device average model.
    Fields not selected by the report mode hold nan. ``gamma_train_loss`` is
    the global loss at the round's active-device average and is always
    recorded.
    """

    round_index: int
    train_loss: float = float("nan")
    test_accuracy: float = float("nan")
    stationarity_norm: float = float("nan")
    gamma_train_loss: float = float("nan")
    cumulative_comm_units: float = 0.0
    avg_train_loss: float = float("nan")
    avg_test_accuracy: float = float("nan")
    avg_stationarity_norm: float = float("nan")


@dataclass
class ExperimentResult:
    records: list
    server: object
    devices: list
    problem: FederatedProblem
    config: ExperimentConfig
    participants_per_round: int


class ExperimentDiverged(RuntimeError):
    """A device solve diverged; carries the flushed records so far."""

    def __init__(self, cause: DivergenceError, records, round_index: int, device_id):
        super().__init__(f"round {round_index}, device {device_id}: {cause}")
        self.records = records
        self.round_index = round_index
        self.device_id = device_id


def sample_participants(m: int, P: int, round_index: int, seed: int) -> np.ndarray:
    """Uniform sample of P device ids without replacement, sorted.

    Deterministic per (seed, round); independent across rounds.
    """
    if not 1 <= P <= m:
        raise ContractError(f"need 1 <= P <= m, got P={P}, m={m}")
    rng = rngs.stream(seed, rngs.TAG_PARTICIPATION, round_index)
    return np.sort(rng.choice(m, size=P, replace=False))


def _evaluate(cfg: ExperimentConfig, problem: FederatedProblem, server, devices,
              gamma: np.ndarray, round_index: int, comm: float) -> RoundRecord:
    record = RoundRecord(round_index=round_index, cumulative_comm_units=comm,
                         gamma_train_loss=global_loss(gamma, problem))
    test_shard = problem.test
    eval_model = problem.models[0]
    if cfg.report_mode in (ReportMode.SERVER_MODEL, ReportMode.BOTH):
        record.train_loss = global_loss(server.model, problem)
        record.test_accuracy = accuracy(server.model, eval_model, test_shard)
        record.stationarity_norm = stationarity_norm(server.model, problem)
    if cfg.report_mode in (ReportMode.ALL_DEVICE_AVERAGE, ReportMode.BOTH):
        avg_model = np.mean([d.model for d in devices], axis=0)
        record.avg_train_loss = global_loss(avg_model, problem)
        record.avg_test_accuracy = accuracy(avg_model, eval_model, test_shard)
        record.avg_stationarity_norm = stationarity_norm(avg_model, problem)
    return record


def run_experiment(cfg: ExperimentConfig, problem: FederatedProblem | None = None,
                   on_round=None, stop_when=None) -> ExperimentResult:
    """Execute T rounds of the configured strategy.

    ``problem`` may be passed directly (quadratic ensembles, prebuilt data);
    otherwise it is built from ``cfg.data``. ``on_round(round_index, server,
    devices, active_ids)`` is invoked after every server update, for probes.
    ``stop_when(record)`` may end the run early once an evaluation record
    satisfies it (budget-limited searches); the records collected so far are
    returned unchanged.
    """
    if problem is None:
        if cfg.data is None:
            raise ContractError("run_experiment needs a problem or data settings")
        problem, _ = build_problem(cfg.data, cfg.seed)
    m = problem.m
    P = cfg.participants_per_round(m)
    strategy = make_strategy(cfg.algorithm)

    theta0 = problem.models[0].init_params(rngs.stream(cfg.seed, rngs.TAG_INIT))
    server, devices = init_states(theta0, m)

    comm = 0.0
    records = [_evaluate(cfg, problem, server, devices, theta0, 0, comm)]

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            active = sample_participants(m, P, t, cfg.seed)

            def job(k: int):
                rng = rngs.stream(cfg.seed, rngs.TAG_SOLVER, t, k)
                try:
                    return strategy.device_step(devices[k], server, problem.models[k],
                                                problem.shards[k], rng, t)
                except DivergenceError as err:
                    raise DivergenceError(str(err), round_index=t, device_id=k) from err

            try:
                if pool is None:
                    results = {k: job(k) for k in active}
                else:
                    futures = {k: pool.submit(job, int(k)) for k in active}
                    results = {k: f.result() for k, f in futures.items()}
            except DivergenceError as err:
                raise ExperimentDiverged(err, records, t, err.device_id) from err

            payloads = []
            for k in active:  # fixed device-id order, independent of scheduling
                new_state, payload = results[k]
                devices[k] = replace(new_state, last_active_round=t)
                payloads.append(payload)
            server = strategy.server_step(server, payloads, m)
            comm += strategy.comm_units_per_round
            gamma = np.mean([devices[k].model for k in active], axis=0)

            if on_round is not None:
                on_round(t, server, devices, active)
            if t % cfg.eval_every == 0 or t == cfg.rounds:
                record = _evaluate(cfg, problem, server, devices, gamma, t, comm)
                records.append(record)
                if stop_when is not None and stop_when(record):
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    return ExperimentResult(records=records, server=server, devices=devices,
                            problem=problem, config=cfg, participants_per_round=P)


@dataclass
class CommCost:
    """Cumulative communication units at the first record meeting a target.

    When the target was never met, ``units`` carries the run's final
    cumulative value and ``reached`` is False (a lower bound, rendered with a
    trailing plus).
    """

    units: float
    reached: bool
    round_index: int | None = None

    def __str__(self):
        text = f"{self.units:g}"
        return text if self.reached else text + "+"


_LOSS_METRICS = {"train_loss", "avg_train_loss", "gamma_train_loss"}
_ACCURACY_METRICS = {"test_accuracy", "avg_test_accuracy"}


def rounds_to_target(records, target: float, metric: str = "test_accuracy") -> CommCost:
    """Communication cost to the first record at or beyond the target.

    Accuracy metrics count as reached at ``value >= target``; loss metrics at
    ``value <= target``. Records whose metric is nan are skipped.
    """
    if not records:
        raise ContractError("records must be nonempty")
    if metric in _ACCURACY_METRICS:
        met = lambda v: v >= target
    elif metric in _LOSS_METRICS:
        met = lambda v: v <= target
    else:
        raise ContractError(f"unknown metric '{metric}'")
    for record in records:
        value = getattr(record, metric)
        if not math.isnan(value) and met(value):
            return CommCost(units=record.cumulative_comm_units, reached=True,
                            round_index=record.round_index)
    return CommCost(units=records[-1].cumulative_comm_units, reached=False)
