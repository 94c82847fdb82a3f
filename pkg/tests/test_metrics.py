import numpy as np
import pytest

from dynfed.algorithms import AlgorithmConfig, AlgorithmKind
from dynfed.localsolve import LocalSolverConfig, SolverMethod
from dynfed.losses import (
    ContractError,
    DataShard,
    FederatedProblem,
    MulticlassLogisticLoss,
    QuadraticLoss,
    quadratic_ensemble,
)
from dynfed.metrics import (
    SummaryRow,
    accuracy,
    build_summary,
    empirical_rate,
    global_loss,
    numeric_global_optimum,
    quadratic_ensemble_optimum,
    stationarity_norm,
    verify_h_invariant,
)
from dynfed.simulator import ExperimentConfig, run_experiment

EXACT = LocalSolverConfig(method=SolverMethod.CLOSED_FORM_QUADRATIC, grad_clip_norm=None)


def exact_feddyn_config(alpha, rounds, participation=1.0, seed=0):
    return ExperimentConfig(
        algorithm=AlgorithmConfig(kind=AlgorithmKind.FEDDYN, alpha=alpha, solver=EXACT),
        rounds=rounds, participation=participation, seed=seed)


class TestGlobalLoss:
    def test_single_device_equals_device_loss(self):
        prob = quadratic_ensemble([[2.0]])
        theta = np.array([0.5])
        assert global_loss(theta, prob) == prob.models[0].value(theta)

    def test_two_quadratics_hand_value(self):
        prob = quadratic_ensemble([[1.0], [-1.0]])
        assert global_loss(np.zeros(1), prob) == pytest.approx(0.5)

    def test_balanced_shards_match_pooled_loss(self):
        rng = np.random.default_rng(0)
        model = MulticlassLogisticLoss(n_features=3, n_classes=3)
        X, y = rng.normal(size=(40, 3)), rng.integers(0, 3, 40)
        shards = [DataShard(X[i::4], y[i::4]) for i in range(4)]
        prob = FederatedProblem(models=[model] * 4, shards=shards)
        params = rng.normal(size=model.dim)
        pooled = model.value(params, DataShard(X, y))
        assert global_loss(params, prob) == pytest.approx(pooled, abs=1e-12)


class TestStationarity:
    def test_zero_at_analytic_minimizer(self):
        rng = np.random.default_rng(1)
        prob = quadratic_ensemble([rng.normal(size=3) for _ in range(5)],
                                  scales=[np.diag(rng.uniform(0.5, 2, 3)) for _ in range(5)])
        theta_star, _ = quadratic_ensemble_optimum(prob)
        assert stationarity_norm(theta_star, prob) <= 1e-12

    def test_mean_of_minimizers_with_unequal_curvatures(self):
        # S1 = I, S2 = 2I, centers +-1: the global minimum sits at -1/3, while
        # the gradient at the mean of local minimizers (0) has norm 1/2.
        prob = quadratic_ensemble([[1.0], [-1.0]], scales=[1.0, 2.0])
        theta_star, _ = quadratic_ensemble_optimum(prob)
        assert theta_star[0] == pytest.approx(-1.0 / 3.0)
        assert stationarity_norm(theta_star, prob) <= 1e-14
        assert stationarity_norm(np.zeros(1), prob) == pytest.approx(0.5)

    def test_matches_mean_gradient_on_logistic(self):
        rng = np.random.default_rng(2)
        model = MulticlassLogisticLoss(n_features=2, n_classes=3)
        shards = [DataShard(rng.normal(size=(9, 2)), rng.integers(0, 3, 9))
                  for _ in range(3)]
        prob = FederatedProblem(models=[model] * 3, shards=shards)
        params = rng.normal(size=model.dim)
        direct = np.mean([model.gradient(params, s) for s in shards], axis=0)
        assert stationarity_norm(params, prob) == pytest.approx(np.linalg.norm(direct))


class TestAccuracy:
    def test_tie_breaks_toward_smallest_class(self):
        model = MulticlassLogisticLoss(n_features=1, n_classes=3, weight_decay=0.0)
        shard = DataShard([[1.0], [2.0]], [0, 1])
        # Zero parameters give equal logits everywhere: argmax picks class 0.
        assert accuracy(np.zeros(model.dim), model, shard) == pytest.approx(0.5)

    def test_empty_shard_is_nan(self):
        model = MulticlassLogisticLoss(n_features=1, n_classes=2)
        assert np.isnan(accuracy(np.zeros(model.dim), model, DataShard.empty(1)))


class TestHInvariant:
    def test_zero_at_initialization(self):
        from dynfed.algorithms import init_states
        server, devices = init_states(np.zeros(4), 5)
        assert verify_h_invariant(server, devices) == 0.0

    def test_exact_run_with_partial_participation(self):
        rng = np.random.default_rng(3)
        prob = quadratic_ensemble([rng.normal(size=2) for _ in range(10)])
        worst = []

        def probe(t, server, devices, active):
            worst.append(verify_h_invariant(server, devices))

        run_experiment(exact_feddyn_config(alpha=1.0, rounds=50, participation=0.2),
                       problem=prob, on_round=probe)
        assert max(worst) <= 1e-10

    def test_sgd_run_reports_finite_value(self):
        rng = np.random.default_rng(4)
        model = MulticlassLogisticLoss(n_features=2, n_classes=2)
        shards = [DataShard(rng.normal(size=(12, 2)), rng.integers(0, 2, 12))
                  for _ in range(4)]
        prob = FederatedProblem(models=[model] * 4, shards=shards)
        sgd = LocalSolverConfig(method=SolverMethod.SGD, lr=0.1, epochs=2, batch=4)
        cfg = ExperimentConfig(
            algorithm=AlgorithmConfig(kind=AlgorithmKind.FEDDYN, alpha=0.1, solver=sgd),
            rounds=5, seed=1)
        result = run_experiment(cfg, problem=prob)
        value = verify_h_invariant(result.server, result.devices)
        assert np.isfinite(value)


class TestEmpiricalRate:
    def _ensemble(self, rng, m=8, d=6):
        centers = [rng.normal(size=d) * 0.5 for _ in range(m)]
        scales = []
        for _ in range(m):
            q, _ = np.linalg.qr(rng.normal(size=(d, d)))
            scales.append(q @ np.diag(rng.uniform(1.0, 1.5, d)) @ q.T)
        return quadratic_ensemble(centers, scales)

    def test_exact_feddyn_contracts_within_guarantee(self):
        rng = np.random.default_rng(5)
        prob = self._ensemble(rng)
        mu = min(m.mu for m in prob.models)
        alpha = 10.0
        _, loss_star = quadratic_ensemble_optimum(prob)
        result = run_experiment(exact_feddyn_config(alpha=alpha, rounds=60), problem=prob)
        contraction = empirical_rate(result.records, window=(10, 60), optimum=loss_star)
        assert contraction <= 1.0 - 0.5 * mu / (mu + alpha)

    def test_fedavg_plateau_has_unit_contraction(self):
        prob = quadratic_ensemble([[1.0], [-1.0]], scales=[1.0, 2.0])
        _, loss_star = quadratic_ensemble_optimum(prob)
        cfg = ExperimentConfig(
            algorithm=AlgorithmConfig(kind=AlgorithmKind.FEDAVG, solver=EXACT),
            rounds=40, seed=0)
        result = run_experiment(cfg, problem=prob)
        contraction = empirical_rate(result.records, window=(20, 40), optimum=loss_star)
        assert contraction > 0.995

    def test_identical_devices_converge_in_one_exact_round(self):
        # With one shared device loss and alpha far below the curvature, the
        # first exact solve already lands on the optimum.
        center = np.array([1.5, -0.5])
        prob = quadratic_ensemble([center.copy() for _ in range(6)])
        _, loss_star = quadratic_ensemble_optimum(prob)
        result = run_experiment(exact_feddyn_config(alpha=1e-7, rounds=2), problem=prob)
        first = next(r for r in result.records if r.round_index == 1)
        assert first.gamma_train_loss - loss_star <= 1e-12

    def test_rejects_exhausted_window(self):
        result = run_experiment(exact_feddyn_config(alpha=1e-7, rounds=3),
                                problem=quadratic_ensemble([[1.0], [1.0]]))
        with pytest.raises(ContractError):
            empirical_rate(result.records, window=(2, 3), optimum=0.25)


def test_numeric_global_optimum_matches_analytic_on_quadratics():
    rng = np.random.default_rng(6)
    prob = quadratic_ensemble([rng.normal(size=3) for _ in range(4)],
                              scales=[np.diag(rng.uniform(0.5, 2, 3)) for _ in range(4)])
    theta_a, loss_a = quadratic_ensemble_optimum(prob)
    theta_n, loss_n = numeric_global_optimum(prob, tol=1e-12)
    np.testing.assert_allclose(theta_n, theta_a, atol=1e-9)
    assert loss_n == pytest.approx(loss_a, abs=1e-12)


def test_summary_ratios_reproduce_units():
    costs = {"feddyn": (34.0, True), "scaffold": (260.0, True),
             "fedavg": (79.0, True), "fedprox": (120.0, False)}
    rows = build_summary("type3", target=0.0854, costs=costs)
    by_name = {r.algorithm: r for r in rows}
    assert by_name["feddyn"].savings_vs_feddyn is None
    for name in ("scaffold", "fedavg"):
        row = by_name[name]
        assert row.savings_vs_feddyn * 34.0 == pytest.approx(row.comm_units, abs=0.5)
    assert by_name["fedprox"].ratio_text().startswith(">")
    assert by_name["fedprox"].units_text().endswith("+")
    with pytest.raises(ContractError):
        build_summary("x", 0.0, {"fedavg": (1.0, True)})
