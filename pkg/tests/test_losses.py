import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynfed.losses import (
    ContractError,
    DataShard,
    MulticlassLogisticLoss,
    QuadraticLoss,
    TwoLayerMlpLoss,
    fd_gradient_check,
    loss_gradient,
    loss_value,
    quadratic_ensemble,
)


def scalar_logistic_loss(W, b, X, y, weight_decay):
    """Independent softmax cross-entropy oracle, scalar loops only."""
    n, C = len(y), len(b)
    total = 0.0
    for j in range(n):
        logits = []
        for c in range(C):
            z = b[c]
            for k in range(len(X[j])):
                z += W[c][k] * X[j][k]
            logits.append(z)
        mx = max(logits)
        lse = mx + math.log(sum(math.exp(z - mx) for z in logits))
        total += lse - logits[y[j]]
    decay = 0.0
    for row in W:
        for w in row:
            decay += w * w
    for v in b:
        decay += v * v
    return total / n + 0.5 * weight_decay * decay


def seeded_shard(rng, n, p, C):
    return DataShard(rng.normal(size=(n, p)), rng.integers(0, C, size=n))


class TestQuadratic:
    def test_value_at_own_minimizer(self):
        model = QuadraticLoss(center=np.zeros(3))
        assert loss_value(model, np.zeros(3)) == 0.0

    def test_gradient_is_displacement(self):
        model = QuadraticLoss(center=[1.0, 2.0])
        np.testing.assert_allclose(loss_gradient(model, np.zeros(2)), [-1.0, -2.0])

    def test_curvature_constants(self):
        S = np.diag([0.5, 3.0])
        model = QuadraticLoss(center=np.zeros(2), scale=S, weight_decay=0.1)
        assert model.mu == pytest.approx(0.6)
        assert model.smoothness == pytest.approx(3.1)

    def test_rejects_indefinite_scale(self):
        with pytest.raises(ContractError):
            QuadraticLoss(center=np.zeros(2), scale=np.diag([1.0, -1.0]))

    def test_fd_check_near_roundoff(self):
        rng = np.random.default_rng(3)
        A = rng.normal(size=(4, 4))
        model = QuadraticLoss(center=rng.normal(size=4), scale=A @ A.T, weight_decay=0.01)
        assert fd_gradient_check(model, rng.normal(size=4), step=1e-6) <= 1e-9

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_smoothness_bound(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(3, 3))
        model = QuadraticLoss(center=rng.normal(size=3), scale=A @ A.T, weight_decay=0.05)
        x, y = rng.normal(size=3), rng.normal(size=3)
        lhs = np.linalg.norm(model.gradient(x) - model.gradient(y))
        assert lhs <= model.smoothness * np.linalg.norm(x - y) + 1e-12

    def test_weight_decay_only_gradient(self):
        model = QuadraticLoss(center=np.zeros(3), scale=0.0, weight_decay=0.25)
        theta = np.array([1.0, -2.0, 4.0])
        np.testing.assert_array_equal(loss_gradient(model, theta), 0.25 * theta)


class TestLogistic:
    def test_uniform_softmax_single_sample(self):
        model = MulticlassLogisticLoss(n_features=1, n_classes=2, weight_decay=0.0)
        shard = DataShard([[1.0]], [0])
        assert loss_value(model, np.zeros(model.dim), shard) == pytest.approx(math.log(2.0))

    def test_value_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        model = MulticlassLogisticLoss(n_features=2, n_classes=3, weight_decay=1e-4)
        shard = seeded_shard(rng, 5, 2, 3)
        params = rng.normal(size=model.dim)
        W, b = model.unpack(params)
        expected = scalar_logistic_loss(W.tolist(), b.tolist(), shard.features.tolist(),
                                        shard.labels.tolist(), model.weight_decay)
        assert loss_value(model, params, shard) == pytest.approx(expected, rel=1e-12)
        # Frozen value from the scalar oracle above.
        assert loss_value(model, params, shard) == pytest.approx(1.3334742819420455, rel=1e-9)

    def test_duplicated_shard_same_gradient(self):
        rng = np.random.default_rng(11)
        model = MulticlassLogisticLoss(n_features=3, n_classes=4)
        shard = seeded_shard(rng, 6, 3, 4)
        doubled = DataShard(np.vstack([shard.features, shard.features]),
                            np.concatenate([shard.labels, shard.labels]))
        params = rng.normal(size=model.dim)
        np.testing.assert_allclose(loss_gradient(model, params, shard),
                                   loss_gradient(model, params, doubled), atol=1e-14)

    def test_fd_check(self):
        rng = np.random.default_rng(13)
        model = MulticlassLogisticLoss(n_features=4, n_classes=3)
        shard = seeded_shard(rng, 8, 4, 3)
        assert fd_gradient_check(model, rng.normal(size=model.dim), shard) <= 1e-5

    def test_label_permutation_equivariance(self):
        rng = np.random.default_rng(17)
        C, p = 4, 3
        model = MulticlassLogisticLoss(n_features=p, n_classes=C)
        shard = seeded_shard(rng, 10, p, C)
        params = rng.normal(size=model.dim)
        perm = rng.permutation(C)

        def permute_params(theta):
            W, b = model.unpack(theta)
            return np.concatenate([W[perm].ravel(), b[perm]])

        inv = np.argsort(perm)
        permuted_shard = DataShard(shard.features, inv[shard.labels])
        got = loss_gradient(model, permute_params(params), permuted_shard)
        np.testing.assert_allclose(got, permute_params(loss_gradient(model, params, shard)),
                                   atol=1e-14)

    def test_empty_shard_rejected(self):
        model = MulticlassLogisticLoss(n_features=2, n_classes=2)
        with pytest.raises(ContractError):
            loss_value(model, np.zeros(model.dim), DataShard.empty(2))

    def test_dimension_mismatch_rejected(self):
        model = MulticlassLogisticLoss(n_features=2, n_classes=2)
        shard = DataShard([[0.0, 1.0]], [1])
        with pytest.raises(ContractError):
            loss_value(model, np.zeros(model.dim + 1), shard)


class TestMlp:
    def test_fd_check_seeded(self):
        rng = np.random.default_rng(19)
        model = TwoLayerMlpLoss(n_features=3, n_hidden=4, n_classes=2)
        shard = seeded_shard(rng, 6, 3, 2)
        params = model.init_params(rng)
        assert fd_gradient_check(model, params, shard, step=1e-6) <= 1e-5

    def test_dim_formula(self):
        model = TwoLayerMlpLoss(n_features=5, n_hidden=7, n_classes=3)
        assert model.dim == 7 * 5 + 7 + 3 * 7 + 3

    def test_init_within_fan_in_bounds(self):
        model = TwoLayerMlpLoss(n_features=4, n_hidden=9, n_classes=3)
        params = model.init_params(np.random.default_rng(0))
        W1, b1, W2, b2 = model.unpack(params)
        assert np.abs(np.concatenate([W1.ravel(), b1])).max() <= 0.5
        assert np.abs(np.concatenate([W2.ravel(), b2])).max() <= 1.0 / 3.0

    def test_empty_shard_rejected(self):
        model = TwoLayerMlpLoss(n_features=2, n_hidden=2, n_classes=2)
        with pytest.raises(ContractError):
            loss_value(model, np.zeros(model.dim), DataShard.empty(2))


def _models_and_shards():
    rng = np.random.default_rng(23)
    quad = QuadraticLoss(center=rng.normal(size=4), scale=np.diag([1.0, 2.0, 0.5, 1.5]))
    logi = MulticlassLogisticLoss(n_features=3, n_classes=3)
    mlp = TwoLayerMlpLoss(n_features=3, n_hidden=4, n_classes=3)
    return [
        (quad, None, rng.normal(size=quad.dim)),
        (logi, seeded_shard(rng, 12, 3, 3), rng.normal(size=logi.dim)),
        (mlp, seeded_shard(rng, 12, 3, 3), mlp.init_params(rng)),
    ]


@pytest.mark.parametrize("model,shard,params", _models_and_shards(),
                         ids=["quadratic", "logistic", "mlp"])
def test_first_order_taylor(model, shard, params):
    rng = np.random.default_rng(29)
    direction = rng.normal(size=model.dim)
    grad = loss_gradient(model, params, shard)
    base = loss_value(model, params, shard)
    errors = []
    for t in (1e-4, 1e-5):
        actual = loss_value(model, params + t * direction, shard) - base
        predicted = t * float(grad @ direction)
        errors.append(abs(actual - predicted) / (abs(actual) + 1e-15))
    assert errors[0] < 1e-2
    assert errors[1] < errors[0]


def test_quadratic_ensemble_shapes():
    problem = quadratic_ensemble([[0.0], [1.0], [2.0]])
    assert problem.m == 3 and problem.dim == 1
    with pytest.raises(ContractError):
        quadratic_ensemble([[0.0], [0.0, 1.0]])
