"""Tests for the RBF head: metric, kernels, gradients, clustering and retrieval."""

import math
from typing import get_args

import numpy as np
import pytest

from conftest import rel_error
from datasets import make_blobs
from errors import ConfigError, NumericError, ShapeError, StaleCacheError
from nn_core import numerical_gradient, softmax_cross_entropy
from rbf_head import (
    KMeansResult,
    KernelConfig,
    KernelKind,
    RbfHead,
    cluster_contributions,
    combined_loss,
    combined_loss_and_grads,
    fit_output_weights,
    init_sigma,
    initialize_from_kmeans,
    kernel_derivatives,
    kernel_eval,
    kmeans_init,
    metric_distance_sq,
    metric_matrix,
    rbf_backward,
    rbf_forward,
    similarity_query,
    solve_output_weights,
    top_clusters,
    unsupervised_loss,
)

GRADCHECK_SEEDS = range(20)


def make_head(mode="full", per_cluster=False, kind="gaussian", plain=False, seed=0, clusters=4, dim=3, classes=3):
    rng = np.random.default_rng(seed)
    head = RbfHead(clusters, dim, classes, KernelConfig(kind=kind, sigma=1.5), mode, per_cluster, plain, rng, np.float64)
    if mode == "full":
        head.metric.data = np.eye(dim) + 0.3 * rng.normal(size=(dim, dim))
    elif mode == "diagonal":
        head.metric.data = 1.0 + 0.3 * rng.normal(size=dim)
    if per_cluster:
        head.sigma.data = rng.uniform(1.0, 2.0, size=clusters)
    return head


class TestMetric:
    """Squared distance under the learned metric."""

    def test_zero_at_center(self):
        head = make_head()
        c = head.centers.data[1]
        assert metric_distance_sq(c, c, head) == 0.0

    def test_euclidean(self):
        head = make_head("euclidean", dim=2)
        assert metric_distance_sq(np.array([1.0, 1.0]), np.zeros(2), head) == pytest.approx(2.0)

    def test_full_mode_adds_epsilon(self):
        head = make_head("full", dim=2)
        head.metric.data = 2.0 * np.eye(2)
        assert metric_distance_sq(np.array([1.0, 0.0]), np.zeros(2), head) == pytest.approx(4.0 + 1e-6, abs=1e-12)

    def test_diagonal_mode(self):
        head = make_head("diagonal", dim=2)
        head.metric.data = np.array([2.0, 3.0])
        d2 = metric_distance_sq(np.array([1.0, 1.0]), np.zeros(2), head)
        assert d2 == pytest.approx(4.0 + 9.0 + 2e-6, abs=1e-12)

    @pytest.mark.parametrize("mode", ["full", "diagonal"])
    def test_metric_is_positive_definite(self, mode):
        head = make_head(mode, seed=3)
        r = metric_matrix(head)
        np.testing.assert_allclose(r, r.T)
        assert np.linalg.eigvalsh(r).min() > 0

    def test_rank_deficient_factor_keeps_epsilon_floor(self):
        head = make_head("full")
        head.metric.data = np.zeros((3, 3))
        np.testing.assert_allclose(np.linalg.eigvalsh(metric_matrix(head)), 1e-6)

    def test_distance_matches_metric_matrix(self, rng):
        head = make_head("full", seed=5)
        x, c = rng.normal(size=3), rng.normal(size=3)
        expected = (x - c) @ metric_matrix(head) @ (x - c)
        assert metric_distance_sq(x, c, head) == pytest.approx(expected)
        assert metric_distance_sq(x, c, head) >= 0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            metric_distance_sq(np.zeros(2), np.zeros(3), make_head())


class TestKernels:
    def test_quadratic_anchors(self):
        config = KernelConfig(kind="quadratic", sigma=2.0)
        assert kernel_eval(0.0, config) == 1.0
        assert kernel_eval(4.0, config) == pytest.approx(0.0)

    def test_quadratic_is_affine_in_r2(self):
        config = KernelConfig(kind="quadratic", sigma=1.5)
        h = kernel_eval(np.array([0.5, 1.0, 1.5]), config)
        assert h[0] - 2 * h[1] + h[2] == pytest.approx(0.0, abs=1e-12)

    def test_gaussian_anchors(self):
        config = KernelConfig(kind="gaussian", sigma=1.0)
        assert kernel_eval(0.0, config) == 1.0
        assert kernel_eval(2.0, config) == pytest.approx(math.exp(-1))
        assert float(kernel_eval(2.0, config)) == pytest.approx(0.3679, abs=1e-4)

    def test_thin_plate_is_zero_at_center(self):
        config = KernelConfig(kind="thin_plate")
        assert kernel_eval(0.0, config) == 0.0
        assert kernel_eval(math.e ** 2, config) == pytest.approx(math.e ** 2)

    @pytest.mark.parametrize("kind", get_args(KernelKind))
    def test_derivatives_match_finite_differences(self, kind):
        config = KernelConfig(kind=kind, sigma=1.3, alpha=0.7, beta=0.4, r0=0.5)
        r2 = np.array([0.3, 1.7, 4.0])
        h = 1e-6
        d_r2, d_sigma = kernel_derivatives(r2, config)
        numeric_r2 = (kernel_eval(r2 + h, config) - kernel_eval(r2 - h, config)) / (2 * h)
        numeric_sigma = (kernel_eval(r2, config, 1.3 + h) - kernel_eval(r2, config, 1.3 - h)) / (2 * h)
        np.testing.assert_allclose(d_r2, numeric_r2, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(d_sigma, numeric_sigma, rtol=1e-5, atol=1e-8)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_non_positive_sigma(self, sigma):
        with pytest.raises(NumericError):
            kernel_eval(1.0, KernelConfig(kind="gaussian"), sigma)

    def test_negative_distance(self):
        with pytest.raises(NumericError):
            kernel_eval(-1.0, KernelConfig())

    def test_invalid_shape_parameters(self):
        with pytest.raises(ValueError):
            KernelConfig(kind="power", beta=1.0)
        with pytest.raises(ValueError):
            KernelConfig(kind="inv_power", alpha=0.0)


class TestForwardBackward:
    def test_single_cluster_at_center(self):
        head = RbfHead(1, 2, 3, KernelConfig(kind="quadratic"), dtype=np.float64)
        head.bias.data = np.array([0.5, -0.5, 1.0])
        fwd = rbf_forward(head, head.centers.data.copy())
        assert fwd.activations[0, 0] == 1.0
        np.testing.assert_allclose(fwd.logits[0], head.weights.data[0] + head.bias.data)

    def test_zero_weights_give_bias(self, rng):
        head = make_head()
        head.weights.data = np.zeros_like(head.weights.data)
        head.bias.data = np.array([1.0, 2.0, 3.0])
        logits = rbf_forward(head, rng.normal(size=(4, 3))).logits
        np.testing.assert_array_equal(logits, np.tile([1.0, 2.0, 3.0], (4, 1)))

    def test_zero_upstream(self, rng):
        head = make_head()
        fwd = rbf_forward(head, rng.normal(size=(4, 3)))
        grads, gx = rbf_backward(head, fwd, np.zeros((4, 3)))
        assert set(grads) == set(head.named_parameters())
        assert all(not g.any() for g in grads.values()) and not gx.any()

    def test_stale_forward(self, rng):
        head = make_head()
        fwd = rbf_forward(head, rng.normal(size=(2, 3)))
        head.mark_updated()
        with pytest.raises(StaleCacheError):
            rbf_backward(head, fwd, np.ones((2, 3)))

    def test_backward_without_forward(self):
        with pytest.raises(StaleCacheError):
            rbf_backward(make_head(), None, np.ones((1, 3)))

    def test_wrong_embedding_width(self):
        with pytest.raises(ShapeError):
            rbf_forward(make_head(), np.zeros((2, 5)))

    @pytest.mark.parametrize("seed", GRADCHECK_SEEDS)
    @pytest.mark.parametrize("mode,per_cluster,kind,plain", [
        ("full", False, "gaussian", False),
        ("full", True, "quadratic", False),
        ("diagonal", True, "dsp", False),
        ("euclidean", False, "inv_power", False),
        ("full", False, "logistic", True),
        ("diagonal", False, "power", True),
    ])
    def test_combined_loss_gradcheck(self, mode, per_cluster, kind, plain, seed):
        head = make_head(mode, per_cluster, kind, plain, seed=seed)
        rng = np.random.default_rng(1000 + seed)
        x = rng.normal(size=(6, 3))
        labels = rng.integers(0, 3, size=6)
        _, grads, grad_x, _ = combined_loss_and_grads(head, x, labels, lam=0.5)

        def loss(_):
            return combined_loss(head, x, labels, 0.5)

        for name, param in head.named_parameters().items():
            assert rel_error(grads[name], numerical_gradient(loss, param.data)) < 1e-4, name
        assert rel_error(grad_x, numerical_gradient(loss, x)) < 1e-4

    def test_config_round_trip(self):
        head = make_head("diagonal", per_cluster=True, kind="logistic")
        clone = RbfHead.from_config(head.config(), np.float64)
        assert clone.config() == head.config()
        assert clone.sigma.shape == (4,)


class TestLosses:
    def test_unsupervised_zero_on_centers(self):
        head = make_head()
        assert unsupervised_loss(head, head.centers.data.copy()) == 0.0

    def test_unsupervised_single_point(self):
        head = RbfHead(1, 2, 2, metric_mode="euclidean", dtype=np.float64)
        head.centers.data = np.zeros((1, 2))
        assert unsupervised_loss(head, np.array([[1.0, 1.0]])) == pytest.approx(2.0)

    def test_lambda_zero_is_supervised_only(self, rng):
        head = make_head()
        x, labels = rng.normal(size=(5, 3)), rng.integers(0, 3, size=5)
        expected, _ = softmax_cross_entropy(rbf_forward(head, x).logits, labels)
        breakdown, _, _, _ = combined_loss_and_grads(head, x, labels, 0.0)
        assert breakdown.total == pytest.approx(expected)
        assert breakdown.supervised == pytest.approx(expected)

    def test_clustered_batch_has_no_unsupervised_term(self):
        head = make_head()
        x = head.centers.data[[0, 1, 1, 3]].copy()
        breakdown, _, _, _ = combined_loss_and_grads(head, x, np.array([0, 1, 1, 2]), 2.0)
        assert breakdown.unsupervised == 0.0
        assert breakdown.total == pytest.approx(breakdown.supervised)

    def test_negative_lambda(self, rng):
        with pytest.raises(ConfigError):
            combined_loss(make_head(), rng.normal(size=(2, 3)), np.array([0, 1]), -0.1)


class TestKMeans:
    def test_single_cluster_is_the_mean(self, rng):
        x = rng.normal(size=(30, 4))
        result = kmeans_init(x, 1, rng)
        np.testing.assert_allclose(result.centers[0], x.mean(axis=0))

    def test_repeated_points_give_zero_loss(self, rng):
        points = np.array([[0.0, 0.0], [5.0, 5.0], [-3.0, 4.0]])
        x = np.repeat(points, 6, axis=0)
        result = kmeans_init(x, 3, rng)
        assert result.loss == 0.0
        assert len(set(result.assignments.tolist())) == 3

    @pytest.mark.parametrize("seed", range(50))
    def test_loss_never_increases(self, seed):
        rng = np.random.default_rng(seed)
        x = make_blobs(20, 4, 3, 0.03, rng).images[:, 0, 0, :]
        history = kmeans_init(x, 6, rng).history
        assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(history, history[1:]))

    @pytest.mark.parametrize("seed", range(6))
    def test_empty_cluster_is_reseeded(self, seed):
        x = np.array([[0.0], [0.0], [0.0], [10.0]])
        result = kmeans_init(x, 2, np.random.default_rng(seed))
        assert result.loss == 0.0
        assert np.bincount(result.assignments, minlength=2).min() >= 1

    def test_too_many_clusters(self, rng):
        with pytest.raises(ShapeError):
            kmeans_init(rng.normal(size=(3, 2)), 4, rng)

    def test_init_sigma(self):
        assert init_sigma(np.zeros(5)) == 1.0
        assert init_sigma(np.array([4.0, 4.0])) == pytest.approx(2.0)

    def test_warm_start_resets_metric_and_bumps_version(self, rng):
        head = make_head("full", per_cluster=True, seed=2)
        version = head.version
        result = initialize_from_kmeans(head, rng.normal(size=(40, 3)), rng)
        np.testing.assert_array_equal(head.metric.data, np.eye(3))
        np.testing.assert_allclose(head.centers.data, result.centers)
        assert np.all(head.sigma.data > 0)
        assert head.version == version + 1

    def test_per_cluster_sigma_keeps_unit_spread(self, monkeypatch):
        x = np.array([[-1.0, 0.0], [1.0, 0.0], [100.0, 0.0], [100.0, 4.0], [50.0, 50.0], [50.0, 50.0]])
        assignments = np.array([0, 0, 1, 1, 2, 2])
        centers = np.array([[0.0, 0.0], [100.0, 2.0], [50.0, 50.0]])
        fixed = KMeansResult(centers, assignments, 10.0, [10.0], 1)
        monkeypatch.setattr("rbf_head.kmeans_init", lambda *args, **kwargs: fixed)
        head = RbfHead(3, 2, 2, KernelConfig(), "euclidean", True, False, np.random.default_rng(0), np.float64)
        initialize_from_kmeans(head, x, np.random.default_rng(0))
        shared = math.sqrt(10.0 / 6.0)
        np.testing.assert_allclose(head.sigma.data, [1.0, 2.0, shared])


class TestOutputWeights:
    def test_identity_recovers_targets(self, rng):
        y = rng.normal(size=(4, 3))
        np.testing.assert_allclose(solve_output_weights(np.eye(4), y, 1e-12), y, atol=1e-9)

    def test_large_ridge_shrinks_to_zero(self, rng):
        w = solve_output_weights(rng.normal(size=(10, 4)), rng.normal(size=(10, 2)), 1e12)
        assert np.abs(w).max() < 1e-9

    @pytest.mark.parametrize("seed", range(100))
    def test_residual_bound(self, seed):
        rng = np.random.default_rng(seed)
        n, p, k = rng.integers(20, 80), rng.integers(2, 12), rng.integers(1, 6)
        h = rng.uniform(size=(n, p))
        y = rng.normal(size=(n, k))
        w = solve_output_weights(h, y, 1e-8)
        hty = h.T @ y
        assert np.abs(h.T @ h @ w - hty).max() <= 1e-6 * (1 + np.abs(hty).max())

    def test_non_positive_alpha(self):
        with pytest.raises(ConfigError):
            solve_output_weights(np.eye(2), np.eye(2), 0.0)

    def test_fit_zeroes_bias(self, rng):
        head = make_head()
        head.bias.data = np.ones(3)
        fit_output_weights(head, rng.normal(size=(20, 3)), rng.integers(0, 3, size=20))
        assert not head.bias.data.any()


class TestRetrieval:
    def test_query_in_corpus_ranks_first(self, rng):
        head = make_head(seed=4)
        corpus = rng.normal(size=(12, 3))
        result = similarity_query(head, corpus[7], corpus, 3)
        assert result.similar[0] == (7, 0.0)

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("mode", ["euclidean", "diagonal", "full"])
    def test_matches_brute_force(self, mode, seed):
        head = make_head(mode, seed=seed)
        rng = np.random.default_rng(500 + seed)
        corpus = rng.normal(size=(200, 3))
        query = rng.normal(size=3)
        d2 = [metric_distance_sq(query, c, head) for c in corpus]
        result = similarity_query(head, query, corpus, 200)
        assert [i for i, _ in result.similar] == sorted(range(200), key=lambda i: (d2[i], i))
        assert [i for i, _ in result.dissimilar] == sorted(range(200), key=lambda i: (-d2[i], i))
        np.testing.assert_allclose([r for _, r in result.similar], sorted(d2), rtol=1e-12, atol=1e-12)

    def test_ties_go_to_lower_index(self):
        head = make_head("euclidean")
        corpus = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        result = similarity_query(head, np.zeros(3), corpus, 3)
        assert [i for i, _ in result.similar] == [0, 1, 2]

    @pytest.mark.parametrize("top_n", [0, 4])
    def test_top_n_out_of_range(self, top_n):
        with pytest.raises(ConfigError):
            similarity_query(make_head(), np.zeros(3), np.zeros((3, 3)), top_n)


class TestContributions:
    def test_columns_sum_to_logits(self, rng):
        head = make_head(seed=6)
        head.bias.data = rng.normal(size=3)
        x = rng.normal(size=3)
        contributions = cluster_contributions(head, x)
        logits = rbf_forward(head, x[None, :]).logits[0]
        np.testing.assert_allclose(contributions.sum(axis=0) + head.bias.data, logits)

    def test_single_cluster(self, rng):
        head = make_head(clusters=1)
        head.bias.data = np.array([0.1, 0.2, 0.3])
        x = rng.normal(size=3)
        logits = rbf_forward(head, x[None, :]).logits[0]
        np.testing.assert_allclose(cluster_contributions(head, x)[0], logits - head.bias.data)

    def test_zero_weights(self, rng):
        head = make_head()
        head.weights.data = np.zeros_like(head.weights.data)
        assert not cluster_contributions(head, rng.normal(size=3)).any()

    def test_top_clusters_are_sorted(self, rng):
        head = make_head(seed=9)
        ranked = top_clusters(head, rng.normal(size=3), k=4, class_index=1)
        values = [r["contribution"] for r in ranked]
        assert values == sorted(values, reverse=True)
        assert {r["class"] for r in ranked} == {1}
