# tests/test_metrics.py
import itertools

import numpy as np
import pytest
from pydantic import ValidationError

from app.linalg import RngStream
from app.metrics import (
    MetricRecord,
    classification_accuracy,
    epochs_to_peak,
    fit_gaussian_summary,
    frechet_distance,
    frechet_from_samples,
    generator_w1,
    mann_whitney,
    summarize,
    wasserstein1,
)
from app.neuralnet import Activation, DenseLayer, DiscriminatorNet, NetworkParams
from core.exceptions import ArgumentError


def nearest_center_discriminator(centers: np.ndarray) -> DiscriminatorNet:
    """Trunk keeps x recoverable through LeakyReLU; class logits are <c_k, x>."""
    k = centers.shape[0]
    trunk = DenseLayer(weight=[[1, -1, 0, 0], [0, 0, 1, -1]], bias=np.zeros(4), activation=Activation.LEAKY_RELU)
    real = DenseLayer(weight=np.zeros((4, 1)), bias=np.zeros(1), activation=Activation.SIGMOID)
    cls = np.zeros((4, k))
    cls[0], cls[1] = centers[:, 0], -centers[:, 0]
    cls[2], cls[3] = centers[:, 1], -centers[:, 1]
    head = DenseLayer(weight=cls, bias=np.zeros(k), activation=Activation.SOFTMAX)
    return DiscriminatorNet(NetworkParams(layers=[trunk, real, head]))


class TestAccuracy:
    def test_hard_wired_classifier_is_perfect(self, ring_pool):
        angles = 2 * np.pi * np.arange(4) / 4
        centers = 0.75 * np.column_stack([np.cos(angles), np.sin(angles)])
        d = nearest_center_discriminator(centers)
        assert classification_accuracy(d, ring_pool.test_x, ring_pool.test_y) == 1.0

    def test_uniform_classifier_predicts_class_zero(self, arch, ring_pool):
        d = DiscriminatorNet.initialize(arch, 4, None)
        expected = float(np.mean(ring_pool.test_y == 0))
        assert classification_accuracy(d, ring_pool.test_x, ring_pool.test_y) == expected

    def test_invariant_to_logit_scaling(self, pair, ring_pool):
        _, d = pair
        before = classification_accuracy(d, ring_pool.test_x, ring_pool.test_y)
        scaled = d.clone()
        scaled.params.layers[2].weight *= 3.0
        scaled.params.layers[2].bias *= 3.0
        assert classification_accuracy(scaled, ring_pool.test_x, ring_pool.test_y) == before

    def test_accepts_one_hot_labels(self, pair, ring_data):
        _, d = pair
        assert classification_accuracy(d, ring_data.test_x, ring_data.test_onehot) == \
            classification_accuracy(d, ring_data.test_x, ring_data.test_y)

    def test_empty_test_set(self, pair):
        _, d = pair
        with pytest.raises(ArgumentError):
            classification_accuracy(d, np.empty((0, 2)), np.empty(0))


class TestWasserstein:
    def test_identical_sets(self, np_rng):
        a = np_rng.normal(size=(50, 2))
        assert wasserstein1(a, a[::-1]) == pytest.approx(0.0, abs=1e-12)

    def test_point_masses(self):
        assert wasserstein1(np.zeros((10, 2)), np.tile([0.5, 0.0], (10, 1))) == pytest.approx(0.5)

    def test_matches_brute_force(self, np_rng):
        for _ in range(200):
            n = int(np_rng.integers(1, 8))
            a, b = np_rng.normal(size=(n, 2)), np_rng.normal(size=(n, 2))
            cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
            best = min(cost[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))
            assert abs(wasserstein1(a, b) - best) <= 1e-12

    def test_translation(self, np_rng):
        a = np_rng.uniform(-1, 1, size=(40, 2))
        for _ in range(50):
            t = np_rng.normal(size=2)
            assert wasserstein1(a, a + t) == pytest.approx(np.linalg.norm(t), rel=1e-9)

    def test_metric_axioms(self, np_rng):
        for _ in range(20):
            a, b, c = (np_rng.normal(size=(30, 2)) for _ in range(3))
            ab, ba = wasserstein1(a, b), wasserstein1(b, a)
            assert ab == pytest.approx(ba, rel=1e-12)
            assert ab <= wasserstein1(a, c) + wasserstein1(c, b) + 1e-9

    def test_unequal_sizes_subsample_reproducibly(self, np_rng):
        a, b = np_rng.normal(size=(80, 2)), np_rng.normal(size=(30, 2))
        first = wasserstein1(a, b, rng=RngStream(4))
        assert first == wasserstein1(a, b, rng=RngStream(4))

    def test_empty(self):
        with pytest.raises(ArgumentError):
            wasserstein1(np.empty((0, 2)), np.zeros((3, 2)))

    def test_dimension_mismatch(self):
        with pytest.raises(ArgumentError):
            wasserstein1(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_generator_w1_is_deterministic(self, pair, ring_pool):
        g, _ = pair
        a = generator_w1(g, ring_pool.test_x, RngStream(1, "w1"), max_points=40)
        assert a == generator_w1(g, ring_pool.test_x, RngStream(1, "w1"), max_points=40)
        assert a > 0.0


class TestFrechet:
    def test_zero_for_equal_gaussians(self, np_rng):
        m = np_rng.normal(size=(3, 3))
        cov = m @ m.T + np.eye(3)
        mu = np_rng.normal(size=3)
        assert frechet_distance(mu, cov, mu, cov) == pytest.approx(0.0, abs=1e-9)

    def test_one_dimensional_value(self):
        # (0-1)^2 + 1 + 4 - 2*sqrt(1*4)
        assert frechet_distance([0.0], [[1.0]], [1.0], [[4.0]]) == pytest.approx(2.0)

    def test_one_dimensional_closed_form(self, np_rng):
        for _ in range(100):
            m_p, m_q = np_rng.normal(size=2)
            s_p, s_q = np_rng.uniform(0.1, 3, 2)
            expected = (m_p - m_q) ** 2 + (s_p - s_q) ** 2
            assert frechet_distance([m_p], [[s_p ** 2]], [m_q], [[s_q ** 2]]) == pytest.approx(expected, abs=1e-9)

    def test_diagonal_closed_form(self, np_rng):
        for _ in range(100):
            mu_p, mu_q = np_rng.normal(size=4), np_rng.normal(size=4)
            sd_p, sd_q = np_rng.uniform(0.1, 2, 4), np_rng.uniform(0.1, 2, 4)
            expected = np.sum((mu_p - mu_q) ** 2) + np.sum((sd_p - sd_q) ** 2)
            value = frechet_distance(mu_p, np.diag(sd_p ** 2), mu_q, np.diag(sd_q ** 2))
            assert value == pytest.approx(expected, abs=1e-9)

    def test_symmetric(self, np_rng):
        a, b = np_rng.normal(size=(200, 2)), np_rng.normal(loc=0.5, size=(150, 2))
        assert frechet_from_samples(a, b) == pytest.approx(frechet_from_samples(b, a), rel=1e-9)

    def test_rejects_indefinite_covariance(self):
        with pytest.raises(ArgumentError):
            frechet_distance([0, 0], [[1, 0], [0, -1]], [0, 0], np.eye(2))

    def test_rejects_nonconforming_shapes(self):
        with pytest.raises(ArgumentError):
            frechet_distance([0, 0, 0], np.eye(2), [0, 0], np.eye(2))

    def test_gaussian_summary(self, np_rng):
        x = np_rng.normal(size=(500, 2))
        mean, cov = fit_gaussian_summary(x)
        np.testing.assert_allclose(mean, x.mean(axis=0))
        np.testing.assert_allclose(cov, np.cov(x, rowvar=False))
        np.testing.assert_array_equal(cov, cov.T)

    def test_gaussian_summary_needs_two_samples(self):
        with pytest.raises(ArgumentError):
            fit_gaussian_summary(np.zeros((1, 2)))


class TestStatistics:
    def test_summarize(self):
        assert summarize([4, 1, 3, 2]) == {"Min": 1.0, "Median": 2.5, "IQR": 1.5, "Max": 4.0}

    def test_summarize_single_value(self):
        assert summarize([0.7]) == {"Min": 0.7, "Median": 0.7, "IQR": 0.0, "Max": 0.7}

    def test_summarize_empty(self):
        with pytest.raises(ArgumentError):
            summarize([])

    def test_mann_whitney(self):
        assert mann_whitney([0.5] * 5, [0.5] * 5) == 1.0
        assert mann_whitney([], [1.0]) == 1.0
        assert mann_whitney(range(10), range(100, 110)) < 0.001

    def test_epochs_to_peak_takes_first_maximum(self):
        assert epochs_to_peak([10, 20, 30], [0.5, 0.9, 0.9]) == 20

    def test_epochs_to_peak_mismatch(self):
        with pytest.raises(ArgumentError):
            epochs_to_peak([1, 2], [0.1])


def test_metric_record_rejects_nan():
    with pytest.raises(ValidationError):
        MetricRecord(epoch=1, accuracy=0.5, w1=float("nan"))
