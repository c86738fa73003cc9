"""Posterior predictive, FGSM and OOD confidence behavior."""

import numpy as np
import pytest

from langbench.evaluate import (SnapshotEnsemble, adversarial_accuracy,
                                ensemble_input_gradient, fgsm, ood_max_prob,
                                posterior_predict)
from langbench.net import Dense, Network, ReLU, loss_and_grad, softmax


@pytest.fixture
def tiny_net():
    return Network([Dense(4, 3)], input_shape=(4,))


def biased_theta(net, logit_bias):
    """Zero weights, bias vector fixed: constant predictive distribution."""
    theta = np.zeros(net.num_params)
    _, b = net.layer_params(theta, 0)
    b[...] = logit_bias
    return theta


class TestPosteriorPredict:
    def test_single_snapshot_equals_plain_prediction(self, tiny_net):
        rng = np.random.default_rng(0)
        theta = tiny_net.init_params(rng)
        x = rng.normal(size=(6, 4))
        summary = posterior_predict(tiny_net, [theta], x)
        logits, _ = tiny_net.forward(theta, x)
        np.testing.assert_allclose(summary.probabilities, softmax(logits), atol=1e-15)

    def test_two_opposite_snapshots_average_to_half(self, tiny_net):
        a = biased_theta(tiny_net, [1000.0, 0.0, -1000.0])
        b = biased_theta(tiny_net, [0.0, 1000.0, -1000.0])
        x = np.zeros((3, 4))
        summary = posterior_predict(tiny_net, [a, b], x)
        np.testing.assert_allclose(summary.probabilities[:, :2], 0.5, atol=1e-12)

    def test_rows_sum_to_one(self, tiny_net):
        rng = np.random.default_rng(1)
        thetas = [tiny_net.init_params(np.random.default_rng(s)) for s in range(5)]
        summary = posterior_predict(tiny_net, thetas, rng.normal(size=(40, 4)))
        np.testing.assert_allclose(summary.probabilities.sum(axis=1), 1.0, atol=1e-9)

    def test_identical_snapshots_equal_single_exactly(self, tiny_net):
        rng = np.random.default_rng(2)
        theta = tiny_net.init_params(rng)
        x = rng.normal(size=(5, 4))
        one = posterior_predict(tiny_net, [theta], x)
        many = posterior_predict(tiny_net, [theta] * 4, x)
        np.testing.assert_array_equal(one.probabilities, many.probabilities)

    def test_argmax_tie_breaks_low_class(self, tiny_net):
        theta = biased_theta(tiny_net, [0.0, 0.0, 0.0])
        summary = posterior_predict(tiny_net, [theta], np.zeros((2, 4)))
        assert np.all(summary.predictions == 0)

    def test_layout_mismatch_rejected(self, tiny_net):
        with pytest.raises(ValueError, match="layout"):
            posterior_predict(tiny_net, [np.zeros(tiny_net.num_params), np.zeros(3)],
                              np.zeros((1, 4)))

    def test_empty_ensemble_rejected(self, tiny_net):
        with pytest.raises(ValueError, match="empty"):
            posterior_predict(tiny_net, [], np.zeros((1, 4)))

    def test_ensemble_container_validates_shape(self):
        ens = SnapshotEnsemble(4)
        ens.append(np.zeros(4), step=0, lam=0.1)
        with pytest.raises(ValueError):
            ens.append(np.zeros(5), step=1, lam=0.1)


def train_blob_model(seed=0, steps=150):
    from langbench.data import synthetic
    ds = synthetic(256, 3, 8, seed=seed)
    net = Network([Dense(64, 16), ReLU(), Dense(16, 3)], input_shape=(64,))
    theta = net.init_params(np.random.default_rng(seed))
    x = ds.images.reshape(len(ds), -1)
    for _ in range(steps):
        _, grads, _ = loss_and_grad(net, theta, x, ds.labels)
        theta = theta - 0.5 * grads
    return net, theta, x, ds.labels


class TestFgsm:
    def test_zero_epsilon_is_identity(self, tiny_net):
        rng = np.random.default_rng(3)
        theta = tiny_net.init_params(rng)
        x = rng.random((4, 4))
        np.testing.assert_array_equal(fgsm(tiny_net, [theta], x, np.zeros(4, int), 0.0), x)

    def test_perturbation_bounded_by_epsilon(self):
        net, theta, x, y = train_blob_model()
        x_adv = fgsm(net, [theta], x, y, 0.1)
        assert np.abs(x_adv - x).max() <= 0.1 + 1e-12

    def test_pixels_stay_in_unit_box(self):
        net, theta, x, y = train_blob_model()
        x_adv = fgsm(net, [theta], x, y, 0.3)
        assert x_adv.min() >= 0.0
        assert x_adv.max() <= 1.0

    def test_attack_increases_loss(self):
        net, theta, x, y = train_blob_model()
        clean_loss, _ = ensemble_input_gradient(net, [theta], x, y)
        x_adv = fgsm(net, [theta], x, y, 0.25)
        adv_loss, _ = ensemble_input_gradient(net, [theta], x_adv, y)
        assert adv_loss > clean_loss

    def test_negative_epsilon_rejected(self, tiny_net):
        with pytest.raises(ValueError):
            fgsm(tiny_net, [np.zeros(tiny_net.num_params)], np.zeros((1, 4)),
                 np.zeros(1, int), -0.1)

    @pytest.mark.parametrize("eps", [0.1, 0.25])
    def test_adversarial_accuracy_not_above_clean(self, eps):
        net, theta, x, y = train_blob_model()
        clean = posterior_predict(net, [theta], x, y).accuracy
        adv = adversarial_accuracy(net, [theta], x, y, eps)
        assert adv <= clean

    def test_input_gradient_matches_finite_differences(self):
        net, theta, x, y = train_blob_model(steps=20)
        x = x[:3]
        y = y[:3]
        _, dx = ensemble_input_gradient(net, [theta], x, y)
        h = 1e-6
        rng = np.random.default_rng(4)
        for _ in range(10):
            i = rng.integers(0, x.size)
            up, down = x.copy().ravel(), x.copy().ravel()
            up[i] += h
            down[i] -= h
            lu, _ = ensemble_input_gradient(net, [theta], up.reshape(x.shape), y)
            ld, _ = ensemble_input_gradient(net, [theta], down.reshape(x.shape), y)
            fd = (lu - ld) / (2 * h)
            assert fd == pytest.approx(dx.ravel()[i], rel=1e-4, abs=1e-10)


class TestOod:
    def test_uniform_model_max_prob_is_one_over_classes(self, tiny_net):
        theta = np.zeros(tiny_net.num_params)
        report = ood_max_prob(tiny_net, [theta], np.random.default_rng(5).random((30, 4)))
        np.testing.assert_allclose(report.max_prob, 1.0 / 3.0, atol=1e-12)

    def test_histogram_counts_sum_to_example_count(self):
        net, theta, x, _ = train_blob_model()
        report = ood_max_prob(net, [theta], x)
        assert report.counts.sum() == len(x)
        assert len(report.counts) == 50

    def test_csv_schema(self, tmp_path):
        net, theta, x, _ = train_blob_model(steps=10)
        report = ood_max_prob(net, [theta], x[:8])
        path = tmp_path / "hist.csv"
        report.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "bin_left,bin_right,count"
        assert len(lines) == 51
