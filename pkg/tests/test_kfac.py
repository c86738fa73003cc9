"""Kronecker factor maintenance against dense oracles."""

import numpy as np
import pytest

from langbench.kfac import KfacState, LayerFactor, StaleInverseError
from langbench.net import Conv2d, Dense, Network, ReLU, loss_and_grad


def small_net(in_dim=3, hidden=4, out=2, seed=0):
    network = Network([Dense(in_dim, hidden), ReLU(), Dense(hidden, out)],
                      input_shape=(in_dim,))
    theta = network.init_params(np.random.default_rng(seed))
    return network, theta


def run_pair(network, theta, x, labels):
    _, _, cache = loss_and_grad(network, theta, x, labels)
    return cache


def dense_block_inverse(state):
    """Oracle: per-layer np.kron of the damped factor inverses."""
    blocks = []
    for factor in state.factors:
        a_inv = np.linalg.inv(factor.A + np.sqrt(state.damping) * np.eye(factor.A.shape[0]))
        g_inv = np.linalg.inv(factor.G + np.sqrt(state.damping) * np.eye(factor.G.shape[0]))
        blocks.append(np.kron(a_inv, g_inv))
    return blocks


def vec_cols(m):
    """Column-stacking vectorization matching the A (x) G block convention."""
    return m.T.ravel()


def layer_matrix(network, v, layer_index, factor):
    g_dim, a_dim = factor.G.shape[0], factor.A.shape[0]
    start, stop = network.layer_slice(layer_index)
    fan = a_dim - 1
    w = v[start:start + g_dim * fan].reshape(g_dim, fan)
    b = v[start + g_dim * fan:stop]
    return np.concatenate([w, b[:, None]], axis=1)


class TestFactorUpdates:
    def test_single_example_is_rank_one_outer_product(self):
        factor = LayerFactor(3, 1, decay=0.0)
        a = np.array([[1.0, 0.0, 1.0]])  # activation (1, 0) with homogeneous 1
        g = np.array([[1.0]])
        factor.update(a, g)
        np.testing.assert_array_equal(factor.A, [[1, 0, 1], [0, 0, 0], [1, 0, 1]])

    def test_convex_combination_fixed_point(self):
        factor = LayerFactor(2, 1, decay=0.5)
        factor.A = np.eye(2)
        factor.count = 1
        rows = np.sqrt(2.0) * np.eye(2)  # batch mean outer product is I
        factor.update(rows, np.ones((2, 1)))
        np.testing.assert_allclose(factor.A, np.eye(2), atol=1e-15)

    def test_random_batch_matches_dense_mean_outer_product(self):
        rng = np.random.default_rng(1)
        network, theta = small_net()
        x = rng.normal(size=(12, 3))
        labels = rng.integers(0, 2, size=12)
        cache = run_pair(network, theta, x, labels)
        state = KfacState(network, decay=0.95)
        state.update_factors(cache)
        a_hom = np.concatenate([x, np.ones((12, 1))], axis=1)
        np.testing.assert_allclose(state.factors[0].A, a_hom.T @ a_hom / 12, atol=1e-12)
        g_rows = cache.layers[0]["g"] * 12
        np.testing.assert_allclose(state.factors[0].G, g_rows.T @ g_rows / 12, atol=1e-12)

    def test_conv_factor_uses_patch_rows(self):
        rng = np.random.default_rng(2)
        network = Network([Conv2d(1, 2, 3), ReLU(), Dense(2 * 16, 2)],
                          input_shape=(1, 4, 4))
        theta = network.init_params(rng)
        x = rng.normal(size=(3, 1, 4, 4))
        labels = rng.integers(0, 2, size=3)
        cache = run_pair(network, theta, x, labels)
        state = KfacState(network)
        state.update_factors(cache)
        from langbench import _kernels as K
        cols = K.im2col(x, 3, 3, 1, 1)
        a_hom = np.concatenate([cols, np.ones((cols.shape[0], 1))], axis=1)
        np.testing.assert_allclose(state.factors[0].A, a_hom.T @ a_hom / cols.shape[0],
                                   atol=1e-12)

    def test_symmetry_is_exact_after_updates(self):
        rng = np.random.default_rng(3)
        network, theta = small_net()
        state = KfacState(network)
        for _ in range(5):
            x = rng.normal(size=(6, 3))
            labels = rng.integers(0, 2, size=6)
            state.update_factors(run_pair(network, theta, x, labels))
        for factor in state.factors:
            assert np.abs(factor.A - factor.A.T).max() == 0.0
            assert np.abs(factor.G - factor.G.T).max() == 0.0

    def test_update_spectrum_stays_in_convex_hull(self):
        rng = np.random.default_rng(4)
        factor = LayerFactor(4, 1, decay=0.7)
        m1 = rng.normal(size=(8, 4))
        factor.update(m1, np.ones((8, 1)))
        before = np.linalg.eigvalsh(factor.A)
        m2 = rng.normal(size=(8, 4))
        new = m2.T @ m2 / 8
        new_eigs = np.linalg.eigvalsh(new)
        factor.update(m2, np.ones((8, 1)))
        after = np.linalg.eigvalsh(factor.A)
        lo = min(before.min(), new_eigs.min())
        hi = max(before.max(), new_eigs.max())
        assert after.min() >= lo - 1e-10
        assert after.max() <= hi + 1e-10


class TestInversion:
    def test_identity_factors_invert_to_identity(self):
        network, theta = small_net()
        state = KfacState(network, damping=1e-8)
        for factor in state.factors:
            factor.A = np.eye(factor.A.shape[0])
            factor.G = np.eye(factor.G.shape[0])
            factor.count = 1
        state.invert_factors()
        for factor in state.factors:
            np.testing.assert_allclose(factor.A_inv, np.eye(factor.A.shape[0]), atol=1e-4)
            np.testing.assert_allclose(factor.A_inv @ factor.A_damped,
                                       np.eye(factor.A.shape[0]), atol=1e-6)

    def test_diagonal_factor_arithmetic(self):
        factor = LayerFactor(2, 1, decay=0.5)
        factor.A = np.diag([2.0, 4.0])
        state = KfacState.__new__(KfacState)
        # unit damping: sqrt(gamma) = 1
        inv = np.linalg.inv(factor.A + np.eye(2))
        np.testing.assert_allclose(inv, np.diag([1 / 3, 1 / 5]), atol=1e-15)

    def test_non_positive_damping_rejected(self):
        network, _ = small_net()
        state = KfacState(network)
        with pytest.raises(ValueError, match="damping"):
            state.invert_factors(damping=0.0)

    def test_kron_inverse_matches_dense_oracle(self):
        rng = np.random.default_rng(5)
        network, theta = small_net(in_dim=3, hidden=4, out=2)
        state = KfacState(network, damping=1e-3)
        x = rng.normal(size=(16, 3))
        labels = rng.integers(0, 2, size=16)
        state.update_factors(run_pair(network, theta, x, labels))
        state.invert_factors()
        blocks = dense_block_inverse(state)
        v = rng.normal(size=network.num_params)
        applied = state.kron_apply(v, mode="inverse")
        for layer_index, factor, block in zip(state.layer_indices, state.factors, blocks):
            m = layer_matrix(network, v, layer_index, factor)
            got = layer_matrix(network, applied, layer_index, factor)
            expected = block @ vec_cols(m)
            rel = np.linalg.norm(vec_cols(got) - expected) / np.linalg.norm(expected)
            assert rel <= 1e-10


class TestSqrtFactors:
    def test_identity_roots(self):
        network, _ = small_net()
        state = KfacState(network, damping=1e-8)
        for factor in state.factors:
            factor.A = np.eye(factor.A.shape[0])
            factor.G = np.eye(factor.G.shape[0])
            factor.count = 1
        state.invert_factors()
        state.factor_sqrt()
        for factor in state.factors:
            np.testing.assert_allclose(factor.A_inv_sqrt, np.eye(factor.A.shape[0]), atol=1e-4)

    def test_scalar_square_root(self):
        network, _ = small_net(in_dim=1, hidden=1, out=2)
        state = KfacState(network, damping=1e-12)
        # 1x1 "matrix" factors: A = [4] -> damped inverse root ~ [1/2]
        state.factors = state.factors[:1]
        state.layer_indices = state.layer_indices[:1]
        factor = state.factors[0]
        factor.A = np.full((factor.A.shape[0],) * 2, 0.0)
        np.fill_diagonal(factor.A, 4.0)
        factor.G = np.eye(factor.G.shape[0])
        factor.count = 1
        state.invert_factors()
        state.factor_sqrt()
        np.testing.assert_allclose(np.diag(factor.A_inv_sqrt),
                                   np.full(factor.A.shape[0], 0.5), rtol=1e-5)

    def test_root_squared_equals_inverse(self):
        rng = np.random.default_rng(6)
        m = rng.normal(size=(8, 8))
        spd = m @ m.T + 0.5 * np.eye(8)
        factor = LayerFactor(8, 1, decay=0.5)
        factor.A = spd
        factor.count = 1
        network, theta = small_net()
        state = KfacState(network, damping=1e-6)
        state.factors = [factor]
        state.layer_indices = [0]
        state.invert_factors()
        state.factor_sqrt()
        root = factor.A_inv_sqrt
        target = np.linalg.inv(factor.A_damped)
        rel = np.linalg.norm(root @ root - target) / np.linalg.norm(target)
        assert rel <= 1e-8

    def test_applying_sqrt_twice_equals_inverse(self):
        rng = np.random.default_rng(7)
        network, theta = small_net()
        state = KfacState(network)
        x = rng.normal(size=(20, 3))
        labels = rng.integers(0, 2, size=20)
        state.update_factors(run_pair(network, theta, x, labels))
        state.invert_factors()
        state.factor_sqrt()
        for _ in range(10):
            v = rng.normal(size=network.num_params)
            twice = state.kron_apply(state.kron_apply(v, "inverse-sqrt"), "inverse-sqrt")
            once = state.kron_apply(v, "inverse")
            rel = np.linalg.norm(twice - once) / np.linalg.norm(once)
            assert rel <= 1e-8


class TestStaleness:
    def test_apply_before_invert_rejected(self):
        rng = np.random.default_rng(8)
        network, theta = small_net()
        state = KfacState(network)
        with pytest.raises(StaleInverseError):
            state.kron_apply(np.zeros(network.num_params))

    def test_apply_past_staleness_limit_rejected(self):
        rng = np.random.default_rng(9)
        network, theta = small_net()
        state = KfacState(network, max_staleness=2)
        x = rng.normal(size=(6, 3))
        labels = rng.integers(0, 2, size=6)
        state.update_factors(run_pair(network, theta, x, labels))
        state.invert_factors()
        for _ in range(3):
            state.update_factors(run_pair(network, theta, x, labels))
        with pytest.raises(StaleInverseError, match="updates old"):
            state.kron_apply(np.zeros(network.num_params))

    def test_sqrt_mode_requires_factor_sqrt(self):
        rng = np.random.default_rng(10)
        network, theta = small_net()
        state = KfacState(network)
        x = rng.normal(size=(6, 3))
        labels = rng.integers(0, 2, size=6)
        state.update_factors(run_pair(network, theta, x, labels))
        state.invert_factors()
        with pytest.raises(StaleInverseError, match="factor_sqrt"):
            state.kron_apply(np.zeros(network.num_params), mode="inverse-sqrt")
