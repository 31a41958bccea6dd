import numpy as np
import pytest

from opengc.datagen import build_sequence, preset
from opengc.environments import (
    EnvironmentSet,
    fallback_environments,
    generate_environments,
    residuals,
    sample_epsilon,
)
from opengc.graph import normalize_adjacency
from opengc.propagation import propagate


class _FixedBeta:
    """rng stub whose beta() always returns a fixed value."""

    def __init__(self, value):
        self.value = value

    def beta(self, a, b):
        return self.value


class TestResiduals:
    def test_hand_case(self):
        table = residuals(np.array([[1.0, 2.0]]), np.array([[1.0, 1.0]]))
        assert np.array_equal(table.rows, [[0.0, 1.0]])
        assert table.valid.tolist() == [True]

    def test_identical_snapshots_all_invalid(self):
        h = np.random.default_rng(0).normal(size=(5, 3))
        table = residuals(h, h.copy())
        assert not table.valid.any()
        assert np.array_equal(table.rows, np.zeros((5, 3)))

    def test_against_subtraction_oracle(self):
        rng = np.random.default_rng(1)
        hp = rng.normal(size=(6, 4))
        ht = np.vstack([hp + rng.normal(size=(6, 4)), rng.normal(size=(3, 4))])
        table = residuals(ht, hp)
        delta = ht[:6] - hp
        norms = np.linalg.norm(delta, axis=1, keepdims=True)
        assert np.allclose(table.rows, delta / norms, atol=1e-12)
        assert np.abs(np.linalg.norm(table.rows[table.valid], axis=1) - 1).max() <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            residuals(np.ones((2, 3)), np.ones((4, 3)))


class TestSampleEpsilon:
    def test_product_form(self):
        eps = sample_epsilon(1, 0.8, 10.0, 10.0, "literal", _FixedBeta(0.5))
        assert eps == pytest.approx(4.0)

    def test_zero_eta(self):
        eps = sample_epsilon(3, -0.9, 0.0, 10.0, "intent", _FixedBeta(0.7))
        assert eps == 0.0

    def test_literal_mode_beta_mean(self):
        rng = np.random.default_rng(2)
        draws = [
            sample_epsilon(1, 1.0, 1.0, 10.0, "literal", rng) for _ in range(100_000)
        ]
        assert abs(np.mean(draws) - 10.0 / 11.0) <= 0.01

    def test_intent_mode_flips_concentration(self):
        rng = np.random.default_rng(3)
        draws = [
            sample_epsilon(1, 1.0, 1.0, 10.0, "intent", rng) for _ in range(20_000)
        ]
        assert abs(np.mean(draws) - 1.0 / 11.0) <= 0.01

    def test_preconditions(self):
        with pytest.raises(ValueError):
            sample_epsilon(0, 0.5, 1.0, 10.0, "literal", _FixedBeta(0.5))
        with pytest.raises(ValueError):
            sample_epsilon(1, 0.5, 1.0, 10.0, "nope", _FixedBeta(0.5))


def _toy_inputs():
    """Two common nodes (one per class) plus two new nodes."""
    h_prev = np.array([[1.0, 0.0], [0.0, 2.0]])
    h_t = np.array([[1.0, 1.0], [0.5, 2.0], [3.0, 0.0], [0.0, 3.0]])
    labels = np.array([0, 1, 0, 1])
    degrees = np.array([2, 1, 3, 1])
    return h_t, h_prev, labels, degrees


class TestGenerateEnvironments:
    def test_zero_eta_matches_base_bitwise(self):
        h_t, h_prev, labels, degrees = _toy_inputs()
        env_set = generate_environments(
            h_t, h_prev, labels, degrees, eta=0.0, c=10.0, env_count=3, seed=9
        )
        for env in env_set.envs:
            assert np.array_equal(env, env_set.base)

    def test_degenerate_pool_passthrough(self):
        h = np.array([[1.0, 0.0], [0.0, 1.0]])
        env_set = generate_environments(
            h, h.copy(), np.array([0, 1]), np.array([1, 1]),
            eta=5.0, c=10.0, env_count=2, seed=0,
        )
        assert env_set.donor_miss == 2
        for env in env_set.envs:
            assert np.array_equal(env, env_set.base)

    def test_hand_trace_matches_replayed_formula(self):
        h_t, h_prev, labels, degrees = _toy_inputs()
        eta, c, seed = 2.0, 10.0, 123
        env_set = generate_environments(
            h_t, h_prev, labels, degrees, eta=eta, c=c, env_count=2, seed=seed
        )
        table = residuals(h_t, h_prev)
        pools = {0: np.array([0]), 1: np.array([1])}
        for e, env in enumerate(env_set.envs):
            rng = np.random.default_rng(seed ^ e)
            expected = h_t.copy()
            for i in range(4):
                pool = pools[labels[i]]
                j = int(pool[rng.integers(pool.size)])
                cos = float(
                    h_t[i] @ h_prev[j]
                    / (np.linalg.norm(h_t[i]) * np.linalg.norm(h_prev[j]))
                )
                delta = rng.beta(c * max(degrees[i], 1), 1.0)
                expected[i] = h_t[i] + delta * cos * eta * table.rows[j]
            assert np.array_equal(env, expected)

    def test_perturbation_norm_equals_epsilon(self):
        h_t, h_prev, labels, degrees = _toy_inputs()
        eta, c, seed = 3.0, 10.0, 7
        env_set = generate_environments(
            h_t, h_prev, labels, degrees, eta=eta, c=c, env_count=1, seed=seed
        )
        rng = np.random.default_rng(seed ^ 0)
        pools = {0: np.array([0]), 1: np.array([1])}
        for i in range(4):
            pool = pools[labels[i]]
            j = int(pool[rng.integers(pool.size)])
            cos = float(
                h_t[i] @ h_prev[j]
                / (np.linalg.norm(h_t[i]) * np.linalg.norm(h_prev[j]))
            )
            eps = sample_epsilon(max(degrees[i], 1), cos, eta, c, "literal", rng)
            diff = np.linalg.norm(env_set.envs[0][i] - env_set.base[i])
            assert diff == pytest.approx(abs(eps), rel=1e-12)
            assert np.sign(eps) == np.sign(cos * eta) or eps == 0.0

    def test_restricted_to_labeled_rows(self):
        h_t, h_prev, _, degrees = _toy_inputs()
        labels = np.array([0, -1, 0, -1])  # only rows 0 and 2 kept
        env_set = generate_environments(
            h_t, h_prev, labels, degrees, eta=1.0, c=10.0, env_count=1, seed=1
        )
        assert env_set.base.shape == (2, 2)
        assert np.array_equal(env_set.rows, [0, 2])

    def test_determinism(self):
        h_t, h_prev, labels, degrees = _toy_inputs()
        kwargs = dict(eta=1.5, c=10.0, env_count=3, seed=42)
        a = generate_environments(h_t, h_prev, labels, degrees, **kwargs)
        b = generate_environments(h_t, h_prev, labels, degrees, **kwargs)
        for ea, eb in zip(a.envs, b.envs):
            assert np.array_equal(ea, eb)


@pytest.fixture(scope="module")
def snapshot():
    return build_sequence(preset("drift-small", seed=3)).snapshot(1)


class TestFallbackEnvironments:

    def test_zero_rates_reproduce_base(self, snapshot):
        prop = lambda adj, x: propagate(adj, x, 2).matrix
        env_set = fallback_environments(snapshot, prop, 0.0, 0.0, env_count=2, seed=5)
        for env in env_set.envs:
            assert np.array_equal(env, env_set.base)

    def test_rate_one_rejected(self, snapshot):
        prop = lambda adj, x: propagate(adj, x, 2).matrix
        with pytest.raises(ValueError):
            fallback_environments(snapshot, prop, 1.0, 0.0)
        with pytest.raises(ValueError):
            fallback_environments(snapshot, prop, 0.0, 1.0)

    def test_edge_survival_is_binomial(self, snapshot):
        # count surviving edges through the propagation hook
        n_edges = snapshot.adjacency.nnz // 2
        assert n_edges > 700  # enough mass for the bound below
        seen = []

        def spy(adj, x):
            n = adj.shape[0]
            seen.append((adj.nnz - n) // 2)
            return x

        fallback_environments(snapshot, spy, 0.5, 0.0, env_count=4, seed=11)
        base_edges, env_edges = seen[0], seen[1:]
        assert base_edges == n_edges
        sigma = np.sqrt(n_edges * 0.25)
        for surviving in env_edges:
            assert abs(surviving - 0.5 * n_edges) <= 4 * sigma + 1

    def test_feature_drop_zeroes_columns(self, snapshot):
        captured = []

        def spy(adj, x):
            captured.append(x)
            return x

        fallback_environments(snapshot, spy, 0.0, 0.5, env_count=3, seed=2)
        dropped_counts = [
            int((np.abs(x).sum(axis=0) == 0).sum()) for x in captured[1:]
        ]
        assert any(c > 0 for c in dropped_counts)

    def test_determinism(self, snapshot):
        prop = lambda adj, x: propagate(adj, x, 2).matrix
        a = fallback_environments(snapshot, prop, 0.3, 0.2, env_count=2, seed=8)
        b = fallback_environments(snapshot, prop, 0.3, 0.2, env_count=2, seed=8)
        for ea, eb in zip(a.envs, b.envs):
            assert np.array_equal(ea, eb)
