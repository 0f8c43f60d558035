import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

import oracles
from srla.data import SyntheticConfig, generate_synthetic
from srla.decoding import (
    StateAnnotation,
    annotate,
    build_specialized_set,
    decode_failure_states,
    map_states_to_conditions,
    posterior_failure_mass,
    state_assignment_rows,
)
from srla.errors import ConfigError, InvariantError
from srla.iohmm import IohmmParams
from srla.rul import RulConfig, estimate_rul, rollout_lengths, rul_trend, write_trend_csv


def _chain(A, d=1, pi=None):
    A = np.asarray(A, float)
    if A.ndim == 2:
        A = A[None]
    n = A.shape[1]
    means = np.arange(n, dtype=float).reshape(n, 1, 1).repeat(A.shape[0], 1).repeat(d, 2) * 5
    pi = np.eye(n)[0] if pi is None else pi
    return IohmmParams(pi, A, means, np.full(means.shape, 0.01))


LTR3 = [[0.9, 0.1, 0.0], [0.0, 0.9, 0.1], [0.0, 0.0, 1.0]]


class TestFailureStates:
    def test_true_params_on_generator_data(self):
        cfg = SyntheticConfig.left_to_right(4, 0.2, n_units=15, noise=0.05)
        data, _ = generate_synthetic(cfg, 0)
        params = IohmmParams(np.eye(4)[0], cfg.transitions, cfg.means, cfg.stds ** 2)
        assert decode_failure_states(params, data) == {3}
        assert decode_failure_states(params, data) == decode_failure_states(params, data)

    def test_two_absorbing_modes(self):
        A = np.array([[0.8, 0.1, 0.1], [0, 1, 0], [0, 0, 1]])
        cfg = SyntheticConfig(A[None], np.array([[[0.0]], [[5.0]], [[-5.0]]]), np.full((3, 1, 1), 0.1),
                              n_units=30, failure_state=1)
        p = IohmmParams([1, 0, 0], A[None], cfg.means, cfg.stds ** 2)
        paths = [np.array([0, 0, 1]), np.array([0, 2])]
        assert decode_failure_states(p, None, paths) == {1, 2}


class TestSpecializedSet:
    def test_radius_zero(self):
        assert build_specialized_set(_chain(LTR3), {2}, radius=0) == {2}

    def test_radius_one(self):
        assert build_specialized_set(_chain(LTR3), {2}, radius=1) == {1, 2}

    def test_phantom_edges_ignored(self):
        A = np.array(LTR3)
        A[0] = [0.9995, 0.0, 0.0005]
        assert build_specialized_set(_chain(A), {2}, radius=1) == {1, 2}

    def test_any_input_counts(self):
        A = np.stack([np.array(LTR3), np.array([[0.5, 0.0, 0.5], [0, 1, 0], [0, 0, 1]])])
        assert build_specialized_set(_chain(A), {2}, radius=1) == {0, 1, 2}

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_in_radius(self, seed):
        rng = np.random.default_rng(seed)
        n = 6
        _, A, _, _ = oracles.random_iohmm(rng, n, 2, 1, zero_prob=0.7)
        p = _chain(A)
        fail = {int(rng.integers(n))}
        sets = [build_specialized_set(p, fail, radius=r) for r in range(5)]
        assert all(a <= b for a, b in zip(sets, sets[1:]))
        assert all(fail <= s for s in sets)

    def test_value_quantile(self):
        v = np.array([-1.0, -1.1, -1.2, -1.3, -1.4, -1.5, -1.6, -1.7, -9.0, -9.5])
        assert build_specialized_set(_chain(np.eye(10)), {9}, v, mode="value_quantile", quantile=0.25) == {8, 9}
        assert build_specialized_set(_chain(np.eye(10)), {3}, v, mode="value_quantile", quantile=0.25) == {3, 8, 9}

    def test_errors(self):
        with pytest.raises(ConfigError):
            build_specialized_set(_chain(LTR3), set())
        with pytest.raises(ConfigError):
            build_specialized_set(_chain(LTR3), {2}, mode="value_quantile")

    def test_annotation_invariant(self):
        with pytest.raises(InvariantError):
            StateAnnotation(frozenset({2}), frozenset({1}))

    def test_annotation_round_trip(self, tmp_path):
        cfg = SyntheticConfig.left_to_right(4, 0.2, n_units=8, noise=0.05)
        data, _ = generate_synthetic(cfg, 0)
        params = IohmmParams(np.eye(4)[0], cfg.transitions, cfg.means, cfg.stds ** 2)
        ann = annotate(params, data)
        ann.save(tmp_path / "a.json")
        again = StateAnnotation.load(tmp_path / "a.json")
        assert again == ann
        rows = state_assignment_rows(params, data, ann)
        assert len(rows) == data.total_cycles and rows[-1][3] == "failure"


class TestConditions:
    def test_left_to_right_ordering(self):
        cfg = SyntheticConfig.left_to_right(5, 0.1, n_units=20, noise=0.05)
        data, truth = generate_synthetic(cfg, 1)
        bands, diag = map_states_to_conditions(truth)
        order = [s for b in bands for s in b.states]
        assert order == sorted(order) and not diag
        assert bands[-1].label == "failure" and bands[-1].states == (4,)

    def test_non_monotone_flagged(self):
        paths = [np.array([1, 1, 0, 0, 2])]
        bands, diag = map_states_to_conditions(paths)
        assert diag and [s for b in bands for s in b.states] == [1, 0, 2]

    def test_single_state(self):
        bands, _ = map_states_to_conditions([np.zeros(7, int)])
        assert len(bands) == 1 and bands[0].states == (0,)

    def test_ground_truth_positions(self):
        paths = [np.array([0, 0, 1, 1])]
        bands, _ = map_states_to_conditions(paths, positions=[np.array([0.0, 0.0, 1.0, 1.0])])
        assert [(b.label, b.states) for b in bands] == [("normal", (0,)), ("failure", (1,))]


class TestFailureMass:
    def test_cases(self):
        assert posterior_failure_mass(np.eye(10)[3], {3}) == 1.0
        assert posterior_failure_mass(np.full(10, 0.1), {9}) == pytest.approx(0.1)
        assert posterior_failure_mass(np.full(10, 0.1), set()) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.sets(st.integers(0, 11)))
    def test_bounded(self, w, fails):
        g = np.asarray(w) + 1e-12
        g = g / g.sum()
        fails = {f for f in fails if f < len(g)}
        assert 0.0 <= posterior_failure_mass(g, fails) <= 1.0


class TestRul:
    def test_already_failed(self):
        p = _chain(LTR3)
        est = estimate_rul(p, [0, 0, 0], np.array([[0.0], [5.0], [10.0]]), {2})
        assert est.mean_rul == 0.0

    def test_geometric(self):
        p = _chain([[0.9, 0.1], [0.0, 1.0]])
        est = estimate_rul(p, [0], np.zeros((1, 1)), {1}, RulConfig(n_rollouts=10_000, seed=3))
        assert abs(est.mean_rul - 10) / 10 < 0.1
        assert abs(est.mean_rul - 10) < 3 * est.std_error

    @pytest.mark.parametrize("seed", range(5))
    def test_fundamental_matrix(self, seed):
        rng = np.random.default_rng(seed)
        n = 5
        A = np.triu(rng.random((n, n)) + 0.05)
        A[:, -1] += 0.1
        A[-1] = np.eye(n)[-1]
        A /= A.sum(1, keepdims=True)
        expected = oracles.absorbing_hitting_times(A[:-1, :-1])
        p = _chain(A)
        for start in range(n - 1):
            lengths, trunc = rollout_lengths(p, start, np.eye(n, dtype=bool)[-1], [0],
                                             RulConfig(n_rollouts=4000, seed=seed))
            assert not trunc.any()
            se = lengths.std(ddof=1) / np.sqrt(len(lengths))
            assert abs(lengths.mean() - expected[start]) < 3 * se + 1e-12

    def test_input_policies(self):
        A = np.stack([np.array([[0.9, 0.1], [0, 1]]), np.array([[0.5, 0.5], [0, 1]])])
        p = _chain(A)
        mask = np.array([False, True])
        hold, _ = rollout_lengths(p, 0, mask, [0, 0, 1], RulConfig(n_rollouts=20_000, seed=0))
        emp, _ = rollout_lengths(p, 0, mask, [0, 0, 1], RulConfig(n_rollouts=20_000, input_policy="empirical", seed=0))
        assert hold.mean() == pytest.approx(2.0, rel=0.05)
        # per-step exit probability (2/3)(0.1) + (1/3)(0.5)
        assert emp.mean() == pytest.approx(1 / (2 / 3 * 0.1 + 1 / 3 * 0.5), rel=0.05)

    def test_truncation(self):
        p = _chain([[0.999, 0.001], [0.0, 1.0]])
        est = estimate_rul(p, [0], np.zeros((1, 1)), {1}, RulConfig(horizon_cap=20, n_rollouts=200))
        assert est.mean_rul <= 20 and est.truncated_fraction > 0.9

    def test_deterministic_and_errors(self):
        p = _chain(LTR3)
        a = estimate_rul(p, [0], np.zeros((1, 1)), {2}, RulConfig(seed=4))
        assert a == estimate_rul(p, [0], np.zeros((1, 1)), {2}, RulConfig(seed=4))
        with pytest.raises(ConfigError):
            estimate_rul(p, [0], np.zeros((1, 1)), set())

    def test_trend_monotone(self, tmp_path):
        cfg = SyntheticConfig.left_to_right(6, 0.05, n_units=1, noise=0.1)
        data, _ = generate_synthetic(cfg, 2)
        p = IohmmParams(np.eye(6)[0], cfg.transitions, cfg.means, cfg.stds ** 2)
        unit = data.units[0]
        trend = rul_trend(p, unit.symbols(), unit.sensors, {5}, stride=5, config=RulConfig(seed=1))
        rho = spearmanr([e.cycle for e in trend], [e.mean_rul for e in trend]).statistic
        assert rho < -0.9
        last = rul_trend(p, unit.symbols(), unit.sensors, {5}, stride=1)[-1]
        assert last.mean_rul <= 2
        single = rul_trend(p, unit.symbols(), unit.sensors, {5}, stride=unit.length)
        assert [e.cycle for e in single] == [1]
        with pytest.raises(ConfigError):
            rul_trend(p, unit.symbols(), unit.sensors, {5}, stride=0)
        text = write_trend_csv(tmp_path / "t.csv", [(1, e) for e in trend]).read_text().splitlines()
        assert text[0] == "unit,cycle,mean_rul,std_rul,truncated_fraction" and len(text) == len(trend) + 1
