from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srla.data import RunToFailureDataset, UnitTrajectory
from srla.env import EnvConfig, HOLD, REPLACE
from srla.errors import DatasetError, EpisodeError
from srla.evaluate import (
    ConstantPolicy,
    IdealPolicy,
    ReplaceAtPolicy,
    cmc,
    evaluate_policy,
    failed_report,
    format_table,
    imc,
    literal_q_estimate,
    write_reports_csv,
)
from srla.features import build_pipeline
from srla.network import init_network


def _pool(lengths, seed=0):
    rng = np.random.default_rng(seed)
    return RunToFailureDataset(
        tuple(UnitTrajectory(i + 1, rng.normal(size=(T, 2)), np.zeros((T, 1))) for i, T in enumerate(lengths)),
        ("s_1", "s_2"), ("op_1",))


class TestBounds:
    def test_imc_examples(self):
        assert imc([101, 201], 100) == pytest.approx(200 / 300, abs=0)
        assert imc([2], 100) == 100.0

    def test_imc_short_unit(self):
        with pytest.raises(DatasetError):
            imc([1, 50], 100)

    def test_cmc_examples(self):
        assert cmc([101, 201], 100, 1000) == float(Fraction(2200, 302))
        with pytest.raises(DatasetError):
            cmc([], 100, 1000)

    def test_cmc_without_failure_cost(self):
        T = [37, 80, 150]
        assert cmc(T, 100, 0) == pytest.approx(imc(T, 100) * sum(t - 1 for t in T) / sum(T), rel=1e-15)

    def test_dataset_argument(self):
        assert imc(_pool([11, 21]), 10) == imc([11, 21], 10)


class TestEvaluatePolicy:
    def test_ideal_policy(self):
        pool = _pool([12, 30, 45, 101])
        r = evaluate_policy(pool, IdealPolicy()).report
        assert r.q_star_avg == r.imc and r.failure_pct == 0.0 and r.avg_remaining_cycles == 1.0
        assert r.imc_over_q == 1.0 and r.n_units == 4

    def test_always_hold(self):
        pool = _pool([12, 30, 45, 101])
        r = evaluate_policy(pool, ConstantPolicy(HOLD)).report
        assert r.q_star_avg == r.cmc and r.failure_pct == 100.0 and r.avg_remaining_cycles == 0.0

    def test_mean_episode_cost(self):
        pool = _pool([10, 20])
        r = evaluate_policy(pool, ConstantPolicy(HOLD), EnvConfig(c_r=100, c_f=1000)).report
        assert r.mean_episode_cost == pytest.approx((1100 / 10 + 1100 / 20) / 2)

    @settings(max_examples=80, deadline=None)
    @given(lengths=st.lists(st.integers(2, 60), min_size=1, max_size=6), margin=st.integers(-3, 70))
    def test_bounds(self, lengths, margin):
        pool = _pool(lengths)
        ev = evaluate_policy(pool, ReplaceAtPolicy(margin, relative=True))
        r = ev.report
        T = np.array(lengths, float)
        # the pooled cost rate never beats the ideal rate
        assert r.imc <= r.q_star_avg
        # per-episode costs are bracketed unit by unit
        assert np.mean(100 / T) - 1e-12 <= r.mean_episode_cost <= np.mean(1100 / T) + 1e-12
        assert (r.failure_pct == 0) == all(not e.failed for e in ev.episodes)
        for e, t in zip(ev.episodes, lengths):
            assert e.total_cost in (pytest.approx(100 / t), pytest.approx(1100 / t))
        # replacing no earlier than the corrective cost rate allows keeps the rate below CMC
        if all(e.failed or 100 / e.end_cycle <= r.cmc for e in ev.episodes):
            assert r.q_star_avg <= r.cmc + 1e-12

    def test_very_early_replacement_exceeds_cmc(self):
        r = evaluate_policy(_pool([12]), ReplaceAtPolicy(1)).report
        assert r.q_star_avg == 100.0 > r.cmc

    def test_each_unit_once_from_start(self):
        pool = _pool([5, 6, 7])
        ev = evaluate_policy(pool, ConstantPolicy(HOLD))
        assert [t[0].t for t in ev.traces] == [1, 1, 1]
        assert [t[0].unit_id for t in ev.traces] == [1, 2, 3]

    def test_policy_error_names_unit(self):
        class Broken:
            def begin_episode(self, unit):
                if unit.unit_id == 2:
                    raise RuntimeError("boom")

            def act(self, s):
                return HOLD

        with pytest.raises(EpisodeError, match="unit 2"):
            evaluate_policy(_pool([5, 6]), Broken())

    def test_literal_estimate(self):
        pool = _pool([4, 6])
        pipe = build_pipeline("raw", pool)
        q = init_network(2, 2, 0)
        for w in q.weights:
            w[:] = 0.0
        for b in q.biases:
            b[:] = 0.0
        q.biases[-1][:] = [0.0, -1.0]
        ev = evaluate_policy(pool, ReplaceAtPolicy(2), gamma=0.5, q=q, pipeline=pipe)
        # two replace transitions (terminal) and two holds bootstrapping max Q = 0
        expected = np.mean([0.0, 100 / 4, 0.0, 100 / 6])
        assert ev.report.literal_estimate == pytest.approx(expected)
        assert literal_q_estimate(ev.traces, q, pipe, pool, 0.5) == ev.report.literal_estimate


class TestOutputs:
    def test_csv_and_table(self, tmp_path):
        r = evaluate_policy(_pool([10, 20]), IdealPolicy(), system="ideal").report
        bad = failed_report("3", "DatasetError: nope")
        path = write_reports_csv(tmp_path / "t.csv", [r, bad], [{"c_f": 25}, {"c_f": 25}])
        lines = path.read_text().splitlines()
        assert lines[0].startswith("c_f,system,q_star_avg,imc,cmc,imc_over_q,failure_pct,avg_remaining_cycles")
        assert lines[1].startswith("25,ideal,") and "DatasetError" in lines[2]
        text = format_table([r, bad])
        assert "ideal" in text and "error: DatasetError" in text
