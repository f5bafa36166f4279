import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asdesign.core_data import DgpConfig, SyntheticGeo, generate_synthetic
from asdesign.design import DesignConfig
from asdesign.estimators import (
    EstimationError, TrimmedMatchConfig, arm_balance, estimate_iroas_aggregate, match_supergeo_pairs,
    pair_deltas, pipeline_asd_tm, pipeline_sg_tm, pipeline_tm_baseline, randomise_arms, run_experiment,
    trimmed_match_estimate, trimmed_match_root,
)
from asdesign.graph_embed import GnnConfig


def geos_from(r, s, tau):
    return [SyntheticGeo(float(a), float(b), float(c)) for a, b, c in zip(r, s, tau)]


def grid_root(d_r, d_s, q, lo, hi, n=200_001):
    """Dense-grid oracle: first sign change of the trimmed residual mean."""
    k = len(d_r)
    n_trim = math.ceil(q * k - 1e-12)
    th = np.linspace(lo, hi, n)
    e = d_r[None, :] - th[:, None] * d_s[None, :]
    order = np.argsort(np.abs(e), axis=1, kind="stable")[:, :k - n_trim]
    f = np.take_along_axis(e, order, axis=1).mean(axis=1)
    change = np.flatnonzero(np.sign(f[:-1]) != np.sign(f[1:]))
    return th[change[0]], th[1] - th[0]


class TestRunExperiment:
    def test_all_control_reveals_baseline(self):
        geos = geos_from([10, 20, 30], [1, 2, 3], [2, 4, 6])
        out = run_experiment(geos, [False] * 3)
        np.testing.assert_array_equal(out.response, [10, 20, 30])
        np.testing.assert_array_equal(out.spend_uplift, 0)

    def test_single_treated_adds_effect(self):
        geos = geos_from([10, 20, 30], [1, 2, 3], [2, 4, 6])
        base = run_experiment(geos, [False] * 3)
        out = run_experiment(geos, ["C", "T", "C"])
        assert out.response[1] - base.response[1] == pytest.approx(4)
        assert out.spend_uplift.tolist() == [0, 2, 0]

    def test_ten_geo_oracle(self):
        rng = np.random.default_rng(0)
        r, s = rng.uniform(100, 200, 10), rng.uniform(5, 10, 10)
        tau = 2 * s
        arms = rng.random(10) < 0.5
        out = run_experiment(geos_from(r, s, tau), {i: bool(a) for i, a in enumerate(arms)})
        np.testing.assert_allclose(out.response, r + tau * arms)
        np.testing.assert_allclose(out.spend_uplift, s * arms)

    def test_missing_arm(self):
        geos = geos_from([1, 2], [1, 1], [1, 1])
        with pytest.raises(EstimationError):
            run_experiment(geos, {0: "T"})
        with pytest.raises(EstimationError):
            run_experiment(geos, [True])


class TestAggregate:
    def test_zero_effect_gives_zero(self):
        geos = geos_from([100, 200, 100, 200], [5, 5, 5, 5], [0, 0, 0, 0])
        out = run_experiment(geos, [True, True, False, False])
        assert estimate_iroas_aggregate(out, [100, 200, 100, 200]) == pytest.approx(0.0)

    def test_homogeneous_balanced_recovers_two(self):
        r = np.array([100.0, 200, 100, 200])
        s = np.array([5.0, 7, 5, 7])
        out = run_experiment(geos_from(r, s, 2 * s), [True, True, False, False])
        assert estimate_iroas_aggregate(out, r) == pytest.approx(2.0)

    def test_empty_arm(self):
        out = run_experiment(geos_from([1, 2], [1, 1], [1, 1]), [True, True])
        with pytest.raises(EstimationError):
            estimate_iroas_aggregate(out, [1, 2])


class TestTrimmedMatch:
    def test_identical_ratios_no_trim(self):
        d_s = np.array([1.0, 2, 3, 4])
        assert trimmed_match_root(2.5 * d_s, d_s, TrimmedMatchConfig(0.0)) == pytest.approx(2.5)

    def test_outlier_is_trimmed(self):
        d_s = np.ones(5)
        d_r = np.array([2.0, 2, 2, 2, 100])
        assert trimmed_match_root(d_r, d_s, TrimmedMatchConfig(0.2)) == pytest.approx(2.0, abs=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_dense_grid_oracle(self, seed):
        rng = np.random.default_rng(seed)
        d_s = rng.uniform(1, 3, 3)
        d_r = 2 * d_s + rng.normal(0, 1, 3)
        ratios = d_r / d_s
        got = trimmed_match_root(d_r, d_s, TrimmedMatchConfig(0.0))
        want, step = grid_root(d_r, d_s, 0.0, ratios.min(), ratios.max())
        assert abs(got - want) <= 2 * step

    @pytest.mark.parametrize("seed", range(3))
    def test_dense_grid_oracle_trimmed(self, seed):
        rng = np.random.default_rng(100 + seed)
        d_s = rng.uniform(1, 3, 10)
        d_r = 2 * d_s + rng.normal(0, 1, 10)
        ratios = d_r / d_s
        got = trimmed_match_root(d_r, d_s, TrimmedMatchConfig(0.1))
        want, step = grid_root(d_r, d_s, 0.1, ratios.min(), ratios.max())
        assert abs(got - want) <= 2 * step

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_scale_equivariance(self, seed, c):
        rng = np.random.default_rng(seed)
        d_s = rng.uniform(1, 3, 8)
        d_r = 2 * d_s + rng.normal(0, 1, 8)
        base = trimmed_match_root(d_r, d_s)
        # scaling responses scales the root; scaling spend divides it
        assert trimmed_match_root(c * d_r, d_s) == pytest.approx(c * base, rel=1e-6)
        assert trimmed_match_root(d_r, c * d_s) == pytest.approx(base / c, rel=1e-6)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_pair_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        d_s = rng.uniform(1, 3, 9)
        d_r = 2 * d_s + rng.normal(0, 1, 9)
        perm = rng.permutation(9)
        assert trimmed_match_root(d_r[perm], d_s[perm]) == pytest.approx(trimmed_match_root(d_r, d_s), abs=1e-7)

    def test_too_few_pairs(self):
        with pytest.raises(EstimationError):
            trimmed_match_root([1.0, 2.0], [1.0, 1.0], TrimmedMatchConfig(0.1))

    def test_zero_spend(self):
        with pytest.raises(EstimationError):
            trimmed_match_root([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], TrimmedMatchConfig(0.0))

    def test_bad_trim(self):
        with pytest.raises(ValueError):
            TrimmedMatchConfig(0.5)

    def test_pairs_must_be_disjoint(self):
        out = run_experiment(geos_from([1, 2, 3], [1, 1, 1], [1, 1, 1]), [True, False, False])
        with pytest.raises(EstimationError):
            pair_deltas(out, [(0, 1), (0, 2)])

    def test_grouped_pairs(self):
        r = np.array([10.0, 11, 20, 22])
        s = np.array([1.0, 1, 2, 2])
        out = run_experiment(geos_from(r, s, 2 * s), [True, False, True, False])
        d_r, d_s = pair_deltas(out, [([0, 2], [1, 3])])
        assert d_r[0] == pytest.approx(30 + 6 - 33)
        assert d_s[0] == pytest.approx(3)
        est = trimmed_match_estimate(out, [(0, 1), (2, 3)], TrimmedMatchConfig(0.0))
        assert np.isfinite(est)


class TestPairing:
    def test_rank_matching(self):
        b = np.array([1.0, 10, 2, 11])
        pairs = match_supergeo_pairs([[0], [1]], [[3], [2]], b)
        assert [(list(t), list(c)) for t, c in pairs] == [([0], [2]), ([1], [3])]

    def test_drops_one_from_longer_arm(self):
        b = np.array([1.0, 5, 10, 1.1, 10.2])
        pairs = match_supergeo_pairs([[0], [1], [2]], [[3], [4]], b)
        assert len(pairs) == 2
        assert [list(t) for t, _ in pairs] == [[0], [2]]

    def test_arm_balance(self):
        assert arm_balance([1, 2, 3], np.array([True, False, True])) == 2.0


@pytest.fixture(scope="module")
def flat():
    return generate_synthetic(DgpConfig(n_geos=40, het_scale=0.0, seed=3))


class TestPipelines:
    def test_tm_homogeneous(self, flat):
        res = pipeline_tm_baseline(flat, seed=1)
        assert res.method == "TM"
        assert abs(res.estimate - 2.0) < 0.5
        assert res.abs_bias == pytest.approx(abs(res.estimate - 2.0))
        # every geo in a pair; the two arms are the same size
        assert res.treated.sum() == 20

    def test_tm_deterministic(self, flat):
        a = pipeline_tm_baseline(flat, seed=4)
        b = pipeline_tm_baseline(flat, seed=4)
        assert a.estimate == b.estimate
        np.testing.assert_array_equal(a.treated, b.treated)

    def test_sg_homogeneous(self, flat):
        res = pipeline_sg_tm(flat, seed=2, time_limit=10)
        assert res.method == "SG"
        assert np.isfinite(res.estimate)
        assert res.status in ("optimal", "feasible-timeout")
        assert 0 < res.treated.sum() < 40

    def test_asd_small(self, flat):
        cfg = DesignConfig(gnn=GnnConfig(heads=2, hidden=8, out_dim=4, epochs=5), candidate_count=6,
                           time_limit=5)
        res = pipeline_asd_tm(flat, seed=0, cfg=cfg)
        assert res.method == "ASD"
        assert np.isfinite(res.estimate)
        assert len(res.supergeo) == 40

    def test_zero_effect_is_centred(self):
        ests = []
        for k in range(20):
            geos = generate_synthetic(DgpConfig(n_geos=40, true_iroas=0.0, het_scale=0.0, seed=k))
            ests.append(pipeline_tm_baseline(geos, seed=k, true_iroas=0.0).estimate)
        ests = np.array(ests)
        assert abs(ests.mean()) < 3 * ests.std(ddof=1) / math.sqrt(len(ests)) + 0.05

    def test_too_small(self):
        geos = generate_synthetic(DgpConfig(n_geos=6))
        with pytest.raises(ValueError):
            pipeline_tm_baseline(geos, seed=0)

    def test_randomise_arms_is_mirror_or_identity(self):
        t = np.array([True, False, True, False])
        outs = {tuple(randomise_arms(t, s)) for s in range(20)}
        assert outs == {tuple(t), tuple(~t)}
