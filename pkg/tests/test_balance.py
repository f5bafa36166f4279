import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra import numpy as hnp

from asdesign.balance import (
    EXTENSIVE, INTENSIVE, AggregationError, ArmAssignment, CovariateSet, arm_total_gap, design_cost,
    masmd, smd, supergeo_covariate,
)
from asdesign.candidates import CandidatePartition

finite = st.floats(-1e4, 1e4, allow_nan=False)
groups = hnp.arrays(np.float64, st.integers(2, 12), elements=finite)


def singletons(n):
    return CandidatePartition([[i] for i in range(n)], n)


class TestAggregation:
    def test_singleton_passthrough(self):
        part = singletons(3)
        v = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(supergeo_covariate(part, v, EXTENSIVE), v)
        np.testing.assert_array_equal(supergeo_covariate(part, v, INTENSIVE, np.ones(3)), v)

    def test_sum(self):
        part = CandidatePartition([[0, 1]], 2)
        assert supergeo_covariate(part, [2.0, 3.0], EXTENSIVE)[0] == 5.0

    def test_weighted_mean(self):
        part = CandidatePartition([[0, 1]], 2)
        assert supergeo_covariate(part, [10.0, 20.0], INTENSIVE, [1.0, 3.0])[0] == pytest.approx(17.5)

    def test_zero_weight(self):
        with pytest.raises(AggregationError):
            supergeo_covariate(CandidatePartition([[0, 1]], 2), [1.0, 2.0], INTENSIVE, [0.0, 0.0])


class TestSmd:
    def test_identical(self):
        assert smd([1, 2, 3], [1, 2, 3]) == 0

    def test_hand_value(self):
        assert smd([0, 2], [1, 3]) == pytest.approx(-1 / math.sqrt(2))

    def test_sentinel(self):
        assert smd([1], [1]) == 0
        assert smd([2], [1]) == math.inf
        assert smd([1, 1], [2, 2]) == -math.inf

    def test_empty(self):
        with pytest.raises(ValueError):
            smd([], [1])

    @given(groups, groups)
    def test_antisymmetric(self, a, b):
        assert smd(a, b) == -smd(b, a)

    @given(groups, groups, st.floats(0.01, 100), st.floats(-100, 100))
    def test_affine(self, a, b, scale, shift):
        assume(np.ptp(np.concatenate([a, b])) > 1e-3)
        base = smd(a, b)
        assume(math.isfinite(base))
        assert smd(scale * a + shift, scale * b + shift) == pytest.approx(base, rel=1e-7, abs=1e-9)
        assert abs(smd(-scale * a + shift, -scale * b + shift)) == pytest.approx(abs(base), rel=1e-7, abs=1e-9)


def _cov(n, rng, lam=(0.5, 0.5)):
    mods = {"m1": rng.normal(size=n), "m2": rng.uniform(1, 2, size=n)}
    return CovariateSet(rng.uniform(1, 10, size=n), mods, dict(zip(mods, lam)),
                        {"m2": INTENSIVE})


class TestCost:
    def test_balanced_fixture(self):
        cov = CovariateSet(np.array([1.0, 2.0, 3.0, 4.0]))
        cost, rows = design_cost(singletons(4), ArmAssignment.from_labels("TCCT"), cov)
        assert cost == 0.0 and rows[0]["term"] == "baseline"

    def test_identical_profiles(self):
        cov = CovariateSet(np.array([1.0, 1.0, 5.0, 5.0]), {"m": np.array([2.0, 2.0, 3.0, 3.0])})
        part = CandidatePartition([[0, 2], [1, 3]], 4)
        assert design_cost(part, ArmAssignment([True, False]), cov)[0] == 0.0

    def test_lambda_zero(self):
        rng = np.random.default_rng(0)
        cov = _cov(8, rng, lam=(0.0, 0.0))
        arms = ArmAssignment(np.arange(8) % 2 == 0)
        cost, rows = design_cost(singletons(8), arms, cov)
        assert cost == abs(smd(cov.baseline[arms.treated], cov.baseline[~arms.treated]))
        assert [r["contribution"] for r in rows[1:]] == [0.0, 0.0]

    def test_breakdown_sums(self):
        rng = np.random.default_rng(1)
        cov = _cov(10, rng)
        cost, rows = design_cost(singletons(10), ArmAssignment(np.arange(10) < 4), cov)
        assert cost == pytest.approx(sum(r["contribution"] for r in rows))
        assert {r["term"] for r in rows} == {"baseline", "m1", "m2"}

    @given(st.integers(0, 10_000), st.integers(4, 12))
    def test_swap_invariance(self, seed, n):
        rng = np.random.default_rng(seed)
        cov = _cov(n, rng)
        t = rng.random(n) < 0.5
        assume(t.any() and not t.all())
        arms = ArmAssignment(t)
        assert design_cost(singletons(n), arms, cov)[0] == pytest.approx(
            design_cost(singletons(n), arms.swapped(), cov)[0], rel=1e-12)

    @given(st.integers(0, 10_000), st.floats(-50, 50).filter(lambda a: abs(a) > 0.01), st.floats(-5, 5))
    def test_affine_modifier_invariance(self, seed, a, b):
        rng = np.random.default_rng(seed)
        cov = _cov(8, rng)
        arms = ArmAssignment(np.arange(8) % 3 == 0)
        c0 = design_cost(singletons(8), arms, cov)[0]
        mods = dict(cov.modifiers)
        mods["m1"] = a * mods["m1"] + b
        cov2 = CovariateSet(cov.baseline, mods, dict(cov.lambdas), dict(cov.aggregation))
        assert design_cost(singletons(8), arms, cov2)[0] == pytest.approx(c0, rel=1e-9)

    def test_masmd(self):
        cov = CovariateSet(np.ones(4), {"a": np.array([0.0, 2.0, 1.0, 3.0])})
        arms = ArmAssignment.from_labels("TTCC")
        assert masmd(singletons(4), arms, cov) == pytest.approx(1 / math.sqrt(2))
        with pytest.raises(ValueError):
            masmd(singletons(4), arms, CovariateSet(np.ones(4)))

    def test_masmd_two_modifiers(self, monkeypatch):
        import asdesign.balance as bal
        vals = iter([0.2, -0.4])
        monkeypatch.setattr(bal, "smd", lambda a, b: next(vals))
        cov = CovariateSet(np.ones(4), {"a": np.zeros(4), "b": np.zeros(4)})
        assert bal.masmd(singletons(4), ArmAssignment.from_labels("TCTC"), cov) == pytest.approx(0.3)

    def test_arm_gap(self):
        assert arm_total_gap(singletons(4), ArmAssignment.from_labels("TCCT"), [1, 2, 3, 4]) == 0.0


class TestTypes:
    def test_arms_nonempty(self):
        with pytest.raises(ValueError):
            ArmAssignment([True, True])
        with pytest.raises(ValueError):
            ArmAssignment.from_labels("TX")

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            CovariateSet(np.ones(2), {"m": np.ones(2)}, {"m": -1.0})

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            CovariateSet(np.ones(2), {"m": np.ones(3)})
