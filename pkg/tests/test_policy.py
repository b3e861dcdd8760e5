"""Depth policies and the link budget."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accordion.arch import Scheme
from accordion.errors import ConfigError
from accordion.nncore import make_rng
from accordion.policy import (
    DepthPolicy,
    from_size_requests,
    from_throughput,
    link_budget_bits,
    named_policy,
    sample,
)


def draws(policy, count, seed=0):
    rng = make_rng(seed, "policy-test")
    return np.array([sample(policy, rng).kept_units for _ in range(count)])


class TestLinkBudget:
    def test_decimal_inputs_are_exact(self):
        assert link_budget_bits(240e6, 0.2) == 48_000_000
        assert link_budget_bits(100e6, 0.3) == 30_000_000
        # the float product is 869999.9999999999 here
        assert link_budget_bits(3e6, 0.29) == 870_000

    @given(st.integers(1, 10**10), st.integers(1, 10**5))
    @settings(max_examples=100)
    def test_matches_fraction_floor(self, t, ms):
        assert link_budget_bits(t, Fraction(ms, 1000)) == (t * ms) // 1000


class TestFullElseUniform:
    def test_full_rate(self):
        pol = DepthPolicy.full_else_uniform(Scheme.COML, 0.5, 18)
        n = draws(pol, 20000)
        assert 0.48 <= np.mean(n == 18) <= 0.52
        assert n.min() >= 1

    def test_non_full_is_uniform(self):
        pol = DepthPolicy.full_else_uniform(Scheme.COML, 0.3, 6)
        n = draws(pol, 30000)
        counts = np.bincount(n[n < 6], minlength=6)[1:]
        expected = (n < 6).sum() / 5
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 20.5  # 4 dof, p ~ 0.0004

    def test_probabilities_and_expectation(self):
        pol = DepthPolicy.full_else_uniform(Scheme.BLOCKCOML, 0.5, 18)
        p = pol.probabilities()
        assert p.sum() == pytest.approx(1.0)
        assert p[0] == 0 and p[18] == pytest.approx(0.5)
        assert pol.expected_units() == pytest.approx(0.5 * 18 + 0.5 * 9)

    def test_empirical_mean_matches_expectation(self):
        pol = named_policy("coml-03", 18)
        assert draws(pol, 20000).mean() == pytest.approx(pol.expected_units(), rel=0.02)

    def test_single_unit(self):
        assert set(draws(DepthPolicy.full_else_uniform("coml", 0.0, 1), 50)) == {1}


class TestCategoricalAndFixed:
    def test_fixed_never_varies(self):
        assert set(draws(DepthPolicy.fixed("coml", 7, 18), 200)) == {7}

    def test_categorical_frequencies(self):
        w = [0.1, 0.0, 0.6, 0.3]
        n = draws(DepthPolicy.categorical("coml", w, 4), 20000)
        freq = np.bincount(n, minlength=5)[1:] / n.size
        np.testing.assert_allclose(freq, w, atol=0.015)

    @pytest.mark.parametrize(
        "kw",
        [dict(kind="fixed", n=19), dict(kind="full_else_uniform", p_full=1.5),
         dict(kind="categorical", weights=(0.5, 0.4)), dict(kind="nope")],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            DepthPolicy(Scheme.COML, 18 if kw.get("kind") != "categorical" else 2, **kw)


def linear_size(n):
    return 1000 + 100 * n


class TestFromDistributions:
    def test_two_point_throughput(self):
        # 0.1 s deadline: 15 kbps fits n = 5, 19 kbps fits n = 9
        samples = [15_000] * 50 + [19_000] * 50
        pol = from_throughput(samples, 0.1, linear_size, "coml", 10)
        p = pol.probabilities()
        assert p[5] == pytest.approx(0.5) and p[9] == pytest.approx(0.5)

    def test_counting_oracle(self):
        rng = np.random.default_rng(0)
        samples = rng.uniform(5_000, 25_000, 500).round().tolist()
        pol = from_throughput(samples, 0.1, linear_size, "coml", 10)
        counts = np.zeros(11)
        for t in samples:
            budget = int(t) // 10
            best = max([n for n in range(11) if linear_size(n) <= budget], default=0)
            counts[max(best, 1)] += 1
        np.testing.assert_allclose(pol.probabilities(), counts / counts.sum())

    def test_size_requests(self):
        pol = from_size_requests({1150: 3, 1500: 1, 10**9: 1}, linear_size, "coml", 10)
        p = pol.probabilities()
        assert p[2] == pytest.approx(0.6) and p[5] == pytest.approx(0.2)
        assert p[10] == pytest.approx(0.2)

    def test_empty_inputs(self):
        with pytest.raises(ConfigError):
            from_throughput([], 0.1, linear_size, "coml", 10)
        with pytest.raises(ConfigError):
            from_size_requests({}, linear_size, "coml", 10)


class TestNamedPolicies:
    def test_names(self):
        assert named_policy("baseline", 18).kind == "fixed"
        pol = named_policy("blockcoml-05", 18)
        assert pol.scheme is Scheme.BLOCKCOML and pol.p_full == 0.5
        assert named_policy("coml-03", 18).p_full == pytest.approx(0.3)
        with pytest.raises(ConfigError):
            named_policy("coml-07", 18)
