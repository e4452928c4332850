import math
from statistics import NormalDist

import pytest
from hypothesis import given, settings, strategies as st

from halp.reliability import (DeadlineSpec, OffloadModel, ReliabilityError, load_reliability_reference,
                              min_offload_rate, rate_fluctuation, reliability_closed_form,
                              reliability_monte_carlo, slack, slack_consistency,
                              slack_from_probability, std_normal_cdf, wilson_interval)

MBIT4 = 4 * 125_000 * 8
D = 4 / 30


def test_min_offload_rate():
    assert min_offload_rate(4, 125_000, 30) == pytest.approx(30e6)
    # binary kilobytes give the rounded-up figure
    assert math.ceil(min_offload_rate(4, 128_000, 30) / 1e6) == 31
    assert min_offload_rate(4, 125_000, 0) == 0
    assert min_offload_rate(1, 250_000, 30) == 2 * min_offload_rate(4, 125_000, 30)
    with pytest.raises(ReliabilityError):
        min_offload_rate(0, 1, 1)


def test_rate_fluctuation_examples():
    assert rate_fluctuation(OffloadModel(40e6, MBIT4, 1e-3)) / 1e6 == pytest.approx(1.165, abs=1e-3)
    assert rate_fluctuation(OffloadModel(60e6, MBIT4, 9e-3)) / 1e6 == pytest.approx(17.3, abs=0.05)
    assert rate_fluctuation(OffloadModel(60e6, MBIT4, 0.0)) == 0.0


def test_cdf_against_stdlib():
    nd = NormalDist()
    for z in (-8, -3.2, -1, -1e-3, 0, 0.5, 2.457, 3.826, 6):
        assert std_normal_cdf(z) == pytest.approx(nd.cdf(z), abs=1e-12)


def test_closed_form_examples():
    m = OffloadModel(40e6, MBIT4, 1e-3)
    assert reliability_closed_form(m, DeadlineSpec(m.mu + 0.01, 0.01)) == pytest.approx(0.5)
    p = reliability_closed_form(m, DeadlineSpec(D, 4 / 124))
    assert p == pytest.approx(0.86, abs=0.005)
    assert abs(p - 0.815931) <= 0.05
    p = reliability_closed_form(OffloadModel(40e6, MBIT4, 5e-3), DeadlineSpec(D, 4 / 225))
    assert p == pytest.approx(0.999104, abs=1e-3)


def test_zero_sigma_is_a_step():
    m = OffloadModel(40e6, MBIT4, 0.0)
    assert reliability_closed_form(m, DeadlineSpec(0.2, 0.05)) == 1.0
    assert reliability_closed_form(m, DeadlineSpec(0.12, 0.05)) == 0.0
    assert reliability_monte_carlo(m, DeadlineSpec(0.2, 0.05), 1000).p == 1.0
    assert reliability_monte_carlo(m, DeadlineSpec(0.12, 0.05), 1000).p == 0.0


def test_slack_inverse():
    m = OffloadModel(60e6, MBIT4, 9e-3)
    spec = DeadlineSpec(D, 4 / 124)
    p = reliability_closed_form(m, spec)
    assert slack_from_probability(p, m.sigma) == pytest.approx(slack(m, spec), rel=1e-9)
    with pytest.raises(ReliabilityError):
        slack_from_probability(1.0, 1.0)


def test_reference_slack_pairs_agree():
    s9 = slack_from_probability(0.999934, 9e-3)
    s14 = slack_from_probability(0.992992, 14e-3)
    assert s9 == pytest.approx(34.4e-3, abs=0.1e-3) and abs(s9 - s14) < 0.5e-3


def test_monte_carlo_is_seeded_and_worker_independent():
    m = OffloadModel(40e6, MBIT4, 5e-3)
    spec = DeadlineSpec(D, 4 / 124)
    a = reliability_monte_carlo(m, spec, 200_001, seed=9, workers=1)
    b = reliability_monte_carlo(m, spec, 200_001, seed=9, workers=3)
    assert a == b
    assert reliability_monte_carlo(m, spec, 200_001, seed=10) != a
    p = reliability_closed_form(m, spec)
    assert abs(a.p - p) <= 3 * math.sqrt(p * (1 - p) / a.n)
    assert a.low <= a.p <= a.high


def test_monte_carlo_clamps_negative_draws():
    m = OffloadModel(1e9, 1e3, 1e-3)  # mean 1 us, sd 1 ms
    res = reliability_monte_carlo(m, DeadlineSpec(1.0, 0.0), 10_000, seed=1)
    assert res.clamped > 4000 and res.p == 1.0
    with pytest.raises(ReliabilityError):
        reliability_monte_carlo(m, DeadlineSpec(1.0, 0.0), 0)


def test_wilson_interval_edges():
    assert wilson_interval(0, 10)[0] == 0.0
    assert wilson_interval(10, 10)[1] == 1.0
    lo, hi = wilson_interval(500, 1000)
    assert lo < 0.5 < hi


def test_validation():
    with pytest.raises(ReliabilityError):
        OffloadModel(0, 1, 0)
    with pytest.raises(ReliabilityError):
        OffloadModel(1, 1, -1)
    with pytest.raises(ReliabilityError):
        DeadlineSpec(0, 1)


def test_table_fixture_shape():
    table = load_reliability_reference()
    assert len(table.cells) == 14
    assert table.deadline == pytest.approx(133.333e-3, abs=1e-6)
    assert table.payload == MBIT4
    assert {c.scheme for c in table.cells} == {"pretrained", "halp"}


def test_halp_dominates_on_every_column():
    table = load_reliability_reference()
    by = {}
    for c in table.cells:
        by.setdefault((c.rate, c.sigma), {})[c.scheme] = reliability_closed_form(
            table.model(c), table.spec(c))
    assert all(v["halp"] >= v["pretrained"] for v in by.values())


def test_slack_consistency_report():
    groups = slack_consistency(load_reliability_reference())
    assert len(groups) == 6
    assert all(g["bound_ok"] and g["spread"] < 0.5e-3 for g in groups)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e6, 1e9), st.floats(1e5, 1e8), st.floats(1e-4, 0.05), st.floats(0.01, 1.0),
       st.floats(0.0, 0.5), st.floats(1.01, 3.0))
def test_monotonicity(rate, payload, sigma, deadline, t_inf, factor):
    base = reliability_closed_form(OffloadModel(rate, payload, sigma), DeadlineSpec(deadline, t_inf))
    # wider spread only hurts while the mean still meets the deadline
    assert reliability_closed_form(OffloadModel(rate, payload, sigma * factor),
                                   DeadlineSpec(deadline, t_inf)) <= base or base <= 0.5
    assert reliability_closed_form(OffloadModel(rate, payload, sigma),
                                   DeadlineSpec(deadline, t_inf * factor)) <= base
    assert reliability_closed_form(OffloadModel(rate, payload * factor, sigma),
                                   DeadlineSpec(deadline, t_inf)) <= base
    assert reliability_closed_form(OffloadModel(rate, payload, sigma),
                                   DeadlineSpec(deadline * factor, t_inf)) >= base
    assert reliability_closed_form(OffloadModel(rate * factor, payload, sigma),
                                   DeadlineSpec(deadline, t_inf)) >= base
