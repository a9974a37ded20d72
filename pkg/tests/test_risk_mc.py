from __future__ import annotations

import csv
import dataclasses
import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_risk.cascade_sim import CascadeConfig, CascadeNonTermination, simulate_cascade
from cascade_risk.dispatch import solve_dcopf, solve_scdcopf
from cascade_risk.risk_mc import (
    BLOCK_SIZE,
    CSV_HEADER,
    RTS_BINS,
    OutageModel,
    _bin_index,
    block_stream,
    build_outage_model,
    choose_max_k,
    contingency_probability,
    exhaustive_risk,
    iteration_stream,
    outage_count_distribution,
    risk_csv,
    rolling_average,
    run_monte_carlo,
    sample_contingency,
)

from conftest import TOY6_P, make_case, ring4, toy6, triangle


def with_rates(case, rates):
    return case.with_branches(
        [dataclasses.replace(b, outage_rate=r) for b, r in zip(case.branches, rates)]
    )


@pytest.mark.parametrize("rate, p", [(8760.0, 1.0), (0.0, 0.0), (0.438, 5.0e-5), (876.0, 0.1)])
def test_outage_probability_formula(rate, p):
    case = with_rates(triangle(), [rate, 1.0, 1.0])
    assert build_outage_model(case).p_fail[0] == pytest.approx(p, rel=1e-12, abs=0)


def test_outage_rate_above_hours_rejected():
    with pytest.raises(ValueError):
        build_outage_model(with_rates(triangle(), [8761.0, 1.0, 1.0]))


def test_out_of_service_branch_never_fails():
    case = with_rates(triangle(), [8760.0] * 3).with_outages([1])
    assert build_outage_model(case).p_fail.tolist() == [1.0, 0.0, 1.0]


def test_sample_extremes():
    rng = np.random.default_rng(0)
    assert sample_contingency(OutageModel(np.zeros(5)), rng).branch_ids == ()
    assert sample_contingency(OutageModel(np.ones(5)), rng).branch_ids == (0, 1, 2, 3, 4)


def test_sample_pair_frequency():
    n = 200_000
    model = OutageModel(np.array([0.5, 0.5]))
    rng = block_stream(11, 0)
    both = sum(sample_contingency(model, rng).order == 2 for _ in range(n))
    sigma = np.sqrt(0.25 * 0.75 / n)
    assert abs(both / n - 0.25) < 3 * sigma


def test_block_draws_pair_frequency_million():
    # the vectorised path used by the Monte Carlo loop
    n_blocks = 1_000_000 // BLOCK_SIZE + 1
    hits = total = 0
    for b in range(n_blocks):
        u = block_stream(5, b).random((BLOCK_SIZE, 2))
        hits += int(np.all(u < 0.5, axis=1).sum())
        total += BLOCK_SIZE
    sigma = np.sqrt(0.25 * 0.75 / total)
    assert abs(hits / total - 0.25) < 3 * sigma


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**64), st.integers(0, 3 * BLOCK_SIZE))
def test_iteration_stream_matches_block_row(seed, i):
    m = 7
    block, row = divmod(i, BLOCK_SIZE)
    expected = block_stream(seed, block).random((BLOCK_SIZE, m))[row]
    np.testing.assert_array_equal(iteration_stream(seed, i).random(m), expected)


def test_different_seeds_give_different_streams():
    a = block_stream(1, 0).random(8)
    b = block_stream(2, 0).random(8)
    c = block_stream(1, 1).random(8)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_contingency_probability_forms():
    p = np.array([0.1, 0.2, 0.3])
    assert contingency_probability(p, (0, 2)) == pytest.approx(0.1 * 0.3 * 0.8)
    assert contingency_probability(p, (0, 2), "product_only") == pytest.approx(0.03)
    assert contingency_probability(p, ()) == pytest.approx(0.9 * 0.8 * 0.7)
    with pytest.raises(ValueError):
        contingency_probability(p, (0,), "other")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_count_distribution_matches_enumeration(ps):
    p = np.array(ps)
    dist = outage_count_distribution(p)
    brute = np.zeros(len(p) + 1)
    for state in itertools.product([0, 1], repeat=len(p)):
        s = np.array(state, dtype=bool)
        brute[s.sum()] += np.prod(np.where(s, p, 1 - p))
    np.testing.assert_allclose(dist, brute, atol=1e-12)


def test_choose_max_k_is_smallest_sufficient():
    p = np.array(TOY6_P)
    k = choose_max_k(OutageModel(p))
    dist = outage_count_distribution(p)
    any_out = 1 - dist[0]
    assert dist[k + 1 :].sum() < 1e-4 * any_out
    assert dist[k:].sum() >= 1e-4 * any_out


def double_outage_case():
    """Only losing both parallel branches sheds anything: 100 MW."""
    return make_case(
        [1, 2],
        [(1, 2, 0.1, 150.0, 150.0, 876.0), (1, 2, 0.1, 150.0, 150.0, 876.0)],
        [(1, 300.0, 10.0)],
        [(2, 100.0)],
    )


def test_closed_form_two_branch_oracle():
    case = double_outage_case()
    sol = solve_scdcopf(case)
    model = build_outage_model(case)
    exact = exhaustive_risk(case, sol, model, 2)
    assert exact.expected_blackout_mw == pytest.approx(0.01 * 100.0, rel=1e-12)
    assert exact.unenumerated_mass == 0.0
    # a full blackout lands in the top bin
    assert exact.bin_event_counts.tolist() == [0, 0, 0, 1]


def test_mc_matches_closed_form():
    case = double_outage_case()
    sol = solve_scdcopf(case)
    est = run_monte_carlo(case, sol, build_outage_model(case), 1_000_000, 123)
    assert abs(est.expected_blackout_mw - 1.0) < 3 * est.standard_error_mw
    # every nonzero event is the same 100 MW double outage
    assert est.bin_event_counts[3] == pytest.approx(est.expected_blackout_mw * est.n_iterations / 100.0)
    assert est.simulated == 1


def _direct_enumeration(case, sol, p, edges, min_order=2):
    """Independent oracle: walk all 2^m outage states."""
    served = sol.served_total
    out = np.zeros(len(edges) - 1)
    for state in itertools.product([False, True], repeat=len(p)):
        s = np.array(state)
        if s.sum() < min_order:
            continue
        prob = float(np.prod(np.where(s, p, 1 - p)))
        size = simulate_cascade(case, sol, np.flatnonzero(s)).blackout_mw
        if size > 0:
            frac = size / served
            k = min(int(np.searchsorted(edges, frac, side="right")) - 1, len(edges) - 2)
            out[k] += prob * size
    return out


def test_exhaustive_matches_direct_enumeration():
    case = toy6()
    sol = solve_scdcopf(case)
    model = build_outage_model(case)
    edges = np.array(RTS_BINS)
    direct = _direct_enumeration(case, sol, model.p_fail, edges)
    full = exhaustive_risk(case, sol, model, case.n_branch)
    np.testing.assert_allclose(full.bin_risk_mw, direct, rtol=1e-12, atol=1e-15)
    assert full.unenumerated_mass == 0.0
    truncated = exhaustive_risk(case, sol, model, choose_max_k(model))
    # the omitted orders can add at most their mass times the served load
    gap = full.expected_blackout_mw - truncated.expected_blackout_mw
    assert 0 <= gap <= truncated.unenumerated_mass * sol.served_total


def test_exhaustive_order_one_secured_case_is_zero():
    case = with_rates(triangle(), [876.0] * 3)
    sol = solve_scdcopf(case)
    est = exhaustive_risk(case, sol, build_outage_model(case), 1, simulate_single_outages=True)
    assert est.expected_blackout_mw == 0.0


def test_enumeration_guard(monkeypatch):
    case = with_rates(toy6(), [1.0] * 10)
    sol = solve_scdcopf(case)
    monkeypatch.setattr("cascade_risk.risk_mc.ENUMERATION_LIMIT", 50)
    with pytest.raises(OverflowError):
        exhaustive_risk(case, sol, build_outage_model(case), 3)


def test_zero_probability_gives_zero_risk():
    case = with_rates(toy6(), [0.0] * 10)
    sol = solve_scdcopf(case)
    est = run_monte_carlo(case, sol, build_outage_model(case), 1000, 0)
    assert est.expected_blackout_mw == 0.0
    assert est.bin_risk_mw.tolist() == [0.0] * 4
    assert est.simulated == 0
    assert est.n_iterations == 1000


def test_single_outages_skip_the_simulator_unless_asked():
    # only the feeder branch can fail, so every outage set is a single
    case = make_case(
        [1, 2, 3],
        [(1, 2, 0.1, 300.0, 360.0, 0.0), (2, 3, 0.1, 300.0, 360.0, 4380.0)],
        [(1, 300.0, 10.0)],
        [(3, 50.0)],
    )
    sol = solve_dcopf(case)
    skip = run_monte_carlo(case, sol, build_outage_model(case), 2000, 1)
    assert skip.expected_blackout_mw == 0.0 and skip.simulated == 0
    sim = run_monte_carlo(case, sol, build_outage_model(case), 2000, 1, simulate_single_outages=True)
    assert sim.simulated == 1
    assert sim.expected_blackout_mw == pytest.approx(50.0 * sim.bin_event_counts.sum() / 2000)


def test_mc_matches_toy_oracle_quick():
    case = toy6()
    sol = solve_scdcopf(case)
    model = build_outage_model(case)
    exact = exhaustive_risk(case, sol, model, choose_max_k(model))
    est = run_monte_carlo(case, sol, model, 100_000, 2024)
    assert abs(est.expected_blackout_mw - exact.expected_blackout_mw) < 3 * est.standard_error_mw
    for k in range(4):
        se = est.bin_standard_error_mw[k]
        assert abs(est.bin_risk_mw[k] - exact.bin_risk_mw[k]) <= 3 * se + 1e-12


def test_standard_error_matches_rerun_spread():
    case = toy6()
    sol = solve_scdcopf(case)
    model = build_outage_model(case)
    a = run_monte_carlo(case, sol, model, 100_000, 1)
    b = run_monte_carlo(case, sol, model, 100_000, 2)
    # 99% intervals overlap
    z = 2.576
    assert abs(a.expected_blackout_mw - b.expected_blackout_mw) <= z * (a.standard_error_mw + b.standard_error_mw)
    # and the reported error is close to the direct per-draw variance estimate
    assert a.standard_error_mw == pytest.approx(b.standard_error_mw, rel=0.1)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 3 * BLOCK_SIZE + 7), st.integers(0, 1000))
def test_bin_additivity_and_counts(n, seed):
    case = toy6()
    sol = solve_scdcopf(case)
    est = run_monte_carlo(case, sol, build_outage_model(case), n, seed)
    assert est.expected_blackout_mw == float(est.bin_risk_mw.sum())
    assert np.all(est.bin_risk_mw >= 0)
    assert est.n_iterations == n


def test_workers_do_not_change_bytes():
    case = toy6()
    sol = solve_scdcopf(case)
    model = build_outage_model(case)
    one = run_monte_carlo(case, sol, model, 3 * BLOCK_SIZE + 100, 9, workers=1)
    many = run_monte_carlo(case, sol, model, 3 * BLOCK_SIZE + 100, 9, workers=3)
    assert risk_csv({100: one}) == risk_csv({100: many})
    np.testing.assert_array_equal(one.bin_risk_mw, many.bin_risk_mw)
    assert one.standard_error_mw == many.standard_error_mw


def test_nontermination_carries_contingency():
    case = with_rates(ring4(), [8760.0, 0.0, 0.0, 0.0, 8760.0])
    sol = solve_dcopf(case)
    with pytest.raises(CascadeNonTermination) as info:
        run_monte_carlo(case, sol, build_outage_model(case), 10, 0, config=CascadeConfig(max_tiers=1))
    assert info.value.contingency == (0, 4)


def test_bin_edges_are_half_open():
    edges = RTS_BINS
    served = 1000.0
    idx = _bin_index([10.0, 50.0, 249.9, 250.0, 1000.0], served, edges)
    assert idx.tolist() == [0, 1, 1, 2, 3]


def test_rolling_average_examples():
    assert rolling_average([0.0, 3.0, 6.0]).tolist() == [1.5, 3.0, 4.5]
    assert rolling_average({50: 2.0, 51: 2.0, 52: 2.0}) == {50: 2.0, 51: 2.0, 52: 2.0}
    series = {89: 1.0, 90: 2.0, 91: 6.0, 92: 0.0}
    assert rolling_average(series)[90] == pytest.approx(3.0)
    assert rolling_average(series)[92] == pytest.approx(3.0)
    with pytest.raises(ValueError):
        rolling_average([1.0], window=2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.floats(-1e3, 1e3))
def test_rolling_average_preserves_constants(values, c):
    out = rolling_average([c] * len(values))
    np.testing.assert_allclose(out, c, rtol=1e-12, atol=1e-9)


def test_csv_schema():
    case = toy6()
    sol = solve_scdcopf(case)
    est = run_monte_carlo(case, sol, build_outage_model(case), 5000, 4)
    rows = list(csv.reader(io.StringIO(risk_csv({70: est, 50: est}))))
    assert rows[0] == CSV_HEADER == ["level", "bin_low", "bin_high", "risk_mw", "events", "stderr_mw", "n_iterations", "seed"]
    assert len(rows) == 1 + 2 * 4
    assert [r[0] for r in rows[1:]] == ["50"] * 4 + ["70"] * 4
    assert sum(float(r[3]) for r in rows[1:5]) == pytest.approx(est.expected_blackout_mw)
    assert {r[7] for r in rows[1:]} == {"4"}
