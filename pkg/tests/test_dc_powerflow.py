from __future__ import annotations

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_risk.dc_powerflow import (
    TopologyError,
    build_dc_system,
    compute_lodf,
    compute_ptdf,
    find_bridges,
    find_islands,
    lodf_columns,
    solve_dc_flow,
    solve_islanded_flow,
)
from cascade_risk.dispatch import solve_dcopf

from conftest import make_case, radial_feeder, triangle, two_bus


def injections(case, gen_mw):
    p = np.zeros(case.n_bus)
    np.add.at(p, case.gen_bus, gen_mw)
    np.add.at(p, case.load_bus, -case.demand)
    return p


def full_resolve(case, p, outaged):
    """Flows after removing ``outaged`` by rebuilding the network from scratch."""
    return solve_dc_flow(build_dc_system(case.with_outages([outaged])), p).flows


def test_two_bus_matrices_and_flow():
    case = two_bus()
    system = build_dc_system(case)
    assert system.B_rr.toarray().tolist() == [[10.0]]
    assert system.reference_bus_id == 1
    state = solve_dc_flow(system, [100.0, -100.0])
    assert state.flows[0] == pytest.approx(100.0)
    assert state.angles[1] == pytest.approx(-0.1)


def test_triangle_flows_split_two_to_one():
    case = triangle()
    system = build_dc_system(case)
    assert np.diag(system.B.toarray()).tolist() == [20.0, 20.0, 20.0]
    flows = solve_dc_flow(system, injections(case, [90.0])).flows
    # 1-2, 2-3 form the long path; 1-3 is direct
    np.testing.assert_allclose(flows, [30.0, 30.0, 60.0], atol=1e-9)


def test_rts_reduced_matrix_shape(rts96):
    system = build_dc_system(rts96)
    assert system.B_rr.shape == (72, 72)
    assert system.n_components == 1


def test_unbalanced_injections_rejected():
    with pytest.raises(ValueError, match="balance"):
        solve_dc_flow(build_dc_system(two_bus()), [100.0, -90.0])


def test_disconnected_network_raises_topology_error():
    case = radial_feeder().with_outages([3])
    with pytest.raises(TopologyError):
        solve_dc_flow(build_dc_system(case), np.zeros(4))


def _balanced(n, values):
    v = np.asarray(values[:n], dtype=float)
    return v - v.mean()


_vec = st.lists(st.floats(-500, 500, allow_nan=False), min_size=73, max_size=73)


@settings(max_examples=30, deadline=None)
@given(_vec, _vec, st.floats(-3, 3))
def test_flows_are_linear_in_injections(rts96, a, b, alpha):
    system = build_dc_system(rts96)
    pa, pb = _balanced(73, a), _balanced(73, b)
    fa = solve_dc_flow(system, pa).flows
    fb = solve_dc_flow(system, pb).flows
    fab = solve_dc_flow(system, alpha * pa + pb).flows
    np.testing.assert_allclose(fab, alpha * fa + fb, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(_vec)
def test_flow_conservation_at_every_bus(rts96, a):
    system = build_dc_system(rts96)
    p = _balanced(73, a)
    flows = solve_dc_flow(system, p).flows
    net_out = system.incidence.T @ flows
    np.testing.assert_allclose(net_out, p, atol=1e-6)


def test_ptdf_triangle_and_reference_column():
    system = build_dc_system(triangle())
    ptdf = compute_ptdf(system)
    assert np.all(ptdf[:, system.reference_bus] == 0.0)
    # injection at bus 3 withdrawn at bus 1: 2/3 on the direct branch
    assert ptdf[2, 2] == pytest.approx(-2.0 / 3.0)
    assert ptdf[0, 2] == pytest.approx(-1.0 / 3.0)


def test_ptdf_matches_flow_solve(rts96):
    system = build_dc_system(rts96)
    ptdf = compute_ptdf(system)
    rng = np.random.default_rng(3)
    p = _balanced(73, rng.normal(0, 100, 73))
    np.testing.assert_allclose(ptdf @ p, solve_dc_flow(system, p).flows, atol=1e-8)


def test_lodf_triangle():
    lodf = compute_lodf(build_dc_system(triangle()))
    # losing either path moves all of its flow onto the other
    assert abs(lodf.h[0, 2]) == pytest.approx(1.0)
    assert abs(lodf.h[2, 0]) == pytest.approx(1.0)
    assert np.diag(lodf.h).tolist() == [-1.0, -1.0, -1.0]
    assert not lodf.islanding_flags.any()


def test_lodf_flags_radial_bridge():
    case = radial_feeder()
    lodf = compute_lodf(build_dc_system(case))
    assert lodf.islanding_flags.tolist() == [False, False, False, True]
    assert np.isnan(lodf.h[:, 3]).all()
    with pytest.raises(TopologyError):
        lodf.post_contingency(np.zeros(4), 3)


def test_lodf_matches_full_resolve(rts96):
    sol = solve_dcopf(rts96)
    p = sol.injections(rts96)
    system = build_dc_system(rts96)
    base = solve_dc_flow(system, p).flows
    lodf = compute_lodf(system)
    for j in range(rts96.n_branch):
        if lodf.islanding_flags[j]:
            continue
        expected = full_resolve(rts96, p, j)
        np.testing.assert_allclose(lodf.post_contingency(base, j), expected, atol=1e-4)


def test_lodf_columns_blockwise_agree_with_dense(rts96):
    system = build_dc_system(rts96)
    dense = compute_lodf(system).h
    h, bridge = lodf_columns(system, [5, 17, 99])
    np.testing.assert_allclose(h, dense[:, [5, 17, 99]])
    assert not bridge.any()


def test_islands_of_rts_areas(rts96):
    ties = [k for k, br in enumerate(rts96.branches) if br.from_bus // 100 != br.to_bus // 100]
    islands = find_islands(rts96.with_outages(ties))
    assert len(islands) == 3
    assert [len(g) for g in islands] == [24, 24, 25]
    assert all(len({b // 100 for b in g}) == 1 for g in islands)


def _random_graph(draw):
    n = draw(st.integers(2, 12))
    edges = draw(
        st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)).filter(lambda e: e[0] != e[1]), max_size=20)
    )
    return n, edges


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_bridges_agree_with_networkx(data):
    n, edges = _random_graph(data.draw)
    f = np.array([e[0] for e in edges], dtype=int)
    t = np.array([e[1] for e in edges], dtype=int)
    ours = find_bridges(n, f, t)
    g = nx.MultiGraph()
    g.add_nodes_from(range(n))
    for k, (a, b) in enumerate(edges):
        g.add_edge(a, b, key=k)
    expected = []
    for k, (a, b) in enumerate(edges):
        # an edge is a bridge when no other edge joins its endpoints' sides
        h = g.copy()
        h.remove_edge(a, b, key=k)
        if not nx.has_path(h, a, b):
            expected.append(k)
    assert ours == sorted(expected)


def test_rts_numeric_bridges_match_graph_search(rts96):
    system = build_dc_system(rts96)
    lodf = compute_lodf(system, check_bridges=True)
    assert np.flatnonzero(lodf.islanding_flags).tolist() == find_bridges(
        rts96.n_bus, rts96.branch_from, rts96.branch_to
    )


def test_islanded_flow_conserves_within_each_island(rts96):
    ties = [k for k, br in enumerate(rts96.branches) if br.from_bus // 100 != br.to_bus // 100]
    split = rts96.with_outages(ties)
    rng = np.random.default_rng(0)
    p = rng.normal(0, 50, rts96.n_bus)
    ids = np.array([b.id for b in rts96.buses])
    for area in (1, 2, 3):
        sel = ids // 100 == area
        p[sel] -= p[sel].mean()
    flows = solve_islanded_flow(
        rts96.n_bus, rts96.branch_from, rts96.branch_to, 1 / rts96.reactance,
        split.in_service, p, rts96.mva_base,
    )
    assert np.all(flows[ties] == 0.0)
    # conservation inside every island
    net = np.zeros(rts96.n_bus)
    np.add.at(net, rts96.branch_from, flows)
    np.add.at(net, rts96.branch_to, -flows)
    np.testing.assert_allclose(net, p, atol=1e-8)


def test_base_flow_statistics_near_reference(rts96):
    flows = np.abs(solve_dcopf(rts96).flows)
    # loose: generator costs and set points differ from the reference study
    assert flows.mean() == pytest.approx(113.8, rel=0.05)
    assert flows.max() == pytest.approx(396.1, rel=0.15)


def test_cached_factorization_reused(rts96):
    system = build_dc_system(rts96)
    first = system._factor()
    assert system._factor() is first


def test_zero_injection_gives_zero_flow():
    case = make_case([1, 2], [(1, 2, 0.1, 10.0)], [(1, 10.0, 1.0)], [(1, 5.0)])
    flows = solve_dc_flow(build_dc_system(case), [0.0, 0.0]).flows
    assert flows.tolist() == [0.0]
