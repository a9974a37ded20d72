"""Linearized (DC) network analysis.

Angles are in radians, flows and injections in MW. Internally the network
equations are solved in per-unit on the case MVA base.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

BRIDGE_TOL = 1e-6


class TopologyError(RuntimeError):
    """Raised when a solve is attempted on a disconnected network."""


@dataclass(frozen=True, eq=False)
class DcSystem:
    """Susceptance matrices of one network topology.

    ``incidence`` is branch x bus with +1 at the from-bus and -1 at the
    to-bus; out-of-service branches have an all-zero row and zero susceptance.
    """

    n_bus: int
    branch_from: np.ndarray
    branch_to: np.ndarray
    branch_susceptances: np.ndarray
    in_service: np.ndarray
    reference_bus: int
    incidence: sp.csr_matrix
    mva_base: float
    bus_ids: np.ndarray
    n_components: int
    _cache: dict = field(default_factory=dict, repr=False)

    @cached_property
    def B(self) -> sp.csc_matrix:
        """Full bus susceptance matrix (per-unit)."""
        A = self.incidence
        return (A.T @ sp.diags(self.branch_susceptances) @ A).tocsc()

    @cached_property
    def nonref(self) -> np.ndarray:
        return np.delete(np.arange(self.n_bus), self.reference_bus)

    @cached_property
    def B_rr(self) -> sp.csc_matrix:
        keep = self.nonref
        return self.B[keep][:, keep].tocsc()

    @cached_property
    def Bf(self) -> sp.csr_matrix:
        """Branch-flow matrix: per-unit flows = Bf @ angles."""
        return (sp.diags(self.branch_susceptances) @ self.incidence).tocsr()

    @property
    def reference_bus_id(self) -> int:
        return int(self.bus_ids[self.reference_bus])

    @property
    def connected(self) -> bool:
        return self.n_components == 1

    def _factor(self):
        if not self.connected:
            raise TopologyError(
                f"network has {self.n_components} islands; split it with find_islands "
                "and solve each island separately"
            )
        lu = self._cache.get("lu")
        if lu is None:
            if self.n_bus == 1:
                lu = _EmptyFactor()
            else:
                lu = splu(self.B_rr, permc_spec="MMD_AT_PLUS_A")
            self._cache["lu"] = lu
        return lu

    def solve_angles(self, p_pu: np.ndarray) -> np.ndarray:
        """Angles for per-unit injections ``p_pu`` (bus x k or bus,)."""
        lu = self._factor()
        p_pu = np.asarray(p_pu, dtype=float)
        theta = np.zeros_like(p_pu)
        if self.n_bus > 1:
            theta[self.nonref] = lu.solve(np.ascontiguousarray(p_pu[self.nonref]))
        return theta


class _EmptyFactor:
    def solve(self, rhs):
        return rhs


@dataclass(frozen=True)
class FlowState:
    angles: np.ndarray
    flows: np.ndarray


@dataclass(frozen=True)
class LodfMatrix:
    """Outage distribution factors.

    ``h[i, j]`` is the fraction of branch j's pre-outage flow that moves onto
    branch i when j is removed. Columns of bridges and out-of-service
    branches hold NaN.
    """

    h: np.ndarray
    islanding_flags: np.ndarray

    def post_contingency(self, flows: np.ndarray, j: int) -> np.ndarray:
        if self.islanding_flags[j]:
            raise TopologyError(f"outage of branch {j} islands the network")
        return flows + self.h[:, j] * flows[j]


def _components(n_bus, f, t, mask):
    graph = sp.coo_matrix(
        (np.ones(int(mask.sum())), (f[mask], t[mask])), shape=(n_bus, n_bus)
    )
    return connected_components(graph, directed=False)


def build_dc_system(case) -> DcSystem:
    """Assemble the DC matrices for the in-service network of ``case``.

    The reference bus is the lowest-id bus hosting a generator inside the
    largest connected component (lowest-id bus of that component if it has
    no generator).
    """
    n = case.n_bus
    f, t = case.branch_from, case.branch_to
    mask = case.in_service
    b = np.where(mask, 1.0 / case.reactance, 0.0)
    m = len(f)
    rows = np.concatenate([np.arange(m), np.arange(m)])
    cols = np.concatenate([f, t])
    vals = np.concatenate([np.where(mask, 1.0, 0.0), np.where(mask, -1.0, 0.0)])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    A.eliminate_zeros()

    n_comp, labels = _components(n, f, t, mask)
    bus_ids = np.array([bus.id for bus in case.buses])
    largest = np.bincount(labels).argmax()
    in_largest = labels == largest
    gen_buses = np.zeros(n, dtype=bool)
    gen_buses[case.gen_bus] = True
    candidates = np.flatnonzero(in_largest & gen_buses)
    if len(candidates) == 0:
        candidates = np.flatnonzero(in_largest)
    ref = int(candidates[np.argmin(bus_ids[candidates])])

    return DcSystem(
        n_bus=n,
        branch_from=f,
        branch_to=t,
        branch_susceptances=b,
        in_service=mask.copy(),
        reference_bus=ref,
        incidence=A,
        mva_base=case.mva_base,
        bus_ids=bus_ids,
        n_components=int(n_comp),
    )


def solve_dc_flow(system: DcSystem, injections: np.ndarray, tol: float = 1e-6) -> FlowState:
    """DC power flow for net MW injections per bus (must sum to zero)."""
    injections = np.asarray(injections, dtype=float)
    if injections.shape != (system.n_bus,):
        raise ValueError(f"expected {system.n_bus} injections, got shape {injections.shape}")
    if abs(injections.sum()) > tol * max(1.0, np.abs(injections).max()):
        raise ValueError(f"injections do not balance: net {injections.sum():.6g} MW")
    theta = system.solve_angles(injections / system.mva_base)
    flows = (system.Bf @ theta) * system.mva_base
    return FlowState(angles=theta, flows=flows)


def find_islands(case) -> list[list[int]]:
    """Connected components of the in-service network as lists of bus ids.

    Components are ordered by their smallest bus id; ids within a
    component are sorted.
    """
    n_comp, labels = _components(case.n_bus, case.branch_from, case.branch_to, case.in_service)
    ids = np.array([b.id for b in case.buses])
    groups = [sorted(ids[labels == c].tolist()) for c in range(n_comp)]
    return sorted(groups, key=lambda g: g[0])


def compute_ptdf(system: DcSystem) -> np.ndarray:
    """Branch x bus sensitivities to injection at a bus, withdrawn at the reference."""
    lu = system._factor()
    m, n = len(system.branch_from), system.n_bus
    ptdf = np.zeros((m, n))
    if n == 1:
        return ptdf
    # B_rr is symmetric, so B_rr^-1 Bf_r^T gives the transposed block
    bf_r = system.Bf[:, system.nonref].toarray()
    ptdf[:, system.nonref] = lu.solve(np.ascontiguousarray(bf_r.T)).T
    return ptdf


def transfer_factors(system: DcSystem, cols) -> np.ndarray:
    """Flow on every branch per 1 p.u. moved from each ``cols`` branch's
    from-bus to its to-bus (m x len(cols))."""
    cols = np.asarray(cols, dtype=np.int64)
    rhs = np.zeros((system.n_bus, len(cols)))
    rhs[system.branch_from[cols], np.arange(len(cols))] += 1.0
    rhs[system.branch_to[cols], np.arange(len(cols))] -= 1.0
    theta = system.solve_angles(rhs)
    return np.asarray(system.Bf @ theta)


def lodf_columns(system: DcSystem, cols) -> tuple[np.ndarray, np.ndarray]:
    """LODF columns for the in-service branches ``cols``.

    Returns ``(h, bridge)`` where bridge columns of ``h`` are NaN.
    """
    cols = np.asarray(cols, dtype=np.int64)
    phi = transfer_factors(system, cols)
    k = np.arange(len(cols))
    denom = 1.0 - phi[cols, k]
    bridge = np.abs(denom) <= BRIDGE_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        h = phi / np.where(bridge, np.nan, denom)[None, :]
    h[cols, k] = -1.0
    h[:, bridge] = np.nan
    return h, bridge


def compute_lodf(system: DcSystem, check_bridges: bool = True) -> LodfMatrix:
    """Dense LODF matrix; bridge columns are flagged and set to NaN.

    With ``check_bridges`` the numeric bridge test is compared against a
    graph bridge search and any disagreement raises.
    """
    system._factor()
    m = len(system.branch_from)
    h = np.full((m, m), np.nan)
    flags = np.zeros(m, dtype=bool)
    active = np.flatnonzero(system.in_service)
    if len(active):
        cols, bridge = lodf_columns(system, active)
        h[:, active] = cols
        flags[active] = bridge
        h[~system.in_service, :] = 0.0
        h[:, active[bridge]] = np.nan
    if check_bridges:
        structural = np.zeros(m, dtype=bool)
        structural[find_bridges(system.n_bus, system.branch_from, system.branch_to, system.in_service)] = True
        if not np.array_equal(structural, flags):
            diff = np.flatnonzero(structural != flags).tolist()
            raise TopologyError(f"numeric and graph bridge detection disagree on branches {diff}")
    return LodfMatrix(h=h, islanding_flags=flags)


def find_bridges(n_bus: int, branch_from, branch_to, in_service=None) -> list[int]:
    """Indices of in-service branches whose removal disconnects their island.

    Iterative Tarjan low-link search over branch indices, so parallel
    branches are never bridges.
    """
    f = np.asarray(branch_from)
    t = np.asarray(branch_to)
    if in_service is None:
        in_service = np.ones(len(f), dtype=bool)
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n_bus)]
    for k in np.flatnonzero(in_service):
        adj[f[k]].append((t[k], k))
        adj[t[k]].append((f[k], k))
    disc = [-1] * n_bus
    low = [0] * n_bus
    bridges = []
    counter = 0
    for root in range(n_bus):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = counter
        counter += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            node, via, it = stack[-1]
            advanced = False
            for nxt, edge in it:
                if edge == via:
                    continue
                if disc[nxt] == -1:
                    disc[nxt] = low[nxt] = counter
                    counter += 1
                    stack.append((nxt, edge, iter(adj[nxt])))
                    advanced = True
                    break
                low[node] = min(low[node], disc[nxt])
            if not advanced:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[node])
                    if low[node] > disc[parent]:
                        bridges.append(int(via))
    return sorted(bridges)


def solve_islanded_flow(
    n_bus: int,
    branch_from: np.ndarray,
    branch_to: np.ndarray,
    susceptance_pu: np.ndarray,
    in_service: np.ndarray,
    injections_mw: np.ndarray,
    mva_base: float,
    labels: np.ndarray | None = None,
) -> np.ndarray:
    """Branch flows (MW) for a possibly split network.

    One reference bus per island (its lowest index) is pinned at zero angle
    so all islands are solved in a single factorization. Each island's
    injections must already balance; out-of-service branches carry zero.
    """
    mask = np.asarray(in_service, dtype=bool)
    if labels is None:
        _, labels = _components(n_bus, branch_from, branch_to, mask)
    refs = np.unique(labels, return_index=True)[1]
    keep = np.ones(n_bus, dtype=bool)
    keep[refs] = False
    f, t = branch_from[mask], branch_to[mask]
    b = susceptance_pu[mask]
    flows = np.zeros(len(branch_from))
    if not keep.any() or not len(f):
        return flows
    B = sp.coo_matrix(
        (np.concatenate([b, b, -b, -b]), (np.concatenate([f, t, f, t]), np.concatenate([f, t, t, f]))),
        shape=(n_bus, n_bus),
    ).tocsc()
    idx = np.flatnonzero(keep)
    Brr = B[idx][:, idx]
    rhs = np.asarray(injections_mw, dtype=float)[idx] / mva_base
    theta = np.zeros(n_bus)
    if len(idx) <= 300:
        theta[idx] = np.linalg.solve(Brr.toarray(), rhs)
    else:
        theta[idx] = splu(Brr.tocsc()).solve(rhs)
    flows[mask] = b * (theta[f] - theta[t]) * mva_base
    return flows
