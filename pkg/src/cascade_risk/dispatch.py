"""Pre-contingency operating points.

``solve_dcopf`` is the load-shedding DC OPF linear program, ``solve_scdcopf``
wraps it in the decomposed n-1 security loop, and ``proportional_dispatch``
scales an anchor solution down to a lower load level.
"""
from __future__ import annotations

import dataclasses
import io
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .dc_powerflow import DcSystem, build_dc_system, find_bridges, lodf_columns, TopologyError
from .grid_model import GridCase

log = logging.getLogger(__name__)

SECURITY_TOL_PU = 1e-4


class DispatchError(RuntimeError):
    pass


class SolverError(DispatchError):
    """The LP backend failed numerically."""


class NonConvergenceError(DispatchError):
    def __init__(self, message, violations):
        super().__init__(message)
        self.violations = violations


@dataclass(frozen=True)
class SecurityViolation:
    outaged_branch: int
    monitored_branch: int
    predicted_flow: float
    limit: float

    @property
    def margin(self) -> float:
        return abs(self.predicted_flow) - self.limit


@dataclass(frozen=True)
class DispatchSolution:
    p_gen: np.ndarray
    p_served: np.ndarray
    angles: np.ndarray
    flows: np.ndarray
    objective: float
    load_factor: float
    demand: np.ndarray
    security_constraints_active: tuple[tuple[int, int], ...] = ()
    cycles: int = 1

    @property
    def shed_total(self) -> float:
        return float(np.sum(self.demand - self.p_served))

    @property
    def served_total(self) -> float:
        return float(np.sum(self.p_served))

    def injections(self, case: GridCase) -> np.ndarray:
        """Net MW injection at every bus."""
        inj = np.zeros(case.n_bus)
        np.add.at(inj, case.gen_bus, self.p_gen)
        np.add.at(inj, case.load_bus, -self.p_served)
        return inj


# ---------------------------------------------------------------------------
# LP
# ---------------------------------------------------------------------------


def _flow_rows(system: DcSystem, security_rows) -> tuple[sp.csr_matrix, np.ndarray]:
    """Rows of (MW flow per radian) for plain limits and security pairs."""
    base = system.mva_base
    Bf = system.Bf * base
    active = np.flatnonzero(system.in_service)
    blocks = [Bf[active]]
    if security_rows:
        i = np.array([r[0] for r in security_rows])
        j = np.array([r[1] for r in security_rows])
        h = np.array([r[2] for r in security_rows])
        blocks.append(Bf[i] + sp.diags(h) @ Bf[j])
    return sp.vstack(blocks).tocsr(), active


def solve_dcopf(
    case: GridCase,
    extra_constraints=(),
    *,
    enforce_limits: bool = True,
) -> DispatchSolution:
    """Minimum-cost dispatch with load-shedding slack.

    ``extra_constraints`` holds ``(i, j, h_ij)`` rows bounding the predicted
    flow on branch i after the outage of branch j by branch i's short-term
    rating.
    """
    system = build_dc_system(case)
    extra_constraints = list(extra_constraints)
    lp = _build_lp(case, system, extra_constraints, enforce_limits)
    ng, nd = len(case.generators), len(case.loads)
    demand = case.demand
    res = _solve_lp(lp.cost, lp)
    x = res.x
    p_gen = np.clip(x[:ng], 0.0, case.gen_pmax)
    p_served = np.clip(x[ng : ng + nd], 0.0, demand)
    theta = x[ng + nd :]
    flows = (system.Bf @ theta) * case.mva_base
    return DispatchSolution(
        p_gen=p_gen,
        p_served=p_served,
        angles=theta,
        flows=flows,
        objective=float(res.fun),
        load_factor=case.load_factor,
        demand=demand.copy(),
        security_constraints_active=tuple((int(i), int(j)) for i, j, _ in extra_constraints),
    )


@dataclass(frozen=True)
class _Lp:
    cost: np.ndarray
    A_ub: sp.csr_matrix | None
    b_ub: np.ndarray | None
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    bounds: np.ndarray


def _build_lp(case: GridCase, system: DcSystem, extra_constraints, enforce_limits: bool) -> _Lp:
    if not system.connected:
        raise TopologyError("solve_dcopf needs a connected network; solve each island separately")
    ng, nd, nb = len(case.generators), len(case.loads), case.n_bus

    # variables: [p_gen (ng), p_served (nd), theta (nb)]
    cost = np.concatenate([case.gen_cost, -case.shed_cost, np.zeros(nb)])
    gen_map = sp.csr_matrix((np.ones(ng), (case.gen_bus, np.arange(ng))), shape=(nb, ng))
    load_map = sp.csr_matrix((np.ones(nd), (case.load_bus, np.arange(nd))), shape=(nb, nd))
    A_eq = sp.hstack([gen_map, -load_map, -system.B * case.mva_base]).tocsr()
    b_eq = np.zeros(nb)

    A_ub = b_ub = None
    if enforce_limits or extra_constraints:
        rows, active = _flow_rows(system, extra_constraints)
        if not enforce_limits:
            rows = rows[len(active):]
            active = active[:0]
        limits = np.concatenate(
            [case.rating_long[active], case.rating_short[[r[0] for r in extra_constraints]]]
        )
        pad = sp.csr_matrix((rows.shape[0], ng + nd))
        G = sp.hstack([pad, rows]).tocsr()
        A_ub = sp.vstack([G, -G]).tocsr()
        b_ub = np.concatenate([limits, limits])

    bounds = np.zeros((ng + nd + nb, 2))
    bounds[:ng, 1] = case.gen_pmax
    bounds[ng : ng + nd, 1] = case.demand
    bounds[ng + nd :, 0] = -np.inf
    bounds[ng + nd :, 1] = np.inf
    bounds[ng + nd + system.reference_bus] = 0.0
    return _Lp(cost, A_ub, b_ub, A_eq, b_eq, bounds)


def _solve_lp(objective: np.ndarray, lp: _Lp, A_ub=None, b_ub=None):
    res = linprog(
        objective,
        A_ub=lp.A_ub if A_ub is None else A_ub,
        b_ub=lp.b_ub if b_ub is None else b_ub,
        A_eq=lp.A_eq,
        b_eq=lp.b_eq,
        bounds=lp.bounds,
        method="highs",
        options={"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9},
    )
    if res.status != 0:
        raise SolverError(
            f"LP solver failed (status {res.status}, {res.nit} iterations): {res.message}"
        )
    return res


def flow_range_on_optimal_face(
    case: GridCase,
    branches,
    *,
    rel_tol: float = 1e-8,
) -> np.ndarray:
    """Lowest and highest MW flow each branch can carry among n-1-secure
    dispatches whose cost matches the optimum.

    The security-constrained LP is usually degenerate: many dispatches reach
    the same cost but route power differently. The optimum is fixed first
    with every non-islanding single-outage row present, then each requested
    branch flow is minimised and maximised with the cost held within
    ``rel_tol`` of it. Returns an array of shape ``(len(branches), 2)``.
    """
    system = build_dc_system(case)
    islanding = set(islanding_contingencies(case))
    outages = [j for j in np.flatnonzero(case.in_service) if j not in islanding]
    h, _ = lodf_columns(system, outages)
    monitored = np.flatnonzero(case.in_service)
    rows = [
        (int(i), int(j), float(h[i, col]))
        for col, j in enumerate(outages)
        for i in monitored
        if i != j and abs(h[i, col]) > 1e-12
    ]
    lp = _build_lp(case, system, rows, True)
    best = _solve_lp(lp.cost, lp).fun
    cap = best + rel_tol * max(1.0, abs(best))
    A_ub = sp.vstack([lp.A_ub, sp.csr_matrix(lp.cost)]).tocsr()
    b_ub = np.append(lp.b_ub, cap)

    ng, nd = len(case.generators), len(case.loads)
    out = np.empty((len(branches), 2))
    for n, k in enumerate(branches):
        row = np.zeros(lp.cost.size)
        row[ng + nd :] = (system.Bf[k] * case.mva_base).toarray().ravel()
        out[n, 0] = _solve_lp(row, lp, A_ub, b_ub).fun
        out[n, 1] = -_solve_lp(-row, lp, A_ub, b_ub).fun
    return out


def economic_dispatch(case: GridCase) -> np.ndarray:
    """Bus injections of the cheapest dispatch serving all demand, branch
    limits ignored. Raises :class:`DispatchError` if demand exceeds capacity."""
    sol = solve_dcopf(case, enforce_limits=False)
    if sol.shed_total > 1e-6:
        raise DispatchError(
            f"demand {case.total_demand:.1f} MW exceeds generation capacity "
            f"{case.gen_pmax.sum():.1f} MW"
        )
    return sol.injections(case)


# ---------------------------------------------------------------------------
# Security
# ---------------------------------------------------------------------------


def islanding_contingencies(case: GridCase) -> list[int]:
    """In-service branches whose single outage splits the network."""
    return find_bridges(case.n_bus, case.branch_from, case.branch_to, case.in_service)


def check_security(
    case: GridCase,
    solution: DispatchSolution,
    tol_pu: float = SECURITY_TOL_PU,
    block: int = 512,
) -> list[SecurityViolation]:
    """Single-outage overloads predicted with LODFs.

    Every non-bridge in-service branch is outaged in turn; bridges are left
    out (see :func:`islanding_contingencies`). Results are sorted by
    outaged branch, then monitored branch.
    """
    system = build_dc_system(case)
    flows = solution.flows
    limit = case.rating_short
    tol = tol_pu * case.mva_base
    active = np.flatnonzero(system.in_service)
    out: list[SecurityViolation] = []
    for start in range(0, len(active), block):
        cols = active[start : start + block]
        h, bridge = lodf_columns(system, cols)
        post = flows[:, None] + h * flows[cols][None, :]
        over = np.abs(post) > limit[:, None] + tol
        over[:, bridge] = False
        over[cols, np.arange(len(cols))] = False
        over[~system.in_service, :] = False
        ks, ii = np.nonzero(over.T)
        for k, i in zip(ks, ii):
            out.append(
                SecurityViolation(
                    outaged_branch=int(cols[k]),
                    monitored_branch=int(i),
                    predicted_flow=float(post[i, k]),
                    limit=float(limit[i]),
                )
            )
    return out


def solve_scdcopf(case: GridCase, max_cycles: int = 10) -> DispatchSolution:
    """n-1 secure dispatch by iteratively adding violated contingency rows.

    Each cycle solves the DC OPF, screens all non-bridge single outages, and
    adds every violated (monitored, outaged) pair at once.
    """
    system = build_dc_system(case)
    rows: list[tuple[int, int, float]] = []
    active: set[tuple[int, int]] = set()
    violations: list[SecurityViolation] = []
    for cycle in range(1, max_cycles + 1):
        sol = solve_dcopf(case, rows)
        violations = check_security(case, sol)
        log.debug("cycle %d: %d rows, %d violations", cycle, len(rows), len(violations))
        if not violations:
            return dataclasses.replace(sol, cycles=cycle)
        new_pairs = [(v.monitored_branch, v.outaged_branch) for v in violations]
        repeated = [p for p in new_pairs if p in active]
        if repeated:
            raise SolverError(
                f"active security rows violated again (solver tolerance?): {repeated[:5]}"
            )
        by_outage: dict[int, list[int]] = {}
        for i, j in new_pairs:
            by_outage.setdefault(j, []).append(i)
        outs = sorted(by_outage)
        h, _ = lodf_columns(system, outs)
        for col, j in enumerate(outs):
            for i in by_outage[j]:
                rows.append((i, j, float(h[i, col])))
                active.add((i, j))
    raise NonConvergenceError(
        f"no n-1 secure dispatch after {max_cycles} cycles "
        f"({len(violations)} violations remain)",
        violations,
    )


def proportional_dispatch(reference: DispatchSolution, target: float) -> DispatchSolution:
    """Scale an anchor dispatch uniformly down to load factor ``target``."""
    if not target > 0:
        raise ValueError(f"target load factor must be positive, got {target}")
    if target > reference.load_factor * (1 + 1e-12):
        raise ValueError(
            f"proportional dispatch only scales down: target {target} > anchor "
            f"{reference.load_factor}"
        )
    s = target / reference.load_factor
    return DispatchSolution(
        p_gen=reference.p_gen * s,
        p_served=reference.p_served * s,
        angles=reference.angles * s,
        flows=reference.flows * s,
        objective=reference.objective * s,
        load_factor=target,
        demand=reference.demand * s,
        security_constraints_active=reference.security_constraints_active,
        cycles=0,
    )


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------


def write_dispatch(solution: DispatchSolution, case: GridCase) -> str:
    """Tabular text snapshot of a dispatch (see docs/formats.md)."""
    buf = io.StringIO()
    w = buf.write
    w("[summary]\n")
    w(f"objective,{float(solution.objective)!r}\n")
    w(f"load_factor,{float(solution.load_factor)!r}\n")
    w(f"cycles,{solution.cycles}\n")
    w(f"shed_total_mw,{float(solution.shed_total)!r}\n")
    pairs = ";".join(f"{i}:{j}" for i, j in solution.security_constraints_active)
    w(f"security_rows,{pairs}\n")
    w("[generators]\nindex,bus,p_mw\n")
    for k, g in enumerate(case.generators):
        w(f"{k},{g.bus},{float(solution.p_gen[k])!r}\n")
    w("[loads]\nindex,bus,p_served_mw,demand_mw\n")
    for k, d in enumerate(case.loads):
        w(f"{k},{d.bus},{float(solution.p_served[k])!r},{float(solution.demand[k])!r}\n")
    w("[buses]\nindex,bus,angle_rad\n")
    for k, b in enumerate(case.buses):
        w(f"{k},{b.id},{float(solution.angles[k])!r}\n")
    w("[branches]\nindex,from_bus,to_bus,flow_mw\n")
    for k, br in enumerate(case.branches):
        w(f"{k},{br.from_bus},{br.to_bus},{float(solution.flows[k])!r}\n")
    return buf.getvalue()


def read_dispatch(text: str) -> DispatchSolution:
    sections: dict[str, list[list[str]]] = {}
    current = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
            continue
        if current is None:
            raise ValueError(f"data before first section: {line!r}")
        sections[current].append(line.split(","))
    summary = {row[0]: row[1] if len(row) > 1 else "" for row in sections["summary"]}

    def column(name, idx):
        return np.array([float(r[idx]) for r in sections[name][1:]])

    pairs = tuple(
        tuple(int(v) for v in p.split(":")) for p in summary.get("security_rows", "").split(";") if p
    )
    return DispatchSolution(
        p_gen=column("generators", 2),
        p_served=column("loads", 2),
        angles=column("buses", 2),
        flows=column("branches", 3),
        objective=float(summary["objective"]),
        load_factor=float(summary["load_factor"]),
        demand=column("loads", 3),
        security_constraints_active=pairs,
        cycles=int(summary.get("cycles", 1)),
    )
