"""Grid case data: element types, MATPOWER-style parsing and serialization,
load scaling and rating adjustment.

Branch, generator and load identifiers are 0-based positions in the
corresponding tuples of a :class:`GridCase`.
"""
from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

DEFAULT_SHORT_RATING_MULTIPLIER = 1.2
DEFAULT_OUTAGE_RATE = 1.0
DEFAULT_SHED_COST = 10_000.0


class CaseParseError(ValueError):
    """Malformed case-file syntax."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CaseValidationError(ValueError):
    """Case data violating an element invariant."""


class InfeasibleCaseError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    area: int = 1


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    reactance: float
    rating_long: float
    rating_short: float
    outage_rate: float = DEFAULT_OUTAGE_RATE
    in_service: bool = True

    @property
    def name(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class Generator:
    bus: int
    p_max: float
    marginal_cost: float
    # MW output in the case's own operating point (the Pg column)
    p_base: float = 0.0


@dataclass(frozen=True)
class LoadPoint:
    bus: int
    p_nominal: float
    shed_cost: float = DEFAULT_SHED_COST


@dataclass(frozen=True)
class GridCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[LoadPoint, ...]
    mva_base: float = 100.0
    load_factor: float = 1.0
    name: str = field(default="case", compare=False)

    def __post_init__(self):
        validate_case(self)

    # -- derived arrays (cached; the case is immutable) ------------------

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def branch_from(self) -> np.ndarray:
        idx = self.bus_index
        return np.array([idx[br.from_bus] for br in self.branches], dtype=np.int64)

    @cached_property
    def branch_to(self) -> np.ndarray:
        idx = self.bus_index
        return np.array([idx[br.to_bus] for br in self.branches], dtype=np.int64)

    @cached_property
    def reactance(self) -> np.ndarray:
        return np.array([br.reactance for br in self.branches], dtype=float)

    @cached_property
    def rating_long(self) -> np.ndarray:
        return np.array([br.rating_long for br in self.branches], dtype=float)

    @cached_property
    def rating_short(self) -> np.ndarray:
        return np.array([br.rating_short for br in self.branches], dtype=float)

    @cached_property
    def outage_rates(self) -> np.ndarray:
        return np.array([br.outage_rate for br in self.branches], dtype=float)

    @cached_property
    def in_service(self) -> np.ndarray:
        return np.array([br.in_service for br in self.branches], dtype=bool)

    @cached_property
    def gen_bus(self) -> np.ndarray:
        idx = self.bus_index
        return np.array([idx[g.bus] for g in self.generators], dtype=np.int64)

    @cached_property
    def gen_pmax(self) -> np.ndarray:
        return np.array([g.p_max for g in self.generators], dtype=float)

    @cached_property
    def gen_cost(self) -> np.ndarray:
        return np.array([g.marginal_cost for g in self.generators], dtype=float)

    @cached_property
    def load_bus(self) -> np.ndarray:
        idx = self.bus_index
        return np.array([idx[d.bus] for d in self.loads], dtype=np.int64)

    @cached_property
    def load_nominal(self) -> np.ndarray:
        return np.array([d.p_nominal for d in self.loads], dtype=float)

    @cached_property
    def shed_cost(self) -> np.ndarray:
        return np.array([d.shed_cost for d in self.loads], dtype=float)

    @property
    def demand(self) -> np.ndarray:
        """Effective MW demand per load at the current load factor."""
        return self.load_factor * self.load_nominal

    @property
    def total_demand(self) -> float:
        return float(self.demand.sum())

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    def find_branch(self, from_bus: int, to_bus: int) -> int:
        """Index of the first branch joining two buses, in either direction."""
        for k, br in enumerate(self.branches):
            if {br.from_bus, br.to_bus} == {from_bus, to_bus}:
                return k
        raise KeyError(f"no branch between {from_bus} and {to_bus}")

    def with_branches(self, branches) -> GridCase:
        return dataclasses.replace(self, branches=tuple(branches))

    def with_outages(self, outaged) -> GridCase:
        """Copy with the given branch indices taken out of service."""
        out = set(int(k) for k in outaged)
        return self.with_branches(
            dataclasses.replace(br, in_service=False) if k in out else br
            for k, br in enumerate(self.branches)
        )


def validate_case(case: GridCase) -> None:
    if not case.buses:
        raise CaseValidationError("case has no buses")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise CaseValidationError(f"duplicate bus ids: {dup}")
    known = set(ids)
    if not (case.mva_base > 0):
        raise CaseValidationError(f"mva_base must be positive, got {case.mva_base}")
    if not (case.load_factor > 0):
        raise CaseValidationError(f"load_factor must be positive, got {case.load_factor}")
    for k, br in enumerate(case.branches):
        tag = f"branch {k} ({br.name})"
        for bus in (br.from_bus, br.to_bus):
            if bus not in known:
                raise CaseValidationError(f"{tag}: references unknown bus {bus}")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"{tag}: from_bus equals to_bus")
        if not (br.reactance > 0):
            raise CaseValidationError(f"{tag}: reactance must be positive, got {br.reactance}")
        if not (br.rating_long > 0):
            raise CaseValidationError(f"{tag}: rating_long must be positive, got {br.rating_long}")
        if not (br.rating_short >= br.rating_long):
            raise CaseValidationError(
                f"{tag}: rating_short {br.rating_short} below rating_long {br.rating_long}"
            )
        if not (br.outage_rate >= 0):
            raise CaseValidationError(f"{tag}: outage_rate must be >= 0, got {br.outage_rate}")
    max_gen_cost = -math.inf
    for k, g in enumerate(case.generators):
        if g.bus not in known:
            raise CaseValidationError(f"generator {k}: references unknown bus {g.bus}")
        if not (g.p_max >= 0):
            raise CaseValidationError(f"generator {k}: p_max must be >= 0, got {g.p_max}")
        if not math.isfinite(g.marginal_cost):
            raise CaseValidationError(f"generator {k}: marginal_cost must be finite")
        max_gen_cost = max(max_gen_cost, g.marginal_cost)
    for k, d in enumerate(case.loads):
        if d.bus not in known:
            raise CaseValidationError(f"load {k}: references unknown bus {d.bus}")
        if not (d.p_nominal >= 0):
            raise CaseValidationError(f"load {k}: p_nominal must be >= 0, got {d.p_nominal}")
        if not (d.shed_cost > max_gen_cost):
            raise CaseValidationError(
                f"load {k}: shed_cost {d.shed_cost} must exceed every generator cost"
                f" (max {max_gen_cost})"
            )
    if not sum(g.p_max for g in case.generators) > 0:
        raise CaseValidationError("total generation capacity must be positive")
    if not sum(d.p_nominal for d in case.loads) > 0:
        raise CaseValidationError("total load must be positive")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    # '%' inside quoted strings does not occur in numeric sections
    return line.split("%", 1)[0]


def _read_sections(text: str) -> tuple[dict[str, tuple[list[list[float]], int]], dict[str, float]]:
    """Split case text into numeric matrices and scalars.

    Returns ``(matrices, scalars)`` where each matrix maps to its rows and
    the line number of its opening assignment.
    """
    matrices: dict[str, tuple[list[list[float]], int]] = {}
    scalars: dict[str, float] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        raw = _strip_comment(lines[i]).strip()
        i += 1
        if not raw or raw.startswith("function"):
            continue
        m = _ASSIGN.match(raw)
        if not m:
            raise CaseParseError(f"unexpected statement {raw!r}", lineno)
        name, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("{"):
            # cell arrays (bus names etc.) carry nothing we use
            while "}" not in rhs:
                if i >= len(lines):
                    raise CaseParseError(f"unterminated cell array mpc.{name}", lineno)
                rhs = _strip_comment(lines[i])
                i += 1
            continue
        if rhs.startswith("'") or rhs.startswith('"'):
            continue
        if rhs.startswith("["):
            body = [rhs[1:]]
            start = lineno
            while "]" not in body[-1]:
                if i >= len(lines):
                    raise CaseParseError(f"unterminated matrix mpc.{name}", start)
                body.append(_strip_comment(lines[i]))
                i += 1
            body[-1] = body[-1].split("]", 1)[0]
            rows: list[list[float]] = []
            width = None
            for offset, chunk in enumerate(body):
                for row_text in chunk.split(";"):
                    tokens = row_text.replace(",", " ").split()
                    if not tokens:
                        continue
                    try:
                        row = [float(t) for t in tokens]
                    except ValueError:
                        bad = next(t for t in tokens if not _is_float(t))
                        raise CaseParseError(
                            f"non-numeric value {bad!r} in mpc.{name}", start + offset
                        ) from None
                    if width is None:
                        width = len(row)
                    elif len(row) != width and name != "gencost":
                        raise CaseParseError(
                            f"row has {len(row)} columns, expected {width} in mpc.{name}",
                            start + offset,
                        )
                    rows.append(row)
            matrices[name] = (rows, start)
            continue
        value = rhs.rstrip(";").strip()
        try:
            scalars[name] = float(value)
        except ValueError:
            raise CaseParseError(f"cannot parse value {value!r} for mpc.{name}", lineno) from None
    return matrices, scalars


def _is_float(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _average_incremental_cost(row: list[float], p_max: float, lineno: int) -> float:
    model, n = int(row[0]), int(row[3])
    params = row[4:]
    if model == 2:
        coeffs = params[:n]  # highest order first
        if len(coeffs) < n:
            raise CaseParseError("gencost row shorter than its declared order", lineno)
        if n <= 2:
            # linear cost: the slope is exact, no need to evaluate
            return float(coeffs[0]) if n == 2 else 0.0
        if p_max <= 0:
            return coeffs[-2]
        value = np.polyval(coeffs, p_max) - np.polyval(coeffs, 0.0)
        return float(value / p_max)
    if model == 1:
        pts = params[: 2 * n]
        if len(pts) < 2 * n or n < 2:
            raise CaseParseError("piecewise-linear gencost needs at least two points", lineno)
        xs, ys = pts[0::2], pts[1::2]
        return float((ys[-1] - ys[0]) / (xs[-1] - xs[0]))
    raise CaseParseError(f"unknown gencost model {model}", lineno)


def parse_case(
    text: str,
    *,
    short_rating_multiplier: float = DEFAULT_SHORT_RATING_MULTIPLIER,
    default_outage_rate: float = DEFAULT_OUTAGE_RATE,
    reliability_column: int = 1,
    shed_cost: float = DEFAULT_SHED_COST,
    name: str = "case",
) -> GridCase:
    """Parse a MATPOWER-style case into a validated :class:`GridCase`.

    ``reliability_column`` picks which rate column of ``mpc.branch_reliability``
    (1 = first column after the branch index) supplies the outage rates.
    A branch ``rateC`` of 0, or a missing column, means no short-term rating
    and ``short_rating_multiplier * rateA`` is used instead.
    """
    matrices, scalars = _read_sections(text)
    for required in ("bus", "branch", "gen"):
        if required not in matrices:
            raise CaseParseError(f"missing mpc.{required} section")
    mva_base = scalars.get("baseMVA", 100.0)
    load_factor = scalars.get("load_factor", 1.0)

    bus_rows, bus_line = matrices["bus"]
    buses = []
    bus_demand = []
    for k, row in enumerate(bus_rows):
        if len(row) < 7:
            raise CaseParseError("bus rows need at least 7 columns", bus_line)
        buses.append(Bus(id=int(row[0]), area=int(row[6])))
        bus_demand.append((int(row[0]), row[2]))

    gen_rows, gen_line = matrices["gen"]
    cost_rows = matrices.get("gencost", ([], 0))[0]
    if cost_rows and len(cost_rows) < len(gen_rows):
        raise CaseParseError("mpc.gencost has fewer rows than mpc.gen", matrices["gencost"][1])
    generators = []
    for k, row in enumerate(gen_rows):
        if len(row) < 10:
            raise CaseParseError("gen rows need at least 10 columns", gen_line)
        if row[7] <= 0:
            continue
        p_max = row[8]
        cost = (
            _average_incremental_cost(cost_rows[k], p_max, matrices["gencost"][1])
            if cost_rows
            else 0.0
        )
        generators.append(Generator(bus=int(row[0]), p_max=p_max, marginal_cost=cost, p_base=row[1]))

    if "load" in matrices:
        loads = [
            LoadPoint(bus=int(r[0]), p_nominal=r[1], shed_cost=r[2] if len(r) > 2 else shed_cost)
            for r in matrices["load"][0]
        ]
    else:
        loads = []
        for bus, pd in bus_demand:
            if pd > 0:
                loads.append(LoadPoint(bus=bus, p_nominal=pd, shed_cost=shed_cost))
            elif pd < 0:
                # negative demand is an uncontrolled injection; model it as a
                # free generator that the dispatch will run at full output
                generators.append(Generator(bus=bus, p_max=-pd, marginal_cost=0.0, p_base=-pd))

    branch_rows, branch_line = matrices["branch"]
    rates: dict[int, float] = {}
    if "branch_reliability" in matrices:
        rel_rows, rel_line = matrices["branch_reliability"]
        for row in rel_rows:
            if len(row) <= reliability_column:
                raise CaseParseError(
                    f"branch_reliability has no rate column {reliability_column}", rel_line
                )
            idx = int(row[0])
            if not 1 <= idx <= len(branch_rows):
                raise CaseValidationError(f"branch_reliability references unknown branch {idx}")
            rates[idx - 1] = row[reliability_column]
    branches = []
    for k, row in enumerate(branch_rows):
        if len(row) < 11:
            raise CaseParseError("branch rows need at least 11 columns", branch_line)
        rate_a = row[5]
        rate_c = row[7]
        branches.append(
            Branch(
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                reactance=row[3],
                rating_long=rate_a,
                rating_short=rate_c if rate_c > 0 else short_rating_multiplier * rate_a,
                outage_rate=rates.get(k, default_outage_rate),
                in_service=row[10] > 0,
            )
        )

    return GridCase(
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
        loads=tuple(loads),
        mva_base=mva_base,
        load_factor=load_factor,
        name=name,
    )


def load_case(path, **kwargs) -> GridCase:
    path = Path(path)
    kwargs.setdefault("name", path.stem)
    return parse_case(path.read_text(encoding="utf-8"), **kwargs)


def serialize_case(case: GridCase) -> str:
    """Canonical text form; ``parse_case(serialize_case(c)) == c``."""
    demand_at = {}
    for d in case.loads:
        demand_at[d.bus] = demand_at.get(d.bus, 0.0) + d.p_nominal
    out = [
        f"function mpc = {case.name}",
        "mpc.version = '2';",
        f"mpc.baseMVA = {case.mva_base!r};",
        f"mpc.load_factor = {case.load_factor!r};",
        "",
        "%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin",
        "mpc.bus = [",
    ]
    for b in case.buses:
        out.append(f"\t{b.id}\t1\t{demand_at.get(b.id, 0.0)!r}\t0\t0\t0\t{b.area}\t1\t0\t0\t1\t1.1\t0.9;")
    out += ["];", "", "%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin", "mpc.gen = ["]
    for g in case.generators:
        out.append(f"\t{g.bus}\t{g.p_base!r}\t0\t0\t0\t1\t{case.mva_base!r}\t1\t{g.p_max!r}\t0;")
    out += ["];", "", "%% fbus tbus r x b rateA rateB rateC ratio angle status", "mpc.branch = ["]
    for br in case.branches:
        out.append(
            f"\t{br.from_bus}\t{br.to_bus}\t0\t{br.reactance!r}\t0\t{br.rating_long!r}"
            f"\t{br.rating_long!r}\t{br.rating_short!r}\t0\t0\t{int(br.in_service)};"
        )
    out += ["];", "", "%% model startup shutdown n c1 c0", "mpc.gencost = ["]
    for g in case.generators:
        out.append(f"\t2\t0\t0\t2\t{g.marginal_cost!r}\t0;")
    out += ["];", "", "%% bus p_nominal shed_cost", "mpc.load = ["]
    for d in case.loads:
        out.append(f"\t{d.bus}\t{d.p_nominal!r}\t{d.shed_cost!r};")
    out += ["];", "", "%% branch lambda (outages/year)", "mpc.branch_reliability = ["]
    for k, br in enumerate(case.branches, start=1):
        out.append(f"\t{k}\t{br.outage_rate!r};")
    out += ["];", ""]
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Transformations
# ---------------------------------------------------------------------------


def scale_load(case: GridCase, factor: float) -> GridCase:
    """Copy of ``case`` with its load factor multiplied by ``factor``.

    Cases parsed without an explicit load factor sit at 1.0, so
    ``scale_load(case, 0.8)`` is the 80% operating point.
    """
    if not factor > 0:
        raise ValueError(f"load factor must be positive, got {factor}")
    return dataclasses.replace(case, load_factor=case.load_factor * float(factor))


def adjust_limits_for_feasibility(
    case: GridCase, stress_factor: float = 1.10, margin: float = 1.05
) -> GridCase:
    """Raise branch ratings to ``margin`` times their worst single-outage flow.

    The operating point is an economic dispatch (branch limits ignored) at
    ``stress_factor`` times nominal load. Only non-bridge outages count.
    Short-term ratings move by the same ratio as the long-term ones, and no
    rating ever decreases.
    """
    from .dc_powerflow import build_dc_system, compute_lodf, solve_dc_flow
    from .dispatch import DispatchError, economic_dispatch

    stressed = scale_load(case, stress_factor)
    try:
        injections = economic_dispatch(stressed)
    except DispatchError as exc:
        raise InfeasibleCaseError(f"base power flow unsolvable: {exc}") from exc
    system = build_dc_system(stressed)
    flows = solve_dc_flow(system, injections).flows
    worst = worst_post_contingency_flows(system, flows)

    new_branches = []
    for k, br in enumerate(case.branches):
        target = margin * worst[k]
        if br.in_service and target > br.rating_long:
            ratio = target / br.rating_long
            br = dataclasses.replace(
                br, rating_long=target, rating_short=max(target, br.rating_short * ratio)
            )
        new_branches.append(br)
    return case.with_branches(new_branches)


def worst_post_contingency_flows(system, flows: np.ndarray, block: int = 256) -> np.ndarray:
    """Per-branch max |flow| over all non-bridge single outages (MW).

    Works column-block by column-block so the full LODF matrix is never held.
    """
    from .dc_powerflow import lodf_columns

    m = len(flows)
    worst = np.zeros(m)
    active = np.flatnonzero(system.in_service)
    for start in range(0, len(active), block):
        cols = active[start : start + block]
        h, bridge = lodf_columns(system, cols)
        post = flows[:, None] + h * flows[cols][None, :]
        post[:, bridge] = 0.0
        post[cols, np.arange(len(cols))] = 0.0
        worst = np.maximum(worst, np.abs(post).max(axis=1))
    return worst
