from __future__ import annotations

from functools import lru_cache

import pytest

from cascade_risk.grid_model import Branch, Bus, Generator, GridCase, LoadPoint, load_case, scale_load
from cascade_risk.harness import resolve_case_path


def make_case(buses, branches, gens, loads, **kw) -> GridCase:
    """Compact constructor.

    branches: (from, to, x, rating_long[, rating_short[, outage_rate]])
    gens: (bus, p_max, cost); loads: (bus, p_nominal)
    """
    brs = []
    for spec in branches:
        f, t, x, r = spec[:4]
        short = spec[4] if len(spec) > 4 else r
        rate = spec[5] if len(spec) > 5 else 1.0
        brs.append(Branch(f, t, x, r, short, rate))
    return GridCase(
        buses=tuple(Bus(b) for b in buses),
        branches=tuple(brs),
        generators=tuple(Generator(b, p, c) for b, p, c in gens),
        loads=tuple(LoadPoint(b, p) for b, p in loads),
        **kw,
    )


def two_bus(limit=150.0, load=100.0, cap=200.0, cost=10.0, x=0.1):
    return make_case([1, 2], [(1, 2, x, limit, limit)], [(1, cap, cost)], [(2, load)])


def triangle(x=0.1, rating=500.0):
    return make_case(
        [1, 2, 3],
        [(1, 2, x, rating), (2, 3, x, rating), (1, 3, x, rating)],
        [(1, 200.0, 10.0)],
        [(3, 90.0)],
    )


def ring4():
    """Four buses, five equal branches; 200 MW flows from bus 1 to bus 3.

    Direct branch 1-3 carries 100 MW, each two-hop path 50 MW.
    """
    return make_case(
        [1, 2, 3, 4],
        [
            (1, 2, 0.1, 120.0, 150.0),
            (2, 3, 0.1, 120.0, 150.0),
            (1, 4, 0.1, 120.0, 150.0),
            (4, 3, 0.1, 120.0, 150.0),
            (1, 3, 0.1, 120.0, 150.0),
        ],
        [(1, 400.0, 10.0), (3, 50.0, 20.0)],
        [(3, 200.0)],
    )


def radial_feeder():
    """Meshed triangle with a 50 MW load hanging off bus 3 through bus 4."""
    return make_case(
        [1, 2, 3, 4],
        [
            (1, 2, 0.1, 300.0, 360.0),
            (2, 3, 0.1, 300.0, 360.0),
            (1, 3, 0.1, 300.0, 360.0),
            (3, 4, 0.1, 300.0, 360.0),
        ],
        [(1, 300.0, 10.0), (2, 100.0, 15.0)],
        [(2, 80.0), (3, 60.0), (4, 50.0)],
    )


# outage probabilities for the 6-bus toy, one per branch
TOY6_P = (0.02, 0.05, 0.03, 0.08, 0.04, 0.06, 0.10, 0.07, 0.01, 0.05)


def toy6():
    """Six meshed buses plus a 10 MW radial load at bus 7; ten branches."""
    specs = [
        (1, 2, 0.10),
        (1, 3, 0.15),
        (2, 3, 0.10),
        (2, 4, 0.20),
        (3, 5, 0.10),
        (4, 5, 0.15),
        (5, 6, 0.10),
        (4, 6, 0.20),
        (1, 4, 0.25),
        (6, 7, 0.05),
    ]
    branches = [(f, t, x, 100.0, 140.0, p * 8760.0) for (f, t, x), p in zip(specs, TOY6_P)]
    return make_case(
        [1, 2, 3, 4, 5, 6, 7],
        branches,
        [(1, 300.0, 10.0), (4, 150.0, 30.0)],
        [(2, 80.0), (3, 100.0), (5, 70.0), (6, 60.0), (7, 10.0)],
    )


@lru_cache(maxsize=None)
def _rts96():
    return load_case(resolve_case_path("rts96"))


@lru_cache(maxsize=None)
def rts_secured(level: int):
    from cascade_risk.dispatch import solve_scdcopf

    case = scale_load(_rts96(), level / 100)
    return case, solve_scdcopf(case)


@pytest.fixture(scope="session")
def rts96():
    return _rts96()


REFERENCE_LINE_FLOWS = {
    # (from, to): SCDCOPF 50/75/119 %, proportional 50/75/119 % (MW)
    (107, 203): (23.88, 44.38, 8.57, 3.60, 5.40, 8.57),
    (113, 215): (86.32, 122.46, 50.38, 21.17, 31.75, 50.38),
    (123, 217): (21.08, 31.76, 2.67, 1.12, 1.68, 2.67),
    (325, 121): (156.27, 143.58, 17.98, 7.55, 11.33, 17.98),
    (318, 223): (181.27, 124.58, 31.48, 13.23, 19.84, 31.48),
}


# --- acceptance report -----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool | None, detail: str) -> bool | None:
    """Queue one summary line; ``ok=None`` marks an informational line."""
    label = "INFO" if ok is None else "PASS" if ok else "FAIL"
    ACCEPTANCE_LINES.append(f"{label}  {criterion}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
