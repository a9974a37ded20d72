"""Deterministic DC cascading-outage simulator.

One tier: find islands, rebalance each island, solve DC flows, then trip
every branch above its trip rating at once. Tiers repeat until nothing
trips. The blackout size is the drop in served load from the
pre-contingency dispatch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dc_powerflow import _components, solve_islanded_flow
from .dispatch import DispatchSolution
from .grid_model import GridCase


class CascadeNonTermination(RuntimeError):
    def __init__(self, message, partial: CascadeResult, contingency=()):
        super().__init__(message)
        self.partial = partial
        self.contingency = tuple(contingency)


@dataclass(frozen=True)
class CascadeConfig:
    overload_tolerance: float = 1e-4
    trip_threshold: str = "short"  # "short" | "long"
    max_tiers: int = 200
    gen_ramp_limit: float = float("inf")  # MW per generator per tier
    rebalance: str = "min_shed"  # "min_shed" | "pro_rata"
    record_events: bool = False

    def __post_init__(self):
        if self.max_tiers < 1:
            raise ValueError("max_tiers must be >= 1")
        if self.overload_tolerance < 0:
            raise ValueError("overload_tolerance must be >= 0")
        if self.gen_ramp_limit < 0:
            raise ValueError("gen_ramp_limit must be >= 0")
        if self.trip_threshold not in ("short", "long"):
            raise ValueError(f"unknown trip_threshold {self.trip_threshold!r}")
        if self.rebalance not in ("min_shed", "pro_rata"):
            raise ValueError(f"unknown rebalance mode {self.rebalance!r}")


@dataclass(frozen=True)
class CascadeResult:
    blackout_mw: float
    trip_sequence: tuple[tuple[int, int], ...]
    final_islands: int
    tiers: int
    events: tuple[dict, ...] = field(default=(), compare=False)

    def event_log(self) -> str:
        """Line-delimited JSON, one record per tier."""
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


def _ratio(num, den, fallback):
    # sub-picowatt denominators count as empty
    out = np.full(np.shape(den), fallback, dtype=float)
    np.divide(num, den, out=out, where=den > 1e-12)
    return out


def _rebalance(p_gen, served, lo, hi, gen_isl, load_isl, n_isl, mode):
    """Balance each island in place: move generation inside [lo, hi] first,
    shed load only for the remaining deficit, curtail generation for any
    surplus."""
    gen_sum = np.bincount(gen_isl, weights=p_gen, minlength=n_isl)
    load_sum = np.bincount(load_isl, weights=served, minlength=n_isl)
    if mode == "pro_rata":
        hi = np.minimum(hi, p_gen)
    hi_sum = np.bincount(gen_isl, weights=hi, minlength=n_isl)
    lo_sum = np.bincount(gen_isl, weights=lo, minlength=n_isl)

    target = np.minimum(load_sum, hi_sum)
    # deficit: shed loads pro rata to what they are serving
    keep = _ratio(target, load_sum, 1.0)
    served *= keep[load_isl]

    up = target > gen_sum
    down = target < gen_sum
    # raise toward hi in proportion to headroom
    room_up = np.bincount(gen_isl, weights=hi - p_gen, minlength=n_isl)
    frac_up = _ratio(target - gen_sum, room_up, 0.0)
    # lower toward lo in proportion to footroom; below lo all units
    # drop in proportion to output (curtailment is not ramp limited)
    room_dn = np.bincount(gen_isl, weights=p_gen - lo, minlength=n_isl)
    need_dn = gen_sum - target
    within = need_dn <= room_dn
    frac_dn = _ratio(need_dn, room_dn, 0.0)
    scale_below = _ratio(target, lo_sum, 0.0)
    g_up = p_gen + frac_up[gen_isl] * (hi - p_gen)
    g_dn_within = p_gen - frac_dn[gen_isl] * (p_gen - lo)
    g_dn_below = lo * scale_below[gen_isl]
    g_dn = np.where(within[gen_isl], g_dn_within, g_dn_below)
    p_gen[:] = np.where(up[gen_isl], g_up, np.where(down[gen_isl], g_dn, p_gen))


def simulate_cascade(
    case: GridCase,
    dispatch: DispatchSolution,
    contingency=(),
    config: CascadeConfig = CascadeConfig(),
) -> CascadeResult:
    """Apply ``contingency`` (branch indices) and run the cascade to quiescence."""
    contingency = sorted(set(int(k) for k in contingency))
    for k in contingency:
        if not 0 <= k < case.n_branch:
            raise IndexError(f"contingency branch {k} does not exist")
        if not case.in_service[k]:
            raise ValueError(f"contingency branch {k} is already out of service")

    n = case.n_bus
    f, t = case.branch_from, case.branch_to
    susceptance = 1.0 / case.reactance
    rating = case.rating_short if config.trip_threshold == "short" else case.rating_long
    trip_at = (1.0 + config.overload_tolerance) * rating
    ramp = config.gen_ramp_limit

    alive = case.in_service.copy()
    alive[contingency] = False
    p_gen = np.array(dispatch.p_gen, dtype=float)
    served = np.array(dispatch.p_served, dtype=float)
    pmax = case.gen_pmax
    served0 = float(served.sum())

    sequence = [(0, k) for k in contingency]
    events = []
    tier = 0
    n_isl = 1
    while True:
        n_isl, labels = _components(n, f, t, alive)
        gen_isl = labels[case.gen_bus]
        load_isl = labels[case.load_bus]
        lo = np.maximum(0.0, p_gen - ramp)
        hi = np.minimum(pmax, p_gen + ramp)
        _rebalance(p_gen, served, lo, hi, gen_isl, load_isl, n_isl, config.rebalance)

        inj = np.zeros(n)
        np.add.at(inj, case.gen_bus, p_gen)
        np.add.at(inj, case.load_bus, -served)
        flows = solve_islanded_flow(n, f, t, susceptance, alive, inj, case.mva_base, labels)
        tripped = np.flatnonzero(alive & (np.abs(flows) > trip_at))
        if config.record_events:
            events.append(
                {
                    "tier": tier,
                    "tripped": tripped.tolist(),
                    "islands": int(n_isl),
                    "shed_mw": served0 - float(served.sum()),
                }
            )
        if not len(tripped):
            break
        tier += 1
        sequence.extend((tier, int(k)) for k in tripped)
        alive[tripped] = False
        if tier >= config.max_tiers:
            partial = CascadeResult(
                blackout_mw=max(0.0, served0 - float(served.sum())),
                trip_sequence=tuple(sequence),
                final_islands=int(n_isl),
                tiers=tier,
                events=tuple(events),
            )
            raise CascadeNonTermination(
                f"cascade still tripping after {tier} tiers", partial, contingency
            )

    return CascadeResult(
        blackout_mw=max(0.0, served0 - float(served.sum())),
        trip_sequence=tuple(sequence),
        final_islands=int(n_isl),
        tiers=tier,
        events=tuple(events),
    )
