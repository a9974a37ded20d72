"""Monte Carlo estimation of expected blackout size, plus an exact
enumeration oracle for small networks.

Random numbers come from a counter-based Philox generator keyed by the
master seed. Iterations are grouped into fixed blocks of ``BLOCK_SIZE``;
block ``b`` uses counter ``b``, and iteration ``i`` is row ``i % BLOCK_SIZE``
of its block's uniform matrix. A draw therefore depends only on
``(master_seed, i)``, and results are identical for any worker count.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
import multiprocessing as mp
from dataclasses import dataclass, field

import numpy as np

from .cascade_sim import CascadeConfig, CascadeNonTermination, simulate_cascade
from .dispatch import DispatchSolution
from .grid_model import GridCase

HOURS_PER_YEAR = 8760.0
BLOCK_SIZE = 4096
ENUMERATION_LIMIT = 10_000_000

RTS_BINS = (0.0, 0.05, 0.25, 0.50, 1.0)
POLISH_BINS = tuple(round(0.1 * k, 1) for k in range(11))


@dataclass(frozen=True)
class OutageModel:
    p_fail: np.ndarray


@dataclass(frozen=True)
class Contingency:
    branch_ids: tuple[int, ...]
    probability: float = float("nan")

    @property
    def order(self) -> int:
        return len(self.branch_ids)


@dataclass(frozen=True)
class RiskEstimate:
    n_iterations: int
    expected_blackout_mw: float
    bin_edges: tuple[float, ...]
    bin_risk_mw: np.ndarray
    bin_event_counts: np.ndarray
    standard_error_mw: float
    bin_standard_error_mw: np.ndarray
    seed: int | None
    served_mw: float
    unenumerated_mass: float = 0.0
    simulated: int = field(default=0, compare=False)

    def bins(self):
        return list(zip(self.bin_edges[:-1], self.bin_edges[1:]))

    def to_csv_rows(self, level) -> list[list]:
        rows = []
        for k, (lo, hi) in enumerate(self.bins()):
            rows.append(
                [
                    level,
                    repr(float(lo)),
                    repr(float(hi)),
                    repr(float(self.bin_risk_mw[k])),
                    int(self.bin_event_counts[k]),
                    repr(float(self.bin_standard_error_mw[k])),
                    self.n_iterations,
                    "" if self.seed is None else self.seed,
                ]
            )
        return rows


CSV_HEADER = ["level", "bin_low", "bin_high", "risk_mw", "events", "stderr_mw", "n_iterations", "seed"]


def risk_csv(estimates: dict) -> str:
    """CSV text with one row per (level, bin)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for level in sorted(estimates):
        writer.writerows(estimates[level].to_csv_rows(level))
    return buf.getvalue()


def build_outage_model(case: GridCase) -> OutageModel:
    """Per-branch outage probability per iteration, ``rate / 8760``.

    Out-of-service branches get probability 0.
    """
    rates = case.outage_rates
    if np.any(rates < 0):
        raise ValueError("outage rates must be non-negative")
    if np.any(rates > HOURS_PER_YEAR):
        bad = np.flatnonzero(rates > HOURS_PER_YEAR).tolist()
        raise ValueError(f"outage rate above {HOURS_PER_YEAR:g}/year on branches {bad}")
    p = rates / HOURS_PER_YEAR
    return OutageModel(p_fail=np.where(case.in_service, p, 0.0))


def block_stream(master_seed: int, block: int) -> np.random.Generator:
    """Generator for iteration block ``block`` of a run seeded ``master_seed``."""
    key = int(master_seed) % (1 << 128)
    bitgen = np.random.Philox(key=key, counter=[0, 0, 0, int(block)])
    return np.random.Generator(bitgen)


def iteration_stream(master_seed: int, iteration: int) -> np.random.Generator:
    """Generator positioned at the draw of one iteration (slow path; for
    single draws and tests)."""
    block, row = divmod(int(iteration), BLOCK_SIZE)
    gen = block_stream(master_seed, block)
    # rows are consumed in order, so skip the earlier ones
    return _Skipped(gen, row)


class _Skipped:
    def __init__(self, gen, rows):
        self._gen = gen
        self._rows = rows

    def random(self, m):
        if self._rows:
            self._gen.random((self._rows, m))
            self._rows = 0
        return self._gen.random(m)


def sample_contingency(model: OutageModel, rng) -> Contingency:
    """Independent Bernoulli outage of every branch."""
    u = rng.random(len(model.p_fail))
    return Contingency(branch_ids=tuple(int(k) for k in np.flatnonzero(u < model.p_fail)))


def contingency_probability(p_fail: np.ndarray, branch_ids, form: str = "full") -> float:
    """``prod p_i`` over outaged branches, times ``prod (1 - p_j)`` over the
    rest when ``form == "full"``."""
    mask = np.zeros(len(p_fail), dtype=bool)
    mask[list(branch_ids)] = True
    prob = float(np.prod(p_fail[mask]))
    if form == "full":
        prob *= float(np.prod(1.0 - p_fail[~mask]))
    elif form != "product_only":
        raise ValueError(f"unknown probability form {form!r}")
    return prob


def outage_count_distribution(p_fail: np.ndarray) -> np.ndarray:
    """Exact distribution of the number of simultaneous outages."""
    dist = np.zeros(len(p_fail) + 1)
    dist[0] = 1.0
    for p in p_fail:
        dist[1:] = dist[1:] * (1 - p) + dist[:-1] * p
        dist[0] *= 1 - p
    return dist


def choose_max_k(model: OutageModel, rel_tol: float = 1e-4) -> int:
    """Smallest order whose omitted mass is below ``rel_tol`` times
    P(at least one outage)."""
    dist = outage_count_distribution(model.p_fail)
    any_outage = 1.0 - dist[0]
    for k in range(len(dist)):
        if dist[k + 1 :].sum() < rel_tol * any_outage:
            return k
    return len(dist) - 1


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


class _Scorer:
    """Blackout size per contingency, memoized (the simulator is a pure
    function of the outage set)."""

    def __init__(self, case, dispatch, config, simulate_single_outages):
        self.case = case
        self.dispatch = dispatch
        self.config = config
        self.simulate_single = simulate_single_outages
        self.memo: dict[tuple[int, ...], float] = {}
        self.simulated = 0

    def __call__(self, ids: tuple[int, ...]) -> float:
        if len(ids) == 0 or (len(ids) == 1 and not self.simulate_single):
            return 0.0
        hit = self.memo.get(ids)
        if hit is None:
            try:
                hit = simulate_cascade(self.case, self.dispatch, ids, self.config).blackout_mw
            except CascadeNonTermination as exc:
                exc.contingency = ids
                raise
            self.memo[ids] = hit
            self.simulated += 1
        return hit


def _bin_index(sizes_mw, served_mw, edges) -> np.ndarray:
    frac = np.asarray(sizes_mw) / served_mw
    idx = np.searchsorted(np.asarray(edges), frac, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(case, dispatch, p_fail, seed, config, simulate_single):
    _WORKER["scorer"] = _Scorer(case, dispatch, config, simulate_single)
    _WORKER["p_fail"] = p_fail
    _WORKER["seed"] = seed


def _run_block(args) -> tuple[np.ndarray, np.ndarray, int]:
    block, n_rows = args
    p_fail = _WORKER["p_fail"]
    scorer = _WORKER["scorer"]
    u = block_stream(_WORKER["seed"], block).random((n_rows, len(p_fail)))
    out = u < p_fail
    counts = out.sum(axis=1)
    min_order = 1 if scorer.simulate_single else 2
    rows = np.flatnonzero(counts >= min_order)
    sizes = np.zeros(len(rows))
    before = scorer.simulated
    for n, r in enumerate(rows):
        sizes[n] = scorer(tuple(int(k) for k in np.flatnonzero(out[r])))
    hit = sizes > 0
    return block * BLOCK_SIZE + rows[hit], sizes[hit], scorer.simulated - before


def run_monte_carlo(
    case: GridCase,
    dispatch: DispatchSolution,
    model: OutageModel,
    n_iterations: int,
    master_seed: int,
    bins=RTS_BINS,
    config: CascadeConfig = CascadeConfig(),
    *,
    workers: int = 1,
    simulate_single_outages: bool = False,
) -> RiskEstimate:
    """Estimate expected blackout size (MW) and its split by size bin.

    Draws with fewer than two outages score zero without simulation (set
    ``simulate_single_outages`` to simulate single outages too) but always
    count in the denominator.
    """
    if n_iterations < 1:
        raise ValueError("n_iterations must be >= 1")
    edges = tuple(float(e) for e in bins)
    tasks = []
    for block in range(math.ceil(n_iterations / BLOCK_SIZE)):
        tasks.append((block, min(BLOCK_SIZE, n_iterations - block * BLOCK_SIZE)))
    init = (case, dispatch, model.p_fail, master_seed, config, simulate_single_outages)
    if workers <= 1:
        _init_worker(*init)
        parts = [_run_block(t) for t in tasks]
    else:
        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_init_worker, initargs=init) as pool:
            parts = pool.map(_run_block, tasks, chunksize=1)
    index = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, dtype=np.int64)
    sizes = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    order = np.argsort(index, kind="stable")
    sizes = sizes[order]
    simulated = sum(p[2] for p in parts)
    return _summarize(sizes, n_iterations, edges, dispatch.served_total, master_seed, simulated)


def _summarize(sizes, n, edges, served, seed, simulated) -> RiskEstimate:
    nbins = len(edges) - 1
    idx = _bin_index(sizes, served, edges) if len(sizes) else np.zeros(0, dtype=int)
    bin_sum = np.zeros(nbins)
    bin_sq = np.zeros(nbins)
    counts = np.zeros(nbins, dtype=np.int64)
    # sequential accumulation in iteration order keeps the bytes stable
    for s, k in zip(sizes.tolist(), idx.tolist()):
        bin_sum[k] += s
        bin_sq[k] += s * s
        counts[k] += 1
    bin_risk = bin_sum / n
    total = float(bin_risk.sum())
    tot_sum, tot_sq = float(bin_sum.sum()), float(bin_sq.sum())

    def stderr(s1, s2):
        if n < 2:
            return 0.0
        var = max(0.0, (s2 - s1 * s1 / n) / (n - 1))
        return math.sqrt(var / n)

    return RiskEstimate(
        n_iterations=n,
        expected_blackout_mw=total,
        bin_edges=edges,
        bin_risk_mw=bin_risk,
        bin_event_counts=counts,
        standard_error_mw=stderr(tot_sum, tot_sq),
        bin_standard_error_mw=np.array([stderr(a, b) for a, b in zip(bin_sum, bin_sq)]),
        seed=seed,
        served_mw=served,
        simulated=simulated,
    )


# ---------------------------------------------------------------------------
# Exact enumeration
# ---------------------------------------------------------------------------


def exhaustive_risk(
    case: GridCase,
    dispatch: DispatchSolution,
    model: OutageModel,
    max_k: int,
    bins=RTS_BINS,
    config: CascadeConfig = CascadeConfig(),
    *,
    probability_form: str = "full",
    simulate_single_outages: bool = False,
) -> RiskEstimate:
    """Exact risk ``sum Pr(c) * S(c)`` over every outage set of order <= max_k.

    ``unenumerated_mass`` on the result bounds the probability of the
    orders left out. Scoring follows :func:`run_monte_carlo` (orders 0 and 1
    score zero unless ``simulate_single_outages``).
    """
    p = model.p_fail
    candidates = np.flatnonzero(p > 0)
    m = len(candidates)
    total_sets = sum(math.comb(m, k) for k in range(max_k + 1))
    if total_sets > ENUMERATION_LIMIT:
        raise OverflowError(
            f"{total_sets} contingencies of order <= {max_k} exceed the enumeration limit"
        )
    edges = tuple(float(e) for e in bins)
    nbins = len(edges) - 1
    served = dispatch.served_total
    scorer = _Scorer(case, dispatch, config, simulate_single_outages)
    bin_risk = np.zeros(nbins)
    counts = np.zeros(nbins, dtype=np.int64)
    min_order = 1 if simulate_single_outages else 2
    for k in range(min_order, max_k + 1):
        for combo in itertools.combinations(candidates.tolist(), k):
            size = scorer(combo)
            if size <= 0:
                continue
            b = int(_bin_index([size], served, edges)[0])
            bin_risk[b] += contingency_probability(p, combo, probability_form) * size
            counts[b] += 1
    dist = outage_count_distribution(p)
    return RiskEstimate(
        n_iterations=0,
        expected_blackout_mw=float(bin_risk.sum()),
        bin_edges=edges,
        bin_risk_mw=bin_risk,
        bin_event_counts=counts,
        standard_error_mw=0.0,
        bin_standard_error_mw=np.zeros(nbins),
        seed=None,
        served_mw=served,
        unenumerated_mass=float(dist[max_k + 1 :].sum()),
        simulated=scorer.simulated,
    )


def rolling_average(series, window: int = 3):
    """Centered moving average over integer load levels.

    ``series`` is a mapping ``level -> value`` (or a sequence indexed
    0..n-1). Each level averages the levels within ``window // 2`` of it
    that are present, so endpoints use a truncated window.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    half = window // 2
    if isinstance(series, dict):
        out = {}
        for level in series:
            vals = [series[l] for l in range(level - half, level + half + 1) if l in series]
            out[level] = float(np.mean(vals, axis=0)) if np.ndim(vals[0]) == 0 else np.mean(vals, axis=0)
        return out
    arr = np.asarray(series, dtype=float)
    out = np.empty_like(arr)
    for i in range(len(arr)):
        lo, hi = max(0, i - half), min(len(arr), i + half + 1)
        out[i] = arr[lo:hi].mean(axis=0)
    return out
