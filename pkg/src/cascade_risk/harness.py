"""Load-level sweep driver and result persistence.

A sweep directory holds::

    risk.csv               one row per (level, bin)
    dispatch_summary.csv   objective and shedding per level
    plot_all_bins.csv      smoothed risk per (level, bin)
    plot_large_bins.csv    same, bins at or above the large-blackout cut
    risk_by_level.png      figure of the smoothed series
    manifest.json          config echo, config hash, library versions
    levels/<L>.json        per-level record with wall-clock time, used to resume
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .cascade_sim import CascadeConfig
from .dispatch import DispatchSolution, proportional_dispatch, solve_scdcopf
from .grid_model import GridCase, adjust_limits_for_feasibility, load_case, scale_load
from .risk_mc import RTS_BINS, RiskEstimate, build_outage_model, risk_csv, rolling_average, run_monte_carlo

log = logging.getLogger(__name__)

BUILTIN_CASES = {"rts96": "rts96.m", "polish": "case2383wp.m"}
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class SweepError(RuntimeError):
    def __init__(self, message, level):
        super().__init__(message)
        self.level = level


def resolve_case_path(name: str) -> Path:
    if name in BUILTIN_CASES:
        return Path(str(resources.files("cascade_risk") / "data" / BUILTIN_CASES[name]))
    path = Path(name)
    if not path.exists():
        raise ConfigError(f"case file not found: {name}")
    return path


@dataclass(frozen=True)
class ExperimentConfig:
    case_path: str
    load_levels: tuple[int, ...]
    dispatch_policy: str = "scdcopf"  # "scdcopf" | "proportional"
    anchor_level: int | None = None
    n_iterations: int = 100_000
    master_seed: int = 0
    bins: tuple[float, ...] = RTS_BINS
    workers: int = 1
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    output_dir: str | None = None
    adjust_limits: bool = False
    simulate_single_outages: bool = False
    large_bin_cut: float = 0.05

    def __post_init__(self):
        if not self.load_levels:
            raise ConfigError("no load levels requested")
        for level in self.load_levels:
            if int(level) != level:
                raise ConfigError(f"load levels are integer percentages, got {level}")
            if not 0 < level <= 200:
                raise ConfigError(f"load level {level} outside (0, 200]")
        if len(set(self.load_levels)) != len(self.load_levels):
            raise ConfigError("duplicate load levels")
        if self.dispatch_policy not in ("scdcopf", "proportional"):
            raise ConfigError(f"unknown dispatch policy {self.dispatch_policy!r}")
        if self.dispatch_policy == "proportional":
            if self.anchor_level is None:
                raise ConfigError("proportional policy needs an anchor level")
            if self.anchor_level < max(self.load_levels):
                raise ConfigError(
                    f"anchor level {self.anchor_level} below requested level {max(self.load_levels)}"
                )
        if self.n_iterations < 1:
            raise ConfigError("n_iterations must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        edges = list(self.bins)
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ConfigError(f"bin edges must be increasing, got {edges}")

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["load_levels"] = list(self.load_levels)
        d["bins"] = list(self.bins)
        d["cascade"]["gen_ramp_limit"] = repr(self.cascade.gen_ramp_limit)
        return d

    def config_hash(self) -> str:
        """Hash of everything that affects results (not workers or paths)."""
        d = self.echo()
        for key in ("workers", "output_dir", "load_levels"):
            d.pop(key)
        d["cascade"].pop("record_events")
        d["case_sha256"] = hashlib.sha256(resolve_case_path(self.case_path).read_bytes()).hexdigest()
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LevelResult:
    level: int
    risk: RiskEstimate
    objective: float
    shed_total: float
    served_total: float
    cycles: int
    wall_clock_s: float

    def to_json(self, config_hash: str) -> dict:
        r = self.risk
        return {
            "config_hash": config_hash,
            "level": self.level,
            "objective": self.objective,
            "shed_total": self.shed_total,
            "served_total": self.served_total,
            "cycles": self.cycles,
            "wall_clock_s": self.wall_clock_s,
            "risk": {
                "n_iterations": r.n_iterations,
                "expected_blackout_mw": r.expected_blackout_mw,
                "bin_edges": list(r.bin_edges),
                "bin_risk_mw": r.bin_risk_mw.tolist(),
                "bin_event_counts": r.bin_event_counts.tolist(),
                "standard_error_mw": r.standard_error_mw,
                "bin_standard_error_mw": r.bin_standard_error_mw.tolist(),
                "seed": r.seed,
                "served_mw": r.served_mw,
                "simulated": r.simulated,
            },
        }

    @classmethod
    def from_json(cls, d: dict) -> LevelResult:
        r = d["risk"]
        risk = RiskEstimate(
            n_iterations=r["n_iterations"],
            expected_blackout_mw=r["expected_blackout_mw"],
            bin_edges=tuple(r["bin_edges"]),
            bin_risk_mw=np.array(r["bin_risk_mw"], dtype=float),
            bin_event_counts=np.array(r["bin_event_counts"], dtype=np.int64),
            standard_error_mw=r["standard_error_mw"],
            bin_standard_error_mw=np.array(r["bin_standard_error_mw"], dtype=float),
            seed=r["seed"],
            served_mw=r["served_mw"],
            simulated=r["simulated"],
        )
        return cls(
            level=d["level"],
            risk=risk,
            objective=d["objective"],
            shed_total=d["shed_total"],
            served_total=d["served_total"],
            cycles=d["cycles"],
            wall_clock_s=d["wall_clock_s"],
        )


@dataclass
class SweepResult:
    config: ExperimentConfig
    levels: dict[int, LevelResult]

    @property
    def risk(self) -> dict[int, RiskEstimate]:
        return {L: r.risk for L, r in self.levels.items()}

    def bin_series(self, k: int) -> dict[int, float]:
        return {L: float(r.risk.bin_risk_mw[k]) for L, r in sorted(self.levels.items())}

    def total_series(self) -> dict[int, float]:
        return {L: r.risk.expected_blackout_mw for L, r in sorted(self.levels.items())}

    def smoothed(self) -> dict[int, np.ndarray]:
        """Per-level bin risk after the 3-level rolling average."""
        raw = {L: r.risk.bin_risk_mw for L, r in sorted(self.levels.items())}
        return rolling_average(raw, 3)


def load_and_prepare_case(config: ExperimentConfig) -> GridCase:
    case = load_case(resolve_case_path(config.case_path))
    if config.adjust_limits:
        case = adjust_limits_for_feasibility(case)
    return case


def dispatch_for_level(case, config, level, anchor: DispatchSolution | None) -> DispatchSolution:
    if config.dispatch_policy == "scdcopf":
        return solve_scdcopf(scale_load(case, level / 100))
    return proportional_dispatch(anchor, level / 100)


def run_sweep(config: ExperimentConfig) -> SweepResult:
    """Run (or resume) a load-level sweep and write its outputs."""
    from .dispatch import DispatchError

    out = Path(config.output_dir) if config.output_dir else None
    chash = config.config_hash()
    if out:
        (out / "levels").mkdir(parents=True, exist_ok=True)
    case = None
    anchor = None
    levels: dict[int, LevelResult] = {}
    for level in sorted(config.load_levels):
        record = out / "levels" / f"{level}.json" if out else None
        if record and record.exists():
            stored = json.loads(record.read_text())
            if stored.get("config_hash") == chash:
                levels[level] = LevelResult.from_json(stored)
                log.info("level %d: reusing stored result", level)
                continue
        if case is None:
            case = load_and_prepare_case(config)
        if config.dispatch_policy == "proportional" and anchor is None:
            try:
                anchor = solve_scdcopf(scale_load(case, config.anchor_level / 100))
            except DispatchError as exc:
                raise SweepError(f"anchor level {config.anchor_level}: {exc}", config.anchor_level) from exc
        start = time.perf_counter()
        try:
            sol = dispatch_for_level(case, config, level, anchor)
        except DispatchError as exc:
            if out:
                _write_outputs(out, config, chash, levels)
            raise SweepError(f"level {level}: {exc}", level) from exc
        scaled = scale_load(case, level / 100)
        risk = run_monte_carlo(
            scaled,
            sol,
            build_outage_model(scaled),
            config.n_iterations,
            config.master_seed,
            config.bins,
            config.cascade,
            workers=config.workers,
            simulate_single_outages=config.simulate_single_outages,
        )
        result = LevelResult(
            level=level,
            risk=risk,
            objective=float(sol.objective),
            shed_total=float(sol.shed_total),
            served_total=float(sol.served_total),
            cycles=sol.cycles,
            wall_clock_s=round(time.perf_counter() - start, 3),
        )
        levels[level] = result
        log.info("level %d: risk %.6g MW (%d cascades)", level, risk.expected_blackout_mw, risk.simulated)
        if record:
            record.write_text(json.dumps(result.to_json(chash), sort_keys=True, indent=1) + "\n")
    result = SweepResult(config=config, levels=levels)
    if out:
        _write_outputs(out, config, chash, levels)
    return result


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------


def dispatch_summary_csv(levels: dict[int, LevelResult]) -> str:
    # wall-clock times stay in levels/<L>.json so this file is worker-invariant
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "objective", "shed_total_mw", "served_mw", "cycles"])
    for L in sorted(levels):
        r = levels[L]
        w.writerow([L, repr(r.objective), repr(r.shed_total), repr(r.served_total), r.cycles])
    return buf.getvalue()


def emit_plot_data(result: SweepResult) -> dict[str, str]:
    """Tidy CSV tables of smoothed risk: all bins, and large bins only."""
    if not result.levels:
        raise ValueError("empty sweep result")
    smoothed = result.smoothed()
    any_level = next(iter(result.levels.values()))
    edges = any_level.risk.bin_edges
    cut = result.config.large_bin_cut
    tables = {}
    for name, keep in (
        ("plot_all_bins.csv", lambda lo: True),
        ("plot_large_bins.csv", lambda lo: lo >= cut - 1e-12),
    ):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "bin_low", "bin_high", "smoothed_risk_mw"])
        for L in sorted(smoothed):
            for k, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
                if keep(lo):
                    w.writerow([L, repr(float(lo)), repr(float(hi)), repr(float(smoothed[L][k]))])
        tables[name] = buf.getvalue()
    return tables


def render_figure(result: SweepResult, path) -> None:
    """Smoothed risk against load level, one line per size bin, as PNG.

    ``path`` may be a filename or a binary file object.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    smoothed = result.smoothed()
    levels = sorted(smoothed)
    edges = next(iter(result.levels.values())).risk.bin_edges
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for k, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        ax.plot(levels, [smoothed[L][k] for L in levels], marker=".", label=f"BO {100*lo:g}-{100*hi:g}%")
    ax.plot(levels, [smoothed[L].sum() for L in levels], "k--", lw=1, label="total")
    ax.set_xlabel("load level (%)")
    ax.set_ylabel("risk (MW)")
    ax.set_title(f"{Path(result.config.case_path).stem}, {result.config.dispatch_policy} dispatch")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=120, metadata={"Software": None})
    plt.close(fig)


def _write_if_changed(path: Path, data: str | bytes) -> None:
    raw = data.encode() if isinstance(data, str) else data
    if path.exists() and path.read_bytes() == raw:
        return
    path.write_bytes(raw)


def _versions() -> dict:
    import importlib.metadata as md

    out = {}
    for pkg in ("artifact", "numpy", "scipy", "matplotlib"):
        try:
            out[pkg] = md.version(pkg)
        except md.PackageNotFoundError:
            out[pkg] = None
    return out


def _write_outputs(out: Path, config: ExperimentConfig, chash: str, levels: dict[int, LevelResult]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.echo(),
        "config_hash": chash,
        "master_seed": config.master_seed,
        "completed_levels": sorted(levels),
        "versions": _versions(),
    }
    manifest["config"].pop("output_dir")
    manifest["config"].pop("workers")
    _write_if_changed(out / "manifest.json", json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    if not levels:
        return
    _write_if_changed(out / "risk.csv", risk_csv({L: r.risk for L, r in levels.items()}))
    _write_if_changed(out / "dispatch_summary.csv", dispatch_summary_csv(levels))
    result = SweepResult(config=config, levels=levels)
    for name, text in emit_plot_data(result).items():
        _write_if_changed(out / name, text)
    png = io.BytesIO()
    render_figure(result, png)
    _write_if_changed(out / "risk_by_level.png", png.getvalue())
