"""Retrospective polls, counterfactual comparisons, and prospective sweeps.

poll() aggregates agent attributes or trajectory series into grouped tables.
counterfactual() runs baseline and patched configs over a shared seed list
(common random numbers) and reports paired deltas. prospective_sweep() grids
a vaccine-protocol field, runs two protocols per grid value, and reports the
deaths ratio fitness curve with its viability threshold.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import RunConfig, apply_patch, validate_config
from .engine import MONTH_STEPS, Simulation, Trajectory
from .epi import VaccineProtocol
from .errors import DomainError
from .popgen import STATIC_AXES, Population, Stage

POLL_METRICS = (
    "median_income",
    "isolation_rate",
    "infection_rate",
    "unemployment_rate",
    "mean_willingness",
)

FilterValue = Union[str, Sequence[str]]


@dataclass
class PollQuery:
    metric: str
    group_by: List[str] = field(default_factory=list)
    filter: Dict[str, FilterValue] = field(default_factory=dict)
    window: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.metric not in POLL_METRICS:
            raise DomainError(f"unknown metric {self.metric!r}")
        for axis in list(self.group_by) + list(self.filter):
            if axis not in STATIC_AXES:
                raise DomainError(f"unknown attribute {axis!r}")
        if len(set(self.group_by)) != len(self.group_by):
            raise DomainError("group_by attributes must be distinct")
        if self.window is not None:
            a, b = self.window
            if a < 0 or b <= a:
                raise DomainError("window must satisfy 0 <= start < end")
            self.window = (int(a), int(b))

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PollQuery":
        known = {"metric", "group_by", "filter", "window"}
        extra = set(doc) - known
        if extra:
            raise DomainError(f"unknown query fields: {sorted(extra)}")
        if "metric" not in doc:
            raise DomainError("query must name a metric")
        window = doc.get("window")
        return cls(
            metric=doc["metric"],
            group_by=list(doc.get("group_by", [])),
            filter=dict(doc.get("filter", {})),
            window=tuple(window) if window is not None else None,
        )


@dataclass
class PollTable:
    metric: str
    group_by: List[str]
    rows: List[Dict[str, object]]

    def to_frame(self) -> pd.DataFrame:
        cols = list(self.group_by) + ["count", "value"]
        return pd.DataFrame(self.rows, columns=cols)

    def lowest(self) -> Optional[Dict[str, object]]:
        """Row with the smallest value; first in group order breaks ties."""
        best = None
        for row in self.rows:
            if best is None or row["value"] < best["value"]:
                best = row
        return best

    def write(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)


def _income_value(label: str) -> float:
    s = str(label).strip().lower().replace("$", "").replace(",", "")
    try:
        return float(s)
    except ValueError:
        pass
    if s.endswith("plus"):
        try:
            return float(s[:-4])
        except ValueError:
            pass
    if "t" in s:
        lo, _, hi = s.partition("t")
        try:
            return (float(lo) + float(hi)) / 2.0
        except ValueError:
            pass
    raise DomainError(f"income band label {label!r} has no numeric value")


def _lower_median(values: np.ndarray) -> float:
    ordered = np.sort(np.asarray(values, dtype=float))
    return float(ordered[(ordered.size - 1) // 2])


def _filter_mask(pop: Population, flt: Mapping[str, FilterValue]) -> np.ndarray:
    mask = np.ones(pop.n, dtype=bool)
    for axis, sel in flt.items():
        labels = [sel] if isinstance(sel, str) else list(sel)
        bins = pop.bins[axis]
        for lab in labels:
            if lab not in bins:
                raise DomainError(f"unknown {axis} label {lab!r}")
        codes = [bins.index(lab) for lab in labels]
        mask &= np.isin(getattr(pop, axis), codes)
    return mask


def _window_slice(series: np.ndarray, window: Optional[Tuple[int, int]]):
    if window is None:
        return series
    a, b = window
    if a >= series.size:
        raise DomainError(f"window start {a} beyond horizon {series.size}")
    return series[a:b]


def _unemployment_value(traj: Trajectory,
                        window: Optional[Tuple[int, int]]) -> float:
    if traj.month.size == 0:
        raise DomainError("trajectory has no monthly observations")
    if window is None:
        return float(traj.unemployment_rate.mean())
    a, b = window
    keep = (traj.month * MONTH_STEPS >= a) & (traj.month * MONTH_STEPS < b)
    if not keep.any():
        raise DomainError("window selects no monthly observations")
    return float(traj.unemployment_rate[keep].mean())


def poll(pop: Population, traj: Trajectory, query: PollQuery) -> PollTable:
    """Grouped metric table over the polled population and its trajectory.

    Agent-state metrics (median_income, mean_willingness, isolation_rate,
    infection_rate) aggregate per-agent end-of-run state and support
    group_by/filter; for those a window is only meaningful without grouping,
    where the trajectory series is used instead (isolation_rate mean,
    infection_rate as cumulative cases over the window divided by N).
    unemployment_rate is population-level: no grouping, window selects months.
    Aggregations depend only on group membership, so row order of the
    population never changes the result.
    """
    metric = query.metric
    grouped = bool(query.group_by) or bool(query.filter)
    if metric == "unemployment_rate":
        if grouped:
            raise DomainError(
                "unemployment_rate is population-level; group_by/filter "
                "do not apply"
            )
        value = _unemployment_value(traj, query.window)
        return PollTable(metric, [], [{"count": pop.n, "value": value}])

    if query.window is not None:
        if grouped:
            raise DomainError(
                f"metric {metric!r} with a window cannot be grouped: the "
                "trajectory carries no per-group series"
            )
        if metric == "isolation_rate":
            sel = _window_slice(traj.isolation_rate, query.window)
            value = float(sel.mean()) if sel.size else 0.0
        elif metric == "infection_rate":
            sel = _window_slice(traj.new_infections, query.window)
            value = float(sel.sum()) / (pop.n * traj.scale)
        else:
            raise DomainError(
                f"metric {metric!r} has no time series; window not supported"
            )
        return PollTable(metric, [], [{"count": pop.n, "value": value}])

    if metric == "median_income":
        labels = pop.bins["income_band"]
        table = np.array([_income_value(lab) for lab in labels])
        per_agent = table[pop.income_band]
        reduce = _lower_median
    elif metric == "mean_willingness":
        per_agent = np.asarray(pop.willingness, dtype=float)
        reduce = lambda v: float(np.mean(v))
    elif metric == "isolation_rate":
        per_agent = pop.isolation_flag.astype(float)
        reduce = lambda v: float(np.mean(v))
    elif metric == "infection_rate":
        per_agent = (pop.disease_stage != Stage.S).astype(float)
        reduce = lambda v: float(np.mean(v))
    else:  # pragma: no cover - POLL_METRICS is closed above
        raise DomainError(f"unknown metric {metric!r}")

    mask = _filter_mask(pop, query.filter)
    rows: List[Dict[str, object]] = []
    if not query.group_by:
        if mask.any():
            rows.append({"count": int(mask.sum()),
                         "value": reduce(per_agent[mask])})
        return PollTable(metric, [], rows)

    axes_bins = [pop.bins[a] for a in query.group_by]
    codes = [getattr(pop, a) for a in query.group_by]
    for combo in itertools.product(*(range(len(b)) for b in axes_bins)):
        group = mask.copy()
        for code_arr, want in zip(codes, combo):
            group &= code_arr == want
        if not group.any():
            continue
        row: Dict[str, object] = {
            axis: axes_bins[i][combo[i]]
            for i, axis in enumerate(query.group_by)
        }
        row["count"] = int(group.sum())
        row["value"] = reduce(per_agent[group])
        rows.append(row)
    return PollTable(metric, list(query.group_by), rows)


# -- counterfactual ----------------------------------------------------------

_DELTA_SERIES = ("new_infections", "active_infections", "deaths",
                 "isolation_rate")
_CUMULATIVE_SERIES = ("new_infections", "deaths")


@dataclass
class SeriesDelta:
    name: str
    mean: np.ndarray
    min: np.ndarray
    max: np.ndarray


@dataclass
class CounterfactualReport:
    baseline_hash: str
    patched_hash: str
    seeds: List[int]
    deltas: Dict[str, SeriesDelta]
    baseline_peaks: List[Tuple[float, int]]
    patched_peaks: List[Tuple[float, int]]
    cumulative: Dict[str, Dict[str, float]]
    identical: bool

    def to_dict(self) -> Dict[str, object]:
        return {
            "baseline_hash": self.baseline_hash,
            "patched_hash": self.patched_hash,
            "seeds": list(self.seeds),
            "identical": self.identical,
            "peaks": {
                "baseline": [{"height": h, "step": s}
                             for h, s in self.baseline_peaks],
                "patched": [{"height": h, "step": s}
                            for h, s in self.patched_peaks],
            },
            "cumulative_deltas": self.cumulative,
            "per_step_deltas": {
                name: {
                    "mean": d.mean.tolist(),
                    "min": d.min.tolist(),
                    "max": d.max.tolist(),
                }
                for name, d in self.deltas.items()
            },
        }

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        cols: Dict[str, np.ndarray] = {}
        for name, d in self.deltas.items():
            cols[f"{name}_delta_mean"] = d.mean
            cols[f"{name}_delta_min"] = d.min
            cols[f"{name}_delta_max"] = d.max
        frame = pd.DataFrame(cols)
        frame.insert(0, "step", np.arange(len(frame)))
        frame.to_csv(os.path.join(out_dir, "deltas.csv"), index=False)


def counterfactual(config: RunConfig, patch: Mapping[str, object],
                   n_seeds: int, base_seed: Optional[int] = None,
                   ) -> CounterfactualReport:
    """Paired baseline-vs-patched comparison under common random numbers.

    Both configs run the same seed list; per-run dynamic draws are keyed by
    the run seed alone, so an identity patch reproduces the baseline bitwise
    and any differences are attributable to the patch.
    """
    if n_seeds < 1:
        raise DomainError("n_seeds must be >= 1")
    patched = apply_patch(config, patch)
    start = config.execution.seed if base_seed is None else int(base_seed)
    seeds = [start + i for i in range(n_seeds)]

    sim_base = Simulation(config)
    sim_pat = Simulation(patched)
    base_runs = [sim_base.run(seed=s) for s in seeds]
    pat_runs = [sim_pat.run(seed=s) for s in seeds]

    deltas: Dict[str, SeriesDelta] = {}
    identical = True
    for name in _DELTA_SERIES:
        stack = np.stack([
            getattr(tp, name) - getattr(tb, name)
            for tb, tp in zip(base_runs, pat_runs)
        ])
        identical = identical and bool((stack == 0).all())
        deltas[name] = SeriesDelta(
            name=name,
            mean=stack.mean(axis=0),
            min=stack.min(axis=0),
            max=stack.max(axis=0),
        )
    identical = identical and all(
        np.array_equal(tb.unemployment_rate, tp.unemployment_rate)
        for tb, tp in zip(base_runs, pat_runs)
    )

    def peak(traj: Trajectory) -> Tuple[float, int]:
        if traj.active_infections.size == 0:
            return (0.0, -1)
        i = int(np.argmax(traj.active_infections))
        return (float(traj.active_infections[i]), i)

    cumulative = {}
    for name in _CUMULATIVE_SERIES:
        per_seed = np.array([
            getattr(tp, name).sum() - getattr(tb, name).sum()
            for tb, tp in zip(base_runs, pat_runs)
        ])
        cumulative[name] = {
            "mean": float(per_seed.mean()),
            "min": float(per_seed.min()),
            "max": float(per_seed.max()),
        }

    return CounterfactualReport(
        baseline_hash=sim_base.hash,
        patched_hash=sim_pat.hash,
        seeds=seeds,
        deltas=deltas,
        baseline_peaks=[peak(t) for t in base_runs],
        patched_peaks=[peak(t) for t in pat_runs],
        cumulative=cumulative,
        identical=identical,
    )


# -- prospective sweep -------------------------------------------------------

_PROTOCOL_FIELDS = tuple(f.name for f in dataclasses.fields(VaccineProtocol))


@dataclass
class FitnessCurve:
    field: str
    grid: List[float]
    fitness: List[Optional[float]]
    flagged: List[bool]
    threshold: Optional[float]
    n_seeds: int
    mode: str

    def to_dict(self) -> Dict[str, object]:
        return {
            "field": self.field,
            "grid": list(self.grid),
            "fitness": list(self.fitness),
            "flagged": list(self.flagged),
            "threshold": self.threshold,
            "n_seeds": self.n_seeds,
            "mode": self.mode,
        }

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        pd.DataFrame({
            self.field: self.grid,
            "fitness": [np.nan if f is None else f for f in self.fitness],
            "flagged": self.flagged,
        }).to_csv(os.path.join(out_dir, "fitness.csv"), index=False)


def _config_with_protocol(config: RunConfig,
                          protocol: Mapping[str, object]) -> RunConfig:
    doc = config.normalized()
    vac = dict(doc["vaccine"])
    for key in protocol:
        if key != "enabled" and key not in _PROTOCOL_FIELDS:
            raise DomainError(f"unknown vaccine protocol field {key!r}")
    vac.update(protocol)
    vac["enabled"] = True
    doc["vaccine"] = vac
    return validate_config(doc)


def prospective_sweep(
    config: RunConfig,
    protocol_a: Mapping[str, object],
    protocol_b: Mapping[str, object],
    sweep: Mapping[str, object],
    n_seeds: int = 1,
    base_seed: Optional[int] = None,
    max_workers: Optional[int] = None,
) -> FitnessCurve:
    """Fitness = deaths(P2)/deaths(P1) over a grid of one protocol field.

    Each grid value overwrites the field in both protocols; the pair runs on
    the same seed list. A grid point with zero baseline deaths in any paired
    run is flagged (fitness undefined) and the sweep continues. The threshold
    is the smallest grid value whose fitness is below 1. Grid points run
    concurrently; assembly follows grid order, so the output is deterministic.
    """
    if "field" not in sweep or "grid" not in sweep:
        raise DomainError("sweep must provide 'field' and 'grid'")
    fld = str(sweep["field"])
    if fld not in _PROTOCOL_FIELDS:
        raise DomainError(f"unknown vaccine protocol field {fld!r}")
    grid = [float(v) for v in sweep["grid"]]
    if not grid:
        raise DomainError("sweep grid must be nonempty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise DomainError("sweep grid must be strictly increasing")
    if n_seeds < 1:
        raise DomainError("n_seeds must be >= 1")

    start = config.execution.seed if base_seed is None else int(base_seed)
    mean_field = config.execution.mode == "mean-field"
    seeds = [start] if mean_field else [start + i for i in range(n_seeds)]

    def integer_field(name: str, value: float) -> object:
        return int(value) if name in ("dose_gap", "daily_supply") else value

    def run_point(value: float) -> Tuple[Optional[float], bool]:
        pa = dict(protocol_a)
        pb = dict(protocol_b)
        pa[fld] = integer_field(fld, value)
        pb[fld] = integer_field(fld, value)
        cfg_a = _config_with_protocol(config, pa)
        cfg_b = _config_with_protocol(config, pb)
        sim_a = Simulation(cfg_a)
        sim_b = Simulation(cfg_b)
        ratios = []
        for s in seeds:
            deaths_a = float(sim_a.run(seed=s).deaths.sum())
            if sim_a.hash == sim_b.hash:
                # identical protocols: reuse the run, ratio is exactly 1
                deaths_b = deaths_a
            else:
                deaths_b = float(sim_b.run(seed=s).deaths.sum())
            if deaths_a == 0.0:
                return (None, True)
            ratios.append(deaths_b / deaths_a)
        return (float(np.mean(ratios)), False)

    workers = max_workers or min(8, len(grid))
    if workers > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_point, grid))
    else:
        results = [run_point(v) for v in grid]

    fitness = [r[0] for r in results]
    flagged = [r[1] for r in results]
    threshold = None
    for value, fit in zip(grid, fitness):
        if fit is not None and fit < 1.0:
            threshold = value
            break
    return FitnessCurve(
        field=fld,
        grid=grid,
        fitness=fitness,
        flagged=flagged,
        threshold=threshold,
        n_seeds=1 if mean_field else n_seeds,
        mode=config.execution.mode,
    )
