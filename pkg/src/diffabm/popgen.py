"""Synthetic population synthesis and layered contact networks.

A joint attribute table is fitted to marginal tables by iterative
proportional fitting, agents are sampled i.i.d. from the fitted joint and
grouped into households within boroughs, and three contact layers are built
on top: household cliques plus occupation-stratified and borough-stratified
random graphs for workplace and mobility contacts.
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import ConvergenceError, DomainError, InfeasibleError, SchemaError
from .rng import Channel, RngStream

STATIC_AXES = ("age_band", "gender", "borough", "income_band", "occupation")
CSV_COLUMNS = ("agent_id",) + STATIC_AXES + ("household_id",)


class Stage(IntEnum):
    S = 0
    E = 1
    I = 2
    R = 3
    M = 4


@dataclass
class MarginalTable:
    axis: str
    bins: List[str]
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if len(self.bins) != self.counts.size:
            raise DomainError(f"marginal {self.axis!r}: bins/counts length mismatch")
        if len(set(self.bins)) != len(self.bins):
            raise DomainError(f"marginal {self.axis!r}: duplicate bin labels")
        if np.any(self.counts < 0):
            raise DomainError(f"marginal {self.axis!r}: negative count")
        if self.counts.sum() <= 0:
            raise DomainError(f"marginal {self.axis!r}: total must be positive")


@dataclass
class JointTable:
    axes: List[str]
    bins: Dict[str, List[str]]
    cells: np.ndarray

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=float)
        expected = tuple(len(self.bins[a]) for a in self.axes)
        if self.cells.shape != expected:
            raise DomainError(
                f"joint cells shape {self.cells.shape} != bins shape {expected}"
            )
        if np.any(self.cells < 0):
            raise DomainError("joint cells must be nonnegative")

    def marginal(self, axis: str) -> np.ndarray:
        i = self.axes.index(axis)
        other = tuple(j for j in range(self.cells.ndim) if j != i)
        return self.cells.sum(axis=other)


def ipf_fit(
    seed: JointTable,
    marginals: Sequence[MarginalTable],
    tol: float = 1e-8,
    max_iter: int = 1000,
    residual_history: Optional[List[float]] = None,
) -> JointTable:
    """Fit ``seed`` to the marginals by alternating proportional rescaling.

    The residual is the L-inf distance between normalized fitted and target
    marginals, maximized over axes; it is checked after every full sweep.
    Zero seed cells stay zero (multiplicative updates).
    """
    by_axis = {m.axis: m for m in marginals}
    for axis in seed.axes:
        if axis not in by_axis:
            raise DomainError(f"missing marginal for axis {axis!r}")
        if by_axis[axis].bins != seed.bins[axis]:
            raise DomainError(f"marginal {axis!r}: bin labels disagree with joint")

    totals = np.array([by_axis[a].counts.sum() for a in seed.axes])
    mean_total = totals.mean()
    rel_spread = (totals.max() - totals.min()) / mean_total
    targets = {}
    for a in seed.axes:
        t = by_axis[a].counts.astype(float)
        if rel_spread > 1e-6:
            t = t * (mean_total / t.sum())
        targets[a] = t
    if rel_spread > 1e-6:
        _warnings.warn(
            f"marginal totals differ by {rel_spread:.3g} relative; rescaled to mean",
            stacklevel=2,
        )

    cells = seed.cells.astype(float).copy()
    for i, a in enumerate(seed.axes):
        other = tuple(j for j in range(cells.ndim) if j != i)
        current = cells.sum(axis=other)
        if np.any((current == 0) & (targets[a] > 0)):
            bad = seed.bins[a][int(np.argmax((current == 0) & (targets[a] > 0)))]
            raise InfeasibleError(
                f"axis {a!r} bin {bad!r}: target positive but seed slice is all zero"
            )

    def residual(c: np.ndarray) -> float:
        total = c.sum()
        worst = 0.0
        for i, a in enumerate(seed.axes):
            other = tuple(j for j in range(c.ndim) if j != i)
            got = c.sum(axis=other) / total
            want = targets[a] / targets[a].sum()
            worst = max(worst, float(np.max(np.abs(got - want))))
        return worst

    res = residual(cells)
    if residual_history is not None:
        residual_history.append(res)
    for _ in range(max_iter):
        if res <= tol:
            return JointTable(list(seed.axes), dict(seed.bins), cells)
        for i, a in enumerate(seed.axes):
            other = tuple(j for j in range(cells.ndim) if j != i)
            current = cells.sum(axis=other)
            factor = np.divide(
                targets[a], current, out=np.zeros_like(current), where=current > 0
            )
            shape = [1] * cells.ndim
            shape[i] = -1
            cells = cells * factor.reshape(shape)
        res = residual(cells)
        if residual_history is not None:
            residual_history.append(res)
    if res <= tol:
        return JointTable(list(seed.axes), dict(seed.bins), cells)
    raise ConvergenceError(
        f"IPF residual {res:.3e} above tol {tol:.1e} after {max_iter} sweeps",
        residual=res,
    )


@dataclass
class Population:
    """Structure-of-arrays agent state; static attributes are codes into bins."""

    age_band: np.ndarray
    gender: np.ndarray
    borough: np.ndarray
    income_band: np.ndarray
    occupation: np.ndarray
    household_id: np.ndarray
    bins: Dict[str, List[str]]
    disease_stage: np.ndarray = field(default=None)
    stage_timer: np.ndarray = field(default=None)
    doses_received: np.ndarray = field(default=None)
    last_dose_step: np.ndarray = field(default=None)
    employed_flag: np.ndarray = field(default=None)
    willingness: np.ndarray = field(default=None)
    isolation_flag: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.age_band.shape[0]
        for axis in STATIC_AXES:
            arr = getattr(self, axis)
            if arr.shape != (n,):
                raise DomainError(f"population array {axis!r} has wrong length")
        if self.household_id.shape != (n,):
            raise DomainError("household_id has wrong length")
        if self.disease_stage is None:
            self.disease_stage = np.zeros(n, dtype=np.int8)
        if self.stage_timer is None:
            self.stage_timer = np.zeros(n, dtype=np.int32)
        if self.doses_received is None:
            self.doses_received = np.zeros(n, dtype=np.int8)
        if self.last_dose_step is None:
            self.last_dose_step = np.full(n, -1, dtype=np.int32)
        if self.employed_flag is None:
            self.employed_flag = np.ones(n, dtype=bool)
        if self.willingness is None:
            self.willingness = np.ones(n, dtype=float)
        if self.isolation_flag is None:
            self.isolation_flag = np.zeros(n, dtype=bool)

    @property
    def n(self) -> int:
        return self.age_band.shape[0]

    @property
    def agent_ids(self) -> np.ndarray:
        return np.arange(self.n)

    def labels(self, axis: str) -> np.ndarray:
        codes = getattr(self, axis)
        return np.asarray(self.bins[axis], dtype=object)[codes]

    def stage_counts(self) -> np.ndarray:
        return np.bincount(self.disease_stage, minlength=5)

    def copy(self) -> "Population":
        return Population(
            age_band=self.age_band.copy(),
            gender=self.gender.copy(),
            borough=self.borough.copy(),
            income_band=self.income_band.copy(),
            occupation=self.occupation.copy(),
            household_id=self.household_id.copy(),
            bins={k: list(v) for k, v in self.bins.items()},
            disease_stage=self.disease_stage.copy(),
            stage_timer=self.stage_timer.copy(),
            doses_received=self.doses_received.copy(),
            last_dose_step=self.last_dose_step.copy(),
            employed_flag=self.employed_flag.copy(),
            willingness=self.willingness.copy(),
            isolation_flag=self.isolation_flag.copy(),
        )


def sample_population(
    joint: JointTable,
    n: int,
    household_size_dist: Mapping[int, float],
    rng: RngStream,
) -> Population:
    """Draw ``n`` agents i.i.d. from the joint and group them into households.

    Agents are ordered by borough and filled into households sequentially, so
    household members are adjacent and share a borough; the last household in
    a borough may be truncated below its drawn size.
    """
    if n < 1:
        raise DomainError("population size must be >= 1")
    flat = joint.cells.ravel()
    total = flat.sum()
    if total <= 0:
        raise DomainError("joint table is empty")
    probs = flat / total

    gen = rng._generator()
    cell_ids = gen.choice(flat.size, size=n, p=probs)
    coords = np.unravel_index(cell_ids, joint.cells.shape)
    codes = {axis: coords[i].astype(np.int32) for i, axis in enumerate(joint.axes)}
    for axis in STATIC_AXES:
        if axis not in codes:
            codes[axis] = np.zeros(n, dtype=np.int32)

    bins = {axis: list(joint.bins.get(axis, ["all"])) for axis in STATIC_AXES}

    order = np.argsort(codes["borough"], kind="stable")
    for axis in STATIC_AXES:
        codes[axis] = codes[axis][order]

    sizes = np.array(sorted(household_size_dist), dtype=int)
    if np.any(sizes < 1):
        raise DomainError("household sizes must be >= 1")
    size_probs = np.array([household_size_dist[s] for s in sizes], dtype=float)
    size_probs = size_probs / size_probs.sum()

    household_id = np.empty(n, dtype=np.int64)
    next_hh = 0
    boroughs, starts = np.unique(codes["borough"], return_index=True)
    bounds = list(starts) + [n]
    for b in range(len(boroughs)):
        lo, hi = bounds[b], bounds[b + 1]
        m = hi - lo
        draws = gen.choice(sizes, size=m, p=size_probs)  # at most m households
        ends = np.minimum(np.cumsum(draws), m)
        n_hh = int(np.searchsorted(ends, m) + 1) if ends[-1] >= m else m
        counts = np.diff(np.concatenate([[0], ends[:n_hh]]))
        household_id[lo:hi] = next_hh + np.repeat(np.arange(n_hh), counts)
        next_hh += n_hh

    return Population(
        age_band=codes["age_band"],
        gender=codes["gender"],
        borough=codes["borough"],
        income_band=codes["income_band"],
        occupation=codes["occupation"],
        household_id=household_id,
        bins=bins,
    )


@dataclass
class GraphConfig:
    workplace_mean_degree: float = 5.0
    mobility_mean_degree: float = 5.0
    layer_weights: Dict[str, float] = field(
        default_factory=lambda: {"household": 1.0, "workplace": 1.0, "mobility": 1.0}
    )


@dataclass
class ContactGraph:
    layers: Dict[str, sp.csr_matrix]
    layer_weights: Dict[str, float]
    warnings: List[str] = field(default_factory=list)
    _combined: Optional[sp.csr_matrix] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return next(iter(self.layers.values())).shape[0]

    def degree(self, layer: str) -> np.ndarray:
        m = self.layers[layer]
        return np.diff(m.indptr)

    def combined(self) -> sp.csr_matrix:
        """Weighted sum of layers, cached; the exposure kernel's adjacency."""
        if self._combined is None:
            total = None
            for name, m in self.layers.items():
                term = m * self.layer_weights.get(name, 1.0)
                total = term if total is None else total + term
            self._combined = total.tocsr()
        return self._combined

    def weighted_degree(self) -> np.ndarray:
        return np.asarray(self.combined().sum(axis=1)).ravel()


def _pairs_to_symmetric(n: int, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
    if rows.size == 0:
        return sp.csr_matrix((n, n))
    r = np.concatenate([rows, cols])
    c = np.concatenate([cols, rows])
    data = np.ones(r.size, dtype=float)
    return sp.csr_matrix((data, (r, c)), shape=(n, n))


def _household_edges(household_id: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """All within-household pairs; members are contiguous by construction."""
    n = household_id.shape[0]
    change = np.flatnonzero(np.diff(household_id)) + 1
    starts = np.concatenate([[0], change])
    sizes = np.diff(np.concatenate([starts, [n]]))
    rows, cols = [], []
    for s in np.unique(sizes):
        if s < 2:
            continue
        hh_starts = starts[sizes == s]
        i_local, j_local = np.triu_indices(s, k=1)
        rows.append((hh_starts[:, None] + i_local[None, :]).ravel())
        cols.append((hh_starts[:, None] + j_local[None, :]).ravel())
    if not rows:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    return np.concatenate(rows), np.concatenate(cols)


def _stratified_er_edges(
    group_codes: np.ndarray,
    mean_degree: float,
    gen: np.random.Generator,
    layer: str,
    warn: List[str],
) -> Tuple[np.ndarray, np.ndarray]:
    """Distinct random pairs within each group at the requested mean degree."""
    n = group_codes.shape[0]
    if mean_degree <= 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    order = np.argsort(group_codes, kind="stable")
    sorted_codes = group_codes[order]
    starts = np.concatenate(
        [[0], np.flatnonzero(np.diff(sorted_codes)) + 1, [n]]
    )
    all_rows, all_cols = [], []
    for g in range(len(starts) - 1):
        members = order[starts[g] : starts[g + 1]]
        m = members.size
        if m < 2:
            continue
        d = mean_degree
        if d > m - 1:
            warn.append(f"{layer}: degree {d} clamped to {m - 1} for group size {m}")
            d = float(m - 1)
        target = int(round(m * d / 2.0))
        max_pairs = m * (m - 1) // 2
        target = min(target, max_pairs)
        if target == 0:
            continue
        seen = np.empty(0, dtype=np.int64)
        for _ in range(50):
            need = target - seen.size
            if need <= 0:
                break
            a = gen.integers(0, m, size=int(need * 1.4) + 8)
            b = gen.integers(0, m, size=a.size)
            keep = a != b
            a, b = a[keep], b[keep]
            lo = np.minimum(a, b).astype(np.int64)
            hi = np.maximum(a, b).astype(np.int64)
            seen = np.unique(np.concatenate([seen, lo * m + hi]))
        seen = seen[:target]
        all_rows.append(members[seen // m])
        all_cols.append(members[seen % m])
    if not all_rows:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    return np.concatenate(all_rows), np.concatenate(all_cols)


def build_contact_graph(
    pop: Population, cfg: GraphConfig, rng: RngStream
) -> ContactGraph:
    """Household cliques + occupation/borough stratified random layers."""
    n = pop.n
    warn: List[str] = []
    hr, hc = _household_edges(pop.household_id)
    layers = {"household": _pairs_to_symmetric(n, hr, hc)}

    wgen = rng.at(0)._generator()
    wr, wc = _stratified_er_edges(
        pop.occupation, cfg.workplace_mean_degree, wgen, "workplace", warn
    )
    layers["workplace"] = _pairs_to_symmetric(n, wr, wc)

    mgen = rng.at(1)._generator()
    mr, mc = _stratified_er_edges(
        pop.borough, cfg.mobility_mean_degree, mgen, "mobility", warn
    )
    layers["mobility"] = _pairs_to_symmetric(n, mr, mc)

    for name, m in layers.items():
        if m.diagonal().sum() != 0:
            raise DomainError(f"{name} layer has self-loops")
    return ContactGraph(layers=layers, layer_weights=dict(cfg.layer_weights), warnings=warn)


def write_population_csv(pop: Population, path: str) -> None:
    frame = pd.DataFrame({"agent_id": np.arange(pop.n)})
    for axis in STATIC_AXES:
        frame[axis] = pop.labels(axis)
    frame["household_id"] = pop.household_id
    frame.to_csv(path, index=False)


def read_population_csv(path: str) -> Population:
    frame = pd.read_csv(path, dtype={axis: str for axis in STATIC_AXES})
    for col in CSV_COLUMNS:
        if col not in frame.columns:
            raise SchemaError(f"population file missing column {col!r}")
    if frame.shape[0] == 0:
        raise SchemaError("population file has no rows")
    ids = frame["agent_id"].to_numpy()
    if not np.array_equal(ids, np.arange(len(ids))):
        raise SchemaError("agent_id must be 0..N-1 in order")
    bins: Dict[str, List[str]] = {}
    codes: Dict[str, np.ndarray] = {}
    for axis in STATIC_AXES:
        values = frame[axis].astype(str).to_numpy()
        labels = sorted(set(values))
        lookup = {v: i for i, v in enumerate(labels)}
        bins[axis] = labels
        codes[axis] = np.array([lookup[v] for v in values], dtype=np.int32)
    household = frame["household_id"].to_numpy(dtype=np.int64)
    return Population(
        age_band=codes["age_band"],
        gender=codes["gender"],
        borough=codes["borough"],
        income_band=codes["income_band"],
        occupation=codes["occupation"],
        household_id=household,
        bins=bins,
    )
