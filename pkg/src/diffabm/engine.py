"""Simulation engine: step composition, trajectories, aggregation, patching.

A run composes, in fixed order per step: context construction, behavior
sampling (isolation daily, work on 30-step month boundaries), isolation
masking, exposure, SEIRM progression, vaccination, testing, stimulus, and
aggregate recording. All state reads within a step are synchronous (state at
t). Population and graph structure are keyed by the config seed; dynamic
draws are keyed by the run seed, which is what common-random-number pairing
varies.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import tape as T
from .behavior import (
    ACTIONS,
    ArchetypeKey,
    BinningScheme,
    ContextBin,
    PromptTemplate,
    context_from_series,
    default_template,
    estimate_archetype_probs,
    population_keys,
    sample_actions,
)
from .config import RunConfig, config_hash
from .config import apply_patch as apply_patch  # re-export; engine-level op
from .epi import (
    EpiParams,
    MeanFieldDisease,
    PendingResult,
    StimulusEvent,
    StimulusSchedule,
    TestProtocol,
    VaccineProtocol,
    apply_isolation,
    beta_from_r0,
    draw_dropout_mask,
    efficacy_in_force,
    exposure_probabilities,
    exposure_step,
    seed_initial_infections,
    seirm_progress,
    stimulus_step,
    susceptibility_vector,
    testing_step,
    vaccination_step,
)
from .errors import DiffAbmError, DomainError
from .labor import month_claims, unemployment_rate, willingness_step
from .popgen import (
    STATIC_AXES,
    ContactGraph,
    GraphConfig,
    JointTable,
    MarginalTable,
    Population,
    Stage,
    build_contact_graph,
    ipf_fit,
    read_population_csv,
    sample_population,
)
from .providers import Provider, make_provider
from .rng import Channel, stream
from .stochastic import bernoulli_st
from .tape import ArrayLike, value_of

MONTH_STEPS = 30
WEEK_STEPS = 7

_DEFAULT_MARGINALS = {
    "age_band": (["0t19", "20t39", "40t64", "65plus"], [0.22, 0.30, 0.30, 0.18]),
    "gender": (["female", "male"], [0.52, 0.48]),
    "borough": (
        ["bronx", "brooklyn", "manhattan", "queens", "staten_island"],
        [0.17, 0.31, 0.19, 0.27, 0.06],
    ),
    "income_band": (
        ["0t30000", "30000t60000", "60000t100000", "100000plus"],
        [0.25, 0.30, 0.25, 0.20],
    ),
    "occupation": (
        ["education", "healthcare", "retail", "remote", "service"],
        [0.20, 0.20, 0.20, 0.20, 0.20],
    ),
}


def _series_len(series) -> int:
    if isinstance(series, (list, tuple)):
        return len(series)
    return int(np.size(value_of(series)))


def default_marginals(n: int) -> List[MarginalTable]:
    out = []
    for axis in STATIC_AXES:
        bins, weights = _DEFAULT_MARGINALS[axis]
        counts = np.asarray(weights) * n
        out.append(MarginalTable(axis=axis, bins=list(bins), counts=counts))
    return out


def build_population(config: RunConfig) -> Population:
    """Population from CSV if given, else IPF over marginals + sampling."""
    pcfg = config.population
    if pcfg.csv is not None:
        return read_population_csv(pcfg.csv)
    if pcfg.marginals is not None:
        marginals = [
            MarginalTable(axis=m.axis, bins=list(m.bins), counts=np.asarray(m.counts))
            for m in pcfg.marginals
        ]
    else:
        marginals = default_marginals(pcfg.n)
    axes = [m.axis for m in marginals]
    for axis in axes:
        if axis not in STATIC_AXES:
            raise DomainError(f"unknown marginal axis {axis!r}")
    bins = {m.axis: list(m.bins) for m in marginals}
    shape = tuple(len(m.bins) for m in marginals)
    seed_table = JointTable(axes=axes, bins=bins, cells=np.ones(shape))
    joint = ipf_fit(seed_table, marginals)
    hh = {int(k): v for k, v in pcfg.household_size_dist.items()}
    rng = stream(config.execution.seed, Channel.POPGEN)
    return sample_population(joint, pcfg.n, hh, rng)


def _per_band(values, bands: List[str], name: str) -> np.ndarray:
    if isinstance(values, (int, float)):
        return np.full(len(bands), float(values))
    arr = np.asarray(values, dtype=float)
    if arr.size != len(bands):
        raise DomainError(
            f"{name} has {arr.size} entries for {len(bands)} age bands"
        )
    return arr


def build_epi_params(config: RunConfig, pop: Population) -> EpiParams:
    e = config.epi
    bands = pop.bins["age_band"]
    beta = e.beta
    if beta is None:
        beta = float(value_of(beta_from_r0(e.r0, e.infectious_period, e.dt)))
    return EpiParams(
        beta=beta,
        susceptibility=_per_band(e.susceptibility, bands, "susceptibility"),
        mortality_prob=_per_band(e.mortality_prob, bands, "mortality_prob"),
        latent_period=e.latent_period,
        infectious_period=e.infectious_period,
        dt=e.dt,
    )


@dataclass
class Trajectory:
    """Per-step and per-month aggregate series with reproducibility metadata.

    Count series carry ``scale`` already applied (1 except when the per-agent
    mode sub-sampled the population). The taped_* fields hold tape handles in
    mean-field runs so losses can differentiate through the run.
    """

    new_exposures: np.ndarray
    new_infections: np.ndarray
    active_infections: np.ndarray
    deaths: np.ndarray
    isolation_rate: np.ndarray
    month: np.ndarray
    unemployment_rate: np.ndarray
    mean_willingness: np.ndarray
    seed: int
    config_hash: str
    mode: str
    scale: float = 1.0
    initial_stage_counts: Dict[str, float] = field(default_factory=dict)
    snapshots: Dict[int, Dict[str, float]] = field(default_factory=dict)
    taped_new_infections: Optional[List[ArrayLike]] = field(
        default=None, repr=False, compare=False
    )
    taped_unemployment: Optional[List[ArrayLike]] = field(
        default=None, repr=False, compare=False
    )
    taped_deaths_total: Optional[ArrayLike] = field(
        default=None, repr=False, compare=False
    )

    @property
    def horizon(self) -> int:
        return int(self.new_infections.size)

    def cumulative_deaths(self) -> float:
        return float(self.deaths.sum())

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        daily = pd.DataFrame(
            {
                "step": np.arange(self.horizon),
                "new_exposures": self.new_exposures,
                "new_infections": self.new_infections,
                "active_infections": self.active_infections,
                "deaths": self.deaths,
                "isolation_rate": self.isolation_rate,
            }
        )
        daily.to_csv(os.path.join(out_dir, "trajectory.csv"), index=False)
        monthly = pd.DataFrame(
            {
                "month": self.month,
                "unemployment_rate": self.unemployment_rate,
                "mean_willingness": self.mean_willingness,
            }
        )
        monthly.to_csv(os.path.join(out_dir, "monthly.csv"), index=False)
        meta = {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "mode": self.mode,
            "scale": self.scale,
            "horizon": self.horizon,
            "initial_stage_counts": self.initial_stage_counts,
            "snapshots": {str(k): v for k, v in self.snapshots.items()},
        }
        with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def read(cls, out_dir: str) -> "Trajectory":
        daily = pd.read_csv(os.path.join(out_dir, "trajectory.csv"))
        monthly = pd.read_csv(os.path.join(out_dir, "monthly.csv"))
        with open(os.path.join(out_dir, "meta.json"), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        return cls(
            new_exposures=daily["new_exposures"].to_numpy(dtype=float),
            new_infections=daily["new_infections"].to_numpy(dtype=float),
            active_infections=daily["active_infections"].to_numpy(dtype=float),
            deaths=daily["deaths"].to_numpy(dtype=float),
            isolation_rate=daily["isolation_rate"].to_numpy(dtype=float),
            month=monthly["month"].to_numpy(dtype=int),
            unemployment_rate=monthly["unemployment_rate"].to_numpy(dtype=float),
            mean_willingness=monthly["mean_willingness"].to_numpy(dtype=float),
            seed=int(meta["seed"]),
            config_hash=meta["config_hash"],
            mode=meta["mode"],
            scale=float(meta.get("scale", 1.0)),
            initial_stage_counts=meta.get("initial_stage_counts", {}),
            snapshots={int(k): v for k, v in meta.get("snapshots", {}).items()},
        )

    def to_dict(self) -> Dict[str, object]:
        """JSON-ready payload mirroring the on-disk artifact layout."""
        return {
            "trajectory": {
                "new_exposures": self.new_exposures.tolist(),
                "new_infections": self.new_infections.tolist(),
                "active_infections": self.active_infections.tolist(),
                "deaths": self.deaths.tolist(),
                "isolation_rate": self.isolation_rate.tolist(),
            },
            "monthly": {
                "month": self.month.tolist(),
                "unemployment_rate": self.unemployment_rate.tolist(),
                "mean_willingness": self.mean_willingness.tolist(),
            },
            "meta": {
                "seed": self.seed,
                "config_hash": self.config_hash,
                "mode": self.mode,
                "scale": self.scale,
                "horizon": self.horizon,
                "initial_stage_counts": self.initial_stage_counts,
                "snapshots": {str(k): v for k, v in self.snapshots.items()},
            },
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, object]) -> "Trajectory":
        daily = doc["trajectory"]
        monthly = doc["monthly"]
        meta = doc["meta"]
        return cls(
            new_exposures=np.asarray(daily["new_exposures"], dtype=float),
            new_infections=np.asarray(daily["new_infections"], dtype=float),
            active_infections=np.asarray(daily["active_infections"], dtype=float),
            deaths=np.asarray(daily["deaths"], dtype=float),
            isolation_rate=np.asarray(daily["isolation_rate"], dtype=float),
            month=np.asarray(monthly["month"], dtype=int),
            unemployment_rate=np.asarray(monthly["unemployment_rate"],
                                         dtype=float),
            mean_willingness=np.asarray(monthly["mean_willingness"],
                                        dtype=float),
            seed=int(meta["seed"]),
            config_hash=meta["config_hash"],
            mode=meta["mode"],
            scale=float(meta.get("scale", 1.0)),
            initial_stage_counts=meta.get("initial_stage_counts", {}),
            snapshots={int(k): v for k, v in meta.get("snapshots", {}).items()},
        )


def aggregate(traj: Trajectory, cadence: str) -> Dict[str, object]:
    """Resample: weekly/monthly sums for flows, window-last for levels/rates."""
    if cadence == "daily":
        return {
            "cadence": "daily",
            "new_exposures": traj.new_exposures.copy(),
            "new_infections": traj.new_infections.copy(),
            "deaths": traj.deaths.copy(),
            "active_infections": traj.active_infections.copy(),
            "isolation_rate": traj.isolation_rate.copy(),
            "partial_dropped": False,
        }
    if cadence == "weekly":
        window = WEEK_STEPS
    elif cadence == "monthly":
        window = MONTH_STEPS
    else:
        raise DomainError(f"unknown cadence {cadence!r}")
    horizon = traj.horizon
    full = horizon // window
    cut = full * window

    def sums(series):
        return series[:cut].reshape(full, window).sum(axis=1)

    def last(series):
        return series[:cut].reshape(full, window)[:, -1] if full else series[:0]

    return {
        "cadence": cadence,
        "new_exposures": sums(traj.new_exposures),
        "new_infections": sums(traj.new_infections),
        "deaths": sums(traj.deaths),
        "active_infections": last(traj.active_infections),
        "isolation_rate": last(traj.isolation_rate),
        "partial_dropped": cut != horizon,
    }


@dataclass
class SimState:
    pop: Population
    mf: Optional[MeanFieldDisease]
    forced_iso_until: np.ndarray
    pending: List[PendingResult]
    dropout_mask: Optional[np.ndarray]
    infection_hist: List[float]

    def stage_totals(self) -> Dict[str, float]:
        if self.mf is not None:
            occ = self.mf
            e_total = sum(float(np.sum(value_of(s))) for s in occ.e)
            i_total = sum(float(np.sum(value_of(s))) for s in occ.i)
            return {
                "S": float(np.sum(value_of(occ.s))),
                "E": e_total,
                "I": i_total,
                "R": float(np.sum(value_of(occ.r))),
                "M": float(np.sum(value_of(occ.m))),
            }
        counts = self.pop.stage_counts()
        return {name: float(counts[stage]) for name, stage in
                [("S", Stage.S), ("E", Stage.E), ("I", Stage.I),
                 ("R", Stage.R), ("M", Stage.M)]}


@dataclass
class _Handles:
    beta: ArrayLike
    r0_series: Optional[ArrayLike]
    gamma0: ArrayLike
    gamma1: ArrayLike
    iur_series: ArrayLike


class Simulation:
    """A configured simulator; ``run`` executes one seeded trajectory.

    Structural inputs (beta or an R0 series, gamma0, gamma1, the claims
    series) can be overridden per run with plain or taped values; in
    mean-field mode the recorded aggregates stay connected to the callers'
    tape for backward().
    """

    def __init__(self, config: RunConfig, provider: Optional[Provider] = None):
        if config.execution.horizon_steps < 0:
            raise DomainError("horizon must be >= 0")
        self.config = config
        self.hash = config_hash(config)
        self.mode = config.execution.mode
        self.provider = provider
        if provider is None and config.behavior.mode in ("archetype", "per-agent"):
            self.provider = make_provider(
                config.behavior.provider, seed=config.execution.seed
            )

        pop = build_population(config)
        self.scale = 1.0
        bcfg = config.behavior
        if bcfg.mode == "per-agent" and pop.n > bcfg.per_agent_cap:
            # sub-sample under the cap; count aggregates get rescaled back
            pick = stream(config.execution.seed, Channel.INIT, step=1).permutation(
                pop.n
            )[: bcfg.per_agent_cap]
            pick.sort()
            self.scale = pop.n / bcfg.per_agent_cap
            pop = _subset_population(pop, pick)
        self._pop0 = pop

        gcfg = GraphConfig(
            workplace_mean_degree=config.graph.workplace_mean_degree,
            mobility_mean_degree=config.graph.mobility_mean_degree,
            layer_weights=config.graph.layer_weights.model_dump(),
        )
        self.graph: ContactGraph = build_contact_graph(
            pop, gcfg, stream(config.execution.seed, Channel.GRAPH)
        )
        self.params = build_epi_params(config, pop)

        self.vaccine = (
            VaccineProtocol(
                dose_gap=config.vaccine.dose_gap,
                first_dose_efficacy=config.vaccine.first_dose_efficacy,
                second_dose_efficacy=config.vaccine.second_dose_efficacy,
                daily_supply=config.vaccine.daily_supply,
                second_dose_dropout=config.vaccine.second_dose_dropout,
            )
            if config.vaccine.enabled
            else None
        )
        self.testing = (
            TestProtocol(
                kind=config.testing.kind,
                specificity=config.testing.specificity,
                sensitivity=config.testing.sensitivity,
                result_delay=config.testing.result_delay,
            )
            if config.testing.enabled
            else None
        )
        self.schedule = StimulusSchedule(
            events=[
                StimulusEvent(
                    step=e.step,
                    adult_amount=e.adult_amount,
                    per_child_amount=e.per_child_amount,
                    eligible_income_bands=e.eligible_income_bands,
                )
                for e in config.stimulus.events
            ],
            child_age_bands=list(config.stimulus.child_age_bands),
        )
        self.binning = BinningScheme()
        self.duration_offset_months = bcfg.duration_offset_weeks // 4

        if bcfg.mode == "per-agent":
            self.attrs = tuple(STATIC_AXES)
        else:
            self.attrs = tuple(bcfg.archetype_attrs)
        if bcfg.mode in ("archetype", "per-agent"):
            self.keys, self.key_index = population_keys(pop, self.attrs)
            self.templates = _templates_for_attrs(pop, self.attrs)
        else:
            self.keys, self.key_index = [], np.zeros(pop.n, dtype=int)
            self.templates = None
        self.last_state: Optional[SimState] = None

    # -- per-run state -----------------------------------------------------

    def new_state(self, seed: int) -> SimState:
        pop = self._pop0.copy()
        seed_mask = seed_initial_infections(
            pop,
            self.config.epi.initial_infected_frac,
            stream(seed, Channel.INIT),
            self.params.infectious_period,
        )
        mf = None
        if self.mode == "mean-field":
            mort = self.params.mortality_prob[pop.age_band]
            mf = MeanFieldDisease(pop.n, self.params, seed_mask, mort)
        dropout = None
        if self.vaccine is not None:
            dropout = draw_dropout_mask(
                pop, self.vaccine, stream(seed, Channel.VACCINE)
            )
        return SimState(
            pop=pop,
            mf=mf,
            forced_iso_until=np.full(pop.n, -1, dtype=np.int64),
            pending=[],
            dropout_mask=dropout,
            infection_hist=[],
        )

    def _resolve_handles(self, beta, r0_series, gamma0, gamma1, iur) -> _Handles:
        e, lab = self.config.epi, self.config.labor
        horizon = self.config.execution.horizon_steps
        months = (horizon + MONTH_STEPS - 1) // MONTH_STEPS
        if r0_series is None and e.r0_series is not None:
            r0_series = np.asarray(e.r0_series, dtype=float)
        if r0_series is not None:
            if _series_len(r0_series) < horizon:
                raise DomainError("r0_series shorter than the horizon")
        if beta is None:
            beta = self.params.beta
        if gamma0 is None:
            gamma0 = lab.gamma0
        if gamma1 is None:
            gamma1 = lab.gamma1
        if iur is None:
            if lab.iur_series is not None:
                iur = np.asarray(lab.iur_series, dtype=float)
            else:
                iur = np.full(max(months, 1), 0.1)
        if _series_len(iur) < months:
            raise DomainError("iur_series does not cover the horizon's months")
        return _Handles(beta=beta, r0_series=r0_series, gamma0=gamma0,
                        gamma1=gamma1, iur_series=iur)

    def _beta_at(self, handles: _Handles, t: int) -> ArrayLike:
        series = handles.r0_series
        if series is None:
            return handles.beta
        if isinstance(series, (list, tuple)):
            r0_t = series[t]
        elif T.is_taped(series):
            r0_t = T.tsum(T.gather(series, np.array([t])))
        else:
            r0_t = float(np.asarray(series).ravel()[t])
        return beta_from_r0(
            r0_t, self.params.infectious_period, self.params.dt
        )

    # -- behavior ----------------------------------------------------------

    def _action_probs_or_draws(
        self, state: SimState, ctx: ContextBin, actions: Sequence[str],
        seed: int, t: int,
    ) -> Dict[str, np.ndarray]:
        bcfg = self.config.behavior
        pop = state.pop
        mean_field = self.mode == "mean-field"
        out: Dict[str, np.ndarray] = {}
        if bcfg.mode == "heuristic":
            fixed = {"isolate": bcfg.heuristic_isolate_p,
                     "work": self.config.labor.heuristic_work_p}
            for lane, action in enumerate(actions):
                p = np.full(pop.n, fixed[action])
                if mean_field:
                    out[action] = p
                else:
                    rng = stream(seed, Channel.BEHAVIOR, step=t, agent=lane)
                    out[action] = np.asarray(
                        bernoulli_st(p, rng, ids=pop.agent_ids)
                    )
            return out
        table = estimate_archetype_probs(
            self.provider, self.keys, ctx, actions, bcfg.m_samples,
            templates=self.templates,
        )
        for lane, action in enumerate(actions):
            rng = stream(seed, Channel.BEHAVIOR, step=t, agent=lane)
            out[action] = sample_actions(
                table, pop, ctx, action, rng,
                attrs=self.attrs, mean_field=mean_field,
            )
        return out

    # -- one composed step ---------------------------------------------------

    def step(self, state: SimState, t: int, handles: _Handles, seed: int) -> Dict:
        pop = state.pop
        n = pop.n
        mean_field = self.mode == "mean-field"
        bcfg = self.config.behavior

        # context from the trajectory so far (state at t)
        initial = ContextBin.from_raw(
            bcfg.initial_cases,
            bcfg.initial_change_pct,
            duration_months=self.duration_offset_months,
            payment=self.schedule.context_payment(0),
            step=0,
            binning=self.binning,
        )
        ctx = context_from_series(
            np.asarray(state.infection_hist, dtype=float),
            t,
            payment=self.schedule.context_payment(t),
            binning=self.binning,
            duration_offset_months=self.duration_offset_months,
            initial=initial,
        )

        month_boundary = t % MONTH_STEPS == 0
        actions = ["isolate"] + (["work"] if month_boundary else [])
        acts = self._action_probs_or_draws(state, ctx, actions, seed, t)

        iso = np.asarray(value_of(acts["isolate"]), dtype=float)
        forced = (state.forced_iso_until >= t).astype(float)
        iso_effective = np.maximum(iso, forced)
        if not mean_field:
            pop.isolation_flag = iso_effective > 0.5

        # exposure with behavior-masked infectiousness
        beta_t = self._beta_at(handles, t)
        efficacy = (
            efficacy_in_force(pop, self.vaccine)
            if self.vaccine is not None
            else np.zeros(n)
        )
        if mean_field:
            infectious = state.mf.infectious_mass()
            eff_inf = apply_isolation(infectious, iso_effective)
            susc = susceptibility_vector(self.params, pop.age_band)
            p_expose = exposure_probabilities(
                self.graph, self.params, beta_t, susc, eff_inf, efficacy
            )
            mf_out = state.mf.step(p_expose)
            new_e_mask = None
            newly_infectious = None
            step_new_exposures = T.tsum(mf_out["new_exposures"])
            step_new_infections = T.tsum(mf_out["new_infections"])
            step_active = T.tsum(mf_out["active_infections"])
            deaths_total = T.tsum(mf_out["deaths_total"])
        else:
            infectious = (pop.disease_stage == Stage.I).astype(float)
            eff_inf = np.asarray(value_of(apply_isolation(infectious, iso_effective)))
            new_e_mask = exposure_step(
                self.graph, pop, self.params, float(value_of(beta_t)),
                eff_inf, efficacy, stream(seed, Channel.EXPOSURE, step=t),
            )
            prog = seirm_progress(
                pop, self.params, stream(seed, Channel.PROGRESSION, step=t),
                skip=new_e_mask,
            )
            newly_infectious = prog["to_infectious"].copy()
            if self.params.latent_period == 0:
                newly_infectious |= new_e_mask
            step_new_exposures = float(new_e_mask.sum())
            step_new_infections = float(newly_infectious.sum())
            step_active = float((pop.disease_stage == Stage.I).sum())
            deaths_total = None
            step_deaths = float(prog["died"].size)

        if self.vaccine is not None and t >= self.config.vaccine.start_step:
            vaccination_step(
                pop, self.vaccine, t,
                stream(seed, Channel.VACCINE, step=t), state.dropout_mask,
            )

        if self.testing is not None and not mean_field:
            testing_step(
                pop, self.testing, t, newly_infectious, state.pending,
                state.forced_iso_until, stream(seed, Channel.TEST),
                self.params.infectious_period,
            )

        if self.schedule.events:
            stimulus_step(pop, self.schedule, t)

        state.infection_hist.append(float(value_of(step_new_infections)))

        out = {
            "new_exposures": step_new_exposures,
            "new_infections": step_new_infections,
            "active_infections": step_active,
            "isolation_rate": float(iso_effective.mean()),
            "deaths_total": deaths_total,
        }
        if not mean_field:
            out["deaths"] = step_deaths
        if month_boundary:
            month = t // MONTH_STEPS
            w = acts["work"]
            mu = unemployment_rate(
                w, handles.gamma0, handles.gamma1,
                month_claims(handles.iur_series, month),
            )
            out["month"] = month
            out["unemployment_rate"] = mu
            out["mean_willingness"] = float(np.mean(value_of(w)))
        return out

    # -- full run ------------------------------------------------------------

    def run(
        self,
        seed: Optional[int] = None,
        beta: Optional[ArrayLike] = None,
        r0_series: Optional[ArrayLike] = None,
        gamma0: Optional[ArrayLike] = None,
        gamma1: Optional[ArrayLike] = None,
        iur_series: Optional[ArrayLike] = None,
    ) -> Trajectory:
        seed = self.config.execution.seed if seed is None else int(seed)
        horizon = self.config.execution.horizon_steps
        handles = self._resolve_handles(beta, r0_series, gamma0, gamma1, iur_series)
        state = self.new_state(seed)
        self.last_state = state
        initial_counts = state.stage_totals()

        series = {k: [] for k in ("new_exposures", "new_infections",
                                  "active_infections", "deaths",
                                  "isolation_rate")}
        months, mu_vals, mean_w = [], [], []
        taped_infections: List[ArrayLike] = []
        taped_mu: List[ArrayLike] = []
        taped_deaths = None
        snapshots: Dict[int, Dict[str, float]] = {}
        snapshot_at = set(self.config.execution.snapshot_steps)

        for t in range(horizon):
            try:
                out = self.step(state, t, handles, seed)
            except DiffAbmError as exc:
                exc.step = t
                exc.partial = self._assemble(
                    series, months, mu_vals, mean_w, seed, initial_counts,
                    snapshots, taped_infections, taped_mu, taped_deaths,
                )
                raise
            series["new_exposures"].append(float(value_of(out["new_exposures"])))
            series["new_infections"].append(float(value_of(out["new_infections"])))
            series["active_infections"].append(
                float(value_of(out["active_infections"]))
            )
            series["isolation_rate"].append(out["isolation_rate"])
            if self.mode == "mean-field":
                # deaths_total is cumulative; store the per-step increment
                total = float(value_of(out["deaths_total"]))
                series["deaths"].append(total - sum(series["deaths"]))
                taped_deaths = out["deaths_total"]
                taped_infections.append(out["new_infections"])
            else:
                series["deaths"].append(out["deaths"])
            if "month" in out:
                months.append(out["month"])
                mu_vals.append(float(value_of(out["unemployment_rate"])))
                mean_w.append(out["mean_willingness"])
                taped_mu.append(out["unemployment_rate"])
            if t in snapshot_at:
                snapshots[t] = state.stage_totals()

        return self._assemble(
            series, months, mu_vals, mean_w, seed, initial_counts, snapshots,
            taped_infections, taped_mu, taped_deaths,
        )

    def _assemble(self, series, months, mu_vals, mean_w, seed, initial_counts,
                  snapshots, taped_infections, taped_mu, taped_deaths) -> Trajectory:
        scale = self.scale
        return Trajectory(
            new_exposures=np.asarray(series["new_exposures"]) * scale,
            new_infections=np.asarray(series["new_infections"]) * scale,
            active_infections=np.asarray(series["active_infections"]) * scale,
            deaths=np.asarray(series["deaths"]) * scale,
            isolation_rate=np.asarray(series["isolation_rate"]),
            month=np.asarray(months, dtype=int),
            unemployment_rate=np.asarray(mu_vals),
            mean_willingness=np.asarray(mean_w),
            seed=seed,
            config_hash=self.hash,
            mode=self.mode,
            scale=scale,
            initial_stage_counts=initial_counts,
            snapshots=snapshots,
            taped_new_infections=taped_infections or None,
            taped_unemployment=taped_mu or None,
            taped_deaths_total=taped_deaths,
        )


_ATTR_PLACEHOLDERS = {
    "age_band": "age",
    "gender": "gender",
    "borough": "location",
    "income_band": "income",
    "occupation": "occupation",
}


def _templates_for_attrs(
    pop: Population, attrs: Sequence[str]
) -> Optional[Dict[str, PromptTemplate]]:
    """Prompt templates for a restricted archetype attribute set.

    Attributes outside the key would leave placeholders unbound, so they are
    pre-filled with the population's modal label as a representative value.
    """
    missing = [a for a in STATIC_AXES if a not in attrs]
    if not missing:
        return None
    fill = {}
    for attr in missing:
        codes = getattr(pop, attr)
        modal = int(np.bincount(codes, minlength=len(pop.bins[attr])).argmax())
        fill[_ATTR_PLACEHOLDERS[attr]] = pop.bins[attr][modal]
    out = {}
    for action in ACTIONS:
        base = default_template(action)
        user = base.user_text
        for name, val in fill.items():
            user = user.replace("{" + name + "}", val)
        out[action] = PromptTemplate(
            system_text=base.system_text, user_text=user, action=action
        )
    return out


def _subset_population(pop: Population, pick: np.ndarray) -> Population:
    return Population(
        age_band=pop.age_band[pick],
        gender=pop.gender[pick],
        borough=pop.borough[pick],
        income_band=pop.income_band[pick],
        occupation=pop.occupation[pick],
        household_id=pop.household_id[pick],
        bins={k: list(v) for k, v in pop.bins.items()},
    )


def run_simulation(
    config: RunConfig,
    provider: Optional[Provider] = None,
    seed: Optional[int] = None,
    **overrides,
) -> Trajectory:
    return Simulation(config, provider=provider).run(seed=seed, **overrides)
