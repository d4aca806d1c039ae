"""Disease dynamics: infection kernel, SEIRM progression, interventions.

Two execution modes share one timing convention. An agent exposed during step
t first counts as infectious at step t + latent + 1 (or t + 1 when latent is
0) and stays infectious for exactly infectious_period exposure steps; agents
seeded before step 0 are infectious from step 0. Stochastic mode advances
hard per-agent stages with deterministic stage timers; mean-field mode
advances expected per-agent occupancies through cohort queues, which keeps
every operation smooth for differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tape as T
from .errors import DomainError
from .popgen import ContactGraph, Population, Stage
from .rng import Channel, RngStream
from .stochastic import bernoulli_st
from .tape import ArrayLike, Param, value_of


@dataclass
class EpiParams:
    """Transmission and progression parameters.

    ``beta`` is the effective contact rate; a latent period of 0 collapses the
    E stage so the model reduces to SIR-with-mortality.
    """

    beta: Union[Param, float]
    susceptibility: Union[Param, np.ndarray]
    mortality_prob: np.ndarray
    latent_period: int = 5
    infectious_period: int = 7
    dt: float = 1.0

    def __post_init__(self):
        if self.latent_period < 0:
            raise DomainError("latent_period must be >= 0")
        if self.infectious_period < 1:
            raise DomainError("infectious_period must be >= 1")
        if self.dt <= 0:
            raise DomainError("dt must be positive")
        self.mortality_prob = np.asarray(self.mortality_prob, dtype=float)
        if np.any(self.mortality_prob < 0) or np.any(self.mortality_prob > 1):
            raise DomainError("mortality_prob must lie in [0, 1]")
        if not isinstance(self.beta, Param) and float(value_of(self.beta)) < 0:
            raise DomainError("beta must be nonnegative")
        if not isinstance(self.susceptibility, Param):
            self.susceptibility = np.asarray(self.susceptibility, dtype=float)
            if np.any(self.susceptibility < 0):
                raise DomainError("susceptibility must be nonnegative")


def beta_from_r0(r0: ArrayLike, infectious_period: int, dt: float = 1.0):
    """Effective contact rate for a target reproduction number.

    With the kernel's per-contact normalization, an infectious agent on a
    degree-homogeneous graph causes ~beta*dt new cases per step in a fully
    susceptible population, so R0 = beta * dt * infectious_period.
    """
    return T.div(r0, float(infectious_period) * dt)


def infection_probability(beta, s_i, n_i, infected_sum, dt: float = 1.0):
    """p = 1 - exp(-beta * S_i * dt * sum(I_j) / n_i); 0 for isolated vertices."""
    n_arr = np.asarray(value_of(n_i), dtype=float)
    inf_arr = np.asarray(value_of(infected_sum), dtype=float)
    if np.any((n_arr == 0) & (inf_arr > 0)):
        raise DomainError("agent with zero degree cannot have infected neighbors")
    scalar = n_arr.ndim == 0
    safe_n = np.where(n_arr > 0, n_arr, 1.0)
    load = T.div(infected_sum, safe_n)
    rate = T.mul(T.mul(beta, s_i), T.mul(load, dt))
    p = T.sub(1.0, T.exp(T.neg(rate)))
    mask = (n_arr > 0).astype(float)
    if scalar:
        mask = float(mask)
    return T.mul(p, mask)


def apply_isolation(infected_flags: ArrayLike, isolation_actions: ArrayLike):
    """Effective infectiousness I_j * (1 - A_j); isolating agents drop out."""
    iv = np.asarray(value_of(infected_flags))
    av = np.asarray(value_of(isolation_actions))
    if iv.shape != av.shape:
        raise DomainError("infected and isolation vectors differ in length")
    return T.mul(infected_flags, T.sub(1.0, isolation_actions))


def susceptibility_vector(params: EpiParams, age_band: np.ndarray):
    """Per-agent susceptibility (gathered per age band, taped when a Param)."""
    if isinstance(params.susceptibility, Param):
        raise DomainError("watch the susceptibility Param on a tape first")
    return params.susceptibility[age_band]


def exposure_probabilities(
    graph: ContactGraph,
    params: EpiParams,
    beta: ArrayLike,
    per_agent_susceptibility: ArrayLike,
    effective_infectious: ArrayLike,
    efficacy_in_force: ArrayLike,
):
    """Per-agent infection probability from the weighted contact graph."""
    adjacency = graph.combined()
    infected_sum = T.spmatvec(adjacency, effective_infectious)
    degree = graph.weighted_degree()
    s_eff = T.mul(per_agent_susceptibility, T.sub(1.0, efficacy_in_force))
    return infection_probability(beta, s_eff, degree, infected_sum, params.dt)


# ---------------------------------------------------------------------------
# stochastic mode


def seed_initial_infections(pop: Population, frac: float, rng: RngStream,
                            infectious_period: int) -> np.ndarray:
    """Mark round(frac*N) agents infectious before step 0; returns the mask."""
    if not (0.0 <= frac <= 1.0):
        raise DomainError("initial infection fraction must be in [0, 1]")
    n = pop.n
    k = int(round(frac * n))
    chosen = rng.permutation(n)[:k]
    pop.disease_stage[chosen] = Stage.I
    pop.stage_timer[chosen] = infectious_period
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    return mask


def exposure_step(
    graph: ContactGraph,
    pop: Population,
    params: EpiParams,
    beta_value: float,
    effective_infectious: np.ndarray,
    efficacy_in_force: np.ndarray,
    rng: RngStream,
) -> np.ndarray:
    """Sample new exposures for susceptible agents; returns the new-E mask."""
    susc = susceptibility_vector(params, pop.age_band)
    p = exposure_probabilities(
        graph, params, beta_value, susc, effective_infectious, efficacy_in_force
    )
    draws = bernoulli_st(value_of(p), rng, ids=pop.agent_ids).astype(bool)
    new_e = draws & (pop.disease_stage == Stage.S)
    if params.latent_period > 0:
        pop.disease_stage[new_e] = Stage.E
        pop.stage_timer[new_e] = params.latent_period
    else:
        pop.disease_stage[new_e] = Stage.I
        pop.stage_timer[new_e] = params.infectious_period
    return new_e


def seirm_progress(
    pop: Population,
    params: EpiParams,
    rng: RngStream,
    skip: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """Advance stage timers one step; agents in ``skip`` entered this step.

    E becomes I when its timer runs out; I resolves to M with the agent's
    age-band mortality probability, else R. Returns the transition masks.
    """
    active = ~skip if skip is not None else np.ones(pop.n, dtype=bool)
    e_mask = (pop.disease_stage == Stage.E) & active
    pop.stage_timer[e_mask] -= 1
    to_i = e_mask & (pop.stage_timer == 0)
    pop.disease_stage[to_i] = Stage.I
    pop.stage_timer[to_i] = params.infectious_period

    i_mask = (pop.disease_stage == Stage.I) & active & ~to_i
    pop.stage_timer[i_mask] -= 1
    leaving = i_mask & (pop.stage_timer == 0)
    ids = np.flatnonzero(leaving)
    if ids.size:
        m = params.mortality_prob[pop.age_band[ids]]
        died = bernoulli_st(m, rng, ids=ids).astype(bool)
        dead_ids = ids[died]
        rec_ids = ids[~died]
        pop.disease_stage[dead_ids] = Stage.M
        pop.disease_stage[rec_ids] = Stage.R
    else:
        dead_ids = rec_ids = ids
    return {"to_infectious": to_i, "left_infectious": leaving,
            "died": dead_ids, "recovered": rec_ids}


# ---------------------------------------------------------------------------
# mean-field mode


class MeanFieldDisease:
    """Expected per-agent stage occupancies with cohort timing queues.

    Queue slot k (1-based) holds the probability mass leaving that stage
    after k more shifts; operations stay taped when inputs are taped.
    """

    def __init__(self, n: int, params: EpiParams, seed_mask: np.ndarray,
                 mortality_per_agent: np.ndarray):
        seed = np.asarray(seed_mask, dtype=float)
        self.n = n
        self.params = params
        self._mort = np.asarray(mortality_per_agent, dtype=float)
        self.s: ArrayLike = 1.0 - seed
        self.e: List[ArrayLike] = [np.zeros(n) for _ in range(params.latent_period)]
        self.i: List[ArrayLike] = [np.zeros(n) for _ in range(params.infectious_period)]
        self.i[-1] = seed.copy()
        self.r: ArrayLike = np.zeros(n)
        self.m: ArrayLike = np.zeros(n)

    def infectious_mass(self) -> ArrayLike:
        total = self.i[0]
        for slab in self.i[1:]:
            total = T.add(total, slab)
        return total

    def step(self, p_expose: ArrayLike) -> Dict[str, ArrayLike]:
        """One synchronous update given this step's exposure probabilities."""
        params = self.params
        new_e = T.mul(self.s, p_expose)
        self.s = T.sub(self.s, new_e)
        if params.latent_period > 0:
            to_i = self.e[0]
            self.e = self.e[1:] + [new_e]
        else:
            to_i = new_e
        leave_i = self.i[0]
        self.i = self.i[1:] + [to_i]
        deaths = T.mul(leave_i, self._mort)
        recovered = T.sub(leave_i, deaths)
        self.m = T.add(self.m, deaths)
        self.r = T.add(self.r, recovered)
        return {
            "new_exposures": new_e,
            "new_infections": to_i,
            "active_infections": self.infectious_mass(),
            "deaths_total": self.m,
        }

    def occupancy_sums(self) -> np.ndarray:
        """Per-agent total probability mass over all stages (should be 1)."""
        total = np.asarray(value_of(self.s), dtype=float).copy()
        for slab in self.e + self.i:
            total += np.asarray(value_of(slab), dtype=float)
        total += np.asarray(value_of(self.r), dtype=float)
        total += np.asarray(value_of(self.m), dtype=float)
        return total


# ---------------------------------------------------------------------------
# interventions


@dataclass
class VaccineProtocol:
    dose_gap: int = 21
    first_dose_efficacy: float = 0.5
    second_dose_efficacy: float = 0.9
    daily_supply: int = 0
    second_dose_dropout: float = 0.0

    def __post_init__(self):
        if self.dose_gap < 1:
            raise DomainError("dose_gap must be >= 1")
        for name in ("first_dose_efficacy", "second_dose_efficacy",
                     "second_dose_dropout"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise DomainError(f"{name} must be in [0, 1]")
        if self.daily_supply < 0:
            raise DomainError("daily_supply must be >= 0")


def efficacy_in_force(pop: Population, protocol: VaccineProtocol) -> np.ndarray:
    """Per-agent protection multiplier source: 0, first-, or second-dose level."""
    eff = np.zeros(pop.n)
    eff[pop.doses_received == 1] = protocol.first_dose_efficacy
    eff[pop.doses_received >= 2] = protocol.second_dose_efficacy
    return eff


def vaccination_step(
    pop: Population,
    protocol: VaccineProtocol,
    step: int,
    rng: RngStream,
    dropout_mask: Optional[np.ndarray] = None,
) -> int:
    """Administer up to daily_supply doses; due second doses take priority.

    ``dropout_mask`` marks agents who permanently skip dose 2; it is drawn
    once per run from the vaccine channel so both execution modes share it.
    """
    supply = protocol.daily_supply
    if supply <= 0:
        return 0
    alive = pop.disease_stage != Stage.M
    given = 0

    due_second = (
        alive
        & (pop.doses_received == 1)
        & (step - pop.last_dose_step >= protocol.dose_gap)
    )
    if dropout_mask is not None:
        due_second &= ~dropout_mask
    ids = np.flatnonzero(due_second)[:supply]
    pop.doses_received[ids] += 1
    pop.last_dose_step[ids] = step
    given += ids.size

    remaining = supply - given
    if remaining > 0:
        unvaccinated = alive & (pop.doses_received == 0)
        ids = np.flatnonzero(unvaccinated)[:remaining]
        pop.doses_received[ids] = 1
        pop.last_dose_step[ids] = step
        given += ids.size
    return given


def draw_dropout_mask(pop: Population, protocol: VaccineProtocol,
                      rng: RngStream) -> np.ndarray:
    if protocol.second_dose_dropout <= 0:
        return np.zeros(pop.n, dtype=bool)
    u = rng.uniform_for(pop.agent_ids)
    return u < protocol.second_dose_dropout


@dataclass
class TestProtocol:
    __test__ = False  # not a pytest class despite the name

    kind: str = "antigen"
    specificity: float = 0.65
    sensitivity: float = 0.9
    result_delay: int = 1

    def __post_init__(self):
        if self.kind not in ("antigen", "pcr"):
            raise DomainError("test kind must be antigen or pcr")
        for name in ("specificity", "sensitivity"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise DomainError(f"{name} must be in [0, 1]")
        if self.result_delay < 0:
            raise DomainError("result_delay must be >= 0")


def test_results(
    is_infected: np.ndarray,
    protocol: TestProtocol,
    rng: RngStream,
    ids: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Measurement layer: positive w.p. sensitivity (infected) or
    1 - specificity (not infected)."""
    infected = np.asarray(is_infected, dtype=bool)
    p = np.where(infected, protocol.sensitivity, 1.0 - protocol.specificity)
    if ids is None:
        ids = np.arange(infected.shape[0])
    return bernoulli_st(p, rng, ids=ids).astype(bool)


@dataclass
class PendingResult:
    due_step: int
    ids: np.ndarray
    positive: np.ndarray


def testing_step(
    pop: Population,
    protocol: TestProtocol,
    step: int,
    newly_infectious: np.ndarray,
    pending: List[PendingResult],
    forced_iso_until: np.ndarray,
    rng: RngStream,
    infectious_period: int,
) -> None:
    """Test newly symptomatic agents; confirmed positives must isolate.

    Results arrive result_delay steps later; a positive forces the isolation
    flag for the infectious period from delivery.
    """
    ids = np.flatnonzero(newly_infectious)
    if ids.size:
        positive = test_results(
            np.ones(ids.size, dtype=bool), protocol, rng.at(step), ids=ids
        )
        pending.append(PendingResult(step + protocol.result_delay, ids, positive))
    while pending and pending[0].due_step <= step:
        batch = pending.pop(0)
        pos_ids = batch.ids[batch.positive]
        forced_iso_until[pos_ids] = np.maximum(
            forced_iso_until[pos_ids], step + infectious_period
        )


@dataclass
class StimulusEvent:
    step: int
    adult_amount: float
    per_child_amount: float
    eligible_income_bands: Optional[List[str]] = None

    def __post_init__(self):
        if self.adult_amount < 0 or self.per_child_amount < 0:
            raise DomainError("stimulus amounts must be >= 0")


@dataclass
class StimulusSchedule:
    events: List[StimulusEvent] = field(default_factory=list)
    child_age_bands: List[str] = field(default_factory=list)

    def event_at(self, step: int) -> Optional[StimulusEvent]:
        for e in self.events:
            if e.step == step:
                return e
        return None

    def context_payment(self, step: int, window: int = 30) -> float:
        """Adult payment amount of the most recent event within the window."""
        best = 0.0
        best_step = -1
        for e in self.events:
            if step - window < e.step <= step and e.step > best_step:
                best, best_step = e.adult_amount, e.step
        return best


def child_mask(pop: Population, child_age_bands: Sequence[str]) -> np.ndarray:
    codes = [pop.bins["age_band"].index(b) for b in child_age_bands
             if b in pop.bins["age_band"]]
    return np.isin(pop.age_band, codes)


def stimulus_step(pop: Population, schedule: StimulusSchedule, step: int) -> np.ndarray:
    """Per-agent payments: eligible adults get the base plus the per-child
    amount for each child in their household; zero off event steps."""
    payments = np.zeros(pop.n)
    event = schedule.event_at(step)
    if event is None:
        return payments
    children = child_mask(pop, schedule.child_age_bands)
    n_households = int(pop.household_id.max()) + 1
    kids_per_hh = np.bincount(
        pop.household_id[children], minlength=n_households
    )
    eligible = ~children
    if event.eligible_income_bands is not None:
        band_codes = [
            pop.bins["income_band"].index(b)
            for b in event.eligible_income_bands
            if b in pop.bins["income_band"]
        ]
        eligible &= np.isin(pop.income_band, band_codes)
    payments[eligible] = (
        event.adult_amount
        + event.per_child_amount * kids_per_hh[pop.household_id[eligible]]
    )
    return payments
