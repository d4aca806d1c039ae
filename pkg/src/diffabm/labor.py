"""Labor-market dynamics on a monthly cadence.

The unemployment rate couples individual willingness to work with the
exogenous insured-claims series: mu = clip(gamma0 * mean(W) + gamma1 * C_t).
Willingness itself comes from the work-action behavior distribution, so
stimulus and pandemic-fatigue effects enter through the decision layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tape as T
from .behavior import ArchetypeTable, ContextBin, sample_actions
from .errors import DomainError
from .popgen import Population
from .rng import RngStream
from .stochastic import bernoulli_st
from .tape import ArrayLike, Param, value_of

MONTH_STEPS = 30


@dataclass
class LaborParams:
    gamma0: Union[Param, float]
    gamma1: Union[Param, float]
    iur_series: Union[Param, np.ndarray]

    def __post_init__(self):
        series = value_of(self.iur_series)
        if np.any(series < 0) or np.any(series > 1):
            raise DomainError("iur_series values must lie in [0, 1]")

    def months(self) -> int:
        return int(np.size(value_of(self.iur_series)))


def month_claims(iur_series, month: int) -> ArrayLike:
    """C_month from the claims series; taped gather when the series is taped.

    The series may also be a list of per-month scalars (as produced by a
    recurrent predictor), in which case the month's element is returned.
    """
    if isinstance(iur_series, (list, tuple)):
        if not (0 <= month < len(iur_series)):
            raise DomainError(
                f"month {month} outside claims series of length {len(iur_series)}"
            )
        return iur_series[month]
    n = int(np.size(value_of(iur_series)))
    if not (0 <= month < n):
        raise DomainError(f"month {month} outside claims series of length {n}")
    if T.is_taped(iur_series):
        picked = T.gather(iur_series, np.array([month]))
        return T.tsum(picked)
    return float(np.asarray(value_of(iur_series)).ravel()[month])


def unemployment_rate(w: ArrayLike, gamma0: ArrayLike, gamma1: ArrayLike,
                      claims: ArrayLike) -> ArrayLike:
    """mu = clip(gamma0 * mean(W) + gamma1 * C, 0, 1).

    Mean rather than sum keeps gamma0 invariant to population size.
    """
    mean_w = T.tmean(w)
    mu = T.add(T.mul(gamma0, mean_w), T.mul(gamma1, claims))
    return T.clip(mu, 0.0, 1.0)


def willingness_step(
    table: Optional[ArchetypeTable],
    pop: Population,
    ctx: ContextBin,
    rng: RngStream,
    heuristic_p: Optional[float] = None,
    mean_field: bool = False,
    attrs=None,
) -> np.ndarray:
    """Per-agent willingness to work this month.

    With an archetype table, each agent draws from its archetype's work
    probability; without one, a fixed participation probability applies.
    """
    if table is not None:
        kwargs = {} if attrs is None else {"attrs": attrs}
        return sample_actions(
            table, pop, ctx, "work", rng, mean_field=mean_field, **kwargs
        )
    if heuristic_p is None:
        raise DomainError("willingness needs an archetype table or a fixed rate")
    if not (0.0 <= heuristic_p <= 1.0):
        raise DomainError("participation probability must be in [0, 1]")
    p = np.full(pop.n, heuristic_p)
    if mean_field:
        return p
    return bernoulli_st(p, rng, ids=pop.agent_ids)
