"""Run configuration: schema, validation, canonical hashing, and patching.

A run is described by one JSON document with sections population, graph, epi,
labor, vaccine, testing, stimulus, behavior, and execution. Loading fills
defaults and reports every violation at once with JSON-pointer paths. The
config hash is the sha256 of the canonical (sorted-key, compact) JSON of the
fully-normalized document, so semantically identical configs hash equally.
"""

from __future__ import annotations

import hashlib
import json
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import DomainError, SchemaError

DEFAULT_AGE_BANDS = ["0t19", "20t39", "40t64", "65plus"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MarginalSpec(_Section):
    axis: str
    bins: List[str] = Field(min_length=1)
    counts: List[float] = Field(min_length=1)

    @model_validator(mode="after")
    def _lengths(self):
        if len(self.bins) != len(self.counts):
            raise ValueError("bins and counts must have equal length")
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be nonnegative")
        return self


class PopulationSection(_Section):
    n: int = Field(default=1000, ge=1)
    csv: Optional[str] = None
    marginals: Optional[List[MarginalSpec]] = None
    household_size_dist: Dict[str, float] = Field(
        default_factory=lambda: {"1": 0.3, "2": 0.3, "3": 0.2, "4": 0.2}
    )

    @model_validator(mode="after")
    def _households(self):
        for size, prob in self.household_size_dist.items():
            if int(size) < 1:
                raise ValueError("household sizes must be >= 1")
            if prob < 0:
                raise ValueError("household size probabilities must be >= 0")
        total = sum(self.household_size_dist.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError("household size probabilities must sum to 1")
        return self


class LayerWeights(_Section):
    household: float = Field(default=1.0, ge=0)
    workplace: float = Field(default=1.0, ge=0)
    mobility: float = Field(default=1.0, ge=0)


class GraphSection(_Section):
    workplace_mean_degree: float = Field(default=5.0, ge=0)
    mobility_mean_degree: float = Field(default=5.0, ge=0)
    layer_weights: LayerWeights = Field(default_factory=LayerWeights)


class EpiSection(_Section):
    r0: float = Field(default=3.0, gt=0)
    r0_series: Optional[List[float]] = None
    beta: Optional[float] = Field(default=None, ge=0)
    latent_period: int = Field(default=5, ge=0)
    infectious_period: int = Field(default=7, ge=1)
    dt: float = Field(default=1.0, gt=0)
    susceptibility: Union[float, List[float]] = Field(default=1.0)
    mortality_prob: Union[float, List[float]] = Field(default=0.01)
    initial_infected_frac: float = Field(default=0.01, ge=0, le=1)

    @model_validator(mode="after")
    def _ranges(self):
        susc = self.susceptibility
        for s in susc if isinstance(susc, list) else [susc]:
            if s < 0:
                raise ValueError("susceptibility must be nonnegative")
        mort = self.mortality_prob
        for m in mort if isinstance(mort, list) else [mort]:
            if not (0 <= m <= 1):
                raise ValueError("mortality_prob must lie in [0, 1]")
        if self.r0_series is not None and any(r <= 0 for r in self.r0_series):
            raise ValueError("r0_series entries must be positive")
        return self


class LaborSection(_Section):
    gamma0: float = Field(default=-0.5, ge=-1.0, le=0.0)
    gamma1: float = Field(default=1.0, ge=0.0, le=2.0)
    iur_series: Optional[List[float]] = None
    heuristic_work_p: float = Field(default=0.6, ge=0, le=1)

    @model_validator(mode="after")
    def _iur(self):
        if self.iur_series is not None:
            if any(not (0 <= c <= 1) for c in self.iur_series):
                raise ValueError("iur_series values must lie in [0, 1]")
        return self


class VaccineSection(_Section):
    enabled: bool = False
    start_step: int = Field(default=0, ge=0)
    dose_gap: int = Field(default=21, ge=1)
    first_dose_efficacy: float = Field(default=0.5, ge=0, le=1)
    second_dose_efficacy: float = Field(default=0.9, ge=0, le=1)
    daily_supply: int = Field(default=0, ge=0)
    second_dose_dropout: float = Field(default=0.0, ge=0, le=1)


class TestingSection(_Section):
    enabled: bool = False
    kind: Literal["antigen", "pcr"] = "antigen"
    specificity: float = Field(default=0.65, ge=0, le=1)
    sensitivity: float = Field(default=0.9, ge=0, le=1)
    result_delay: int = Field(default=1, ge=0)


class StimulusEventSpec(_Section):
    step: int = Field(ge=0)
    adult_amount: float = Field(default=600.0, ge=0)
    per_child_amount: float = Field(default=600.0, ge=0)
    eligible_income_bands: Optional[List[str]] = None


class StimulusSection(_Section):
    events: List[StimulusEventSpec] = Field(default_factory=list)
    child_age_bands: List[str] = Field(default_factory=lambda: ["0t19"])


class BehaviorSection(_Section):
    mode: Literal["heuristic", "archetype", "per-agent"] = "heuristic"
    provider: str = "heuristic"
    archetype_attrs: List[str] = Field(
        default_factory=lambda: [
            "age_band", "gender", "borough", "income_band", "occupation",
        ]
    )
    m_samples: int = Field(default=10, ge=1)
    heuristic_isolate_p: float = Field(default=0.1, ge=0, le=1)
    duration_offset_weeks: int = Field(default=0, ge=0)
    initial_cases: float = Field(default=0.0, ge=0)
    initial_change_pct: float = Field(default=0.0)
    per_agent_cap: int = Field(default=1000, ge=1)

    @model_validator(mode="after")
    def _attrs(self):
        from .popgen import STATIC_AXES

        bad = [a for a in self.archetype_attrs if a not in STATIC_AXES]
        if bad:
            raise ValueError(f"unknown archetype attributes: {bad}")
        if not self.archetype_attrs:
            raise ValueError("archetype_attrs must not be empty")
        return self


class ExecutionSection(_Section):
    horizon_steps: int = Field(default=60, ge=0)
    mode: Literal["stochastic", "mean-field"] = "stochastic"
    seed: int = Field(default=0, ge=0)
    snapshot_steps: List[int] = Field(default_factory=list)


class RunConfig(_Section):
    population: PopulationSection = Field(default_factory=PopulationSection)
    graph: GraphSection = Field(default_factory=GraphSection)
    epi: EpiSection = Field(default_factory=EpiSection)
    labor: LaborSection = Field(default_factory=LaborSection)
    vaccine: VaccineSection = Field(default_factory=VaccineSection)
    testing: TestingSection = Field(default_factory=TestingSection)
    stimulus: StimulusSection = Field(default_factory=StimulusSection)
    behavior: BehaviorSection = Field(default_factory=BehaviorSection)
    execution: ExecutionSection = Field(default_factory=ExecutionSection)

    def normalized(self) -> dict:
        """Full document with every default materialized."""
        return self.model_dump(mode="json")


def _pointer(loc: Tuple) -> str:
    return "/" + "/".join(str(part) for part in loc)


def _collect_errors(exc: ValidationError) -> List[str]:
    return [f"{_pointer(e['loc'])}: {e['msg']}" for e in exc.errors()]


def validate_config(document: dict) -> RunConfig:
    """Parse a config document; raises SchemaError listing every violation."""
    if not isinstance(document, dict):
        raise SchemaError("config document must be a JSON object", errors=[])
    try:
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        errors = _collect_errors(exc)
        raise SchemaError(
            "invalid config: " + "; ".join(errors), errors=errors
        ) from None


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            document = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}", errors=[str(exc)])
    return validate_config(document)


def canonical_json(document: dict) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"))


def config_hash(config: RunConfig) -> str:
    payload = canonical_json(config.normalized()).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


_PATCH_ALIASES = {"R0": "r0"}


def apply_patch(config: RunConfig, overrides: Dict[str, object]) -> RunConfig:
    """Pure functional override of dotted config paths; the input is untouched.

    Keys are dotted paths into the document ("epi.r0", "vaccine"); "R0" is
    accepted as an alias for "r0". Unknown paths raise naming the path.
    """
    document = config.normalized()
    for path, value in overrides.items():
        parts = [(_PATCH_ALIASES.get(p, p)) for p in str(path).split(".")]
        node = document
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise DomainError(f"unknown config path: {path}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise DomainError(f"unknown config path: {path}")
        if isinstance(value, BaseModel):
            value = value.model_dump(mode="json")
        node[leaf] = value
    return validate_config(document)
