"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class _Request(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ValidateRequest(_Request):
    config: Dict[str, Any]


class ValidateResponse(BaseModel):
    normalized: Dict[str, Any]
    hash: str


class PopgenRequest(_Request):
    config: Dict[str, Any]


class PopgenResponse(BaseModel):
    n: int
    households: int
    csv: str
    config_hash: str


class SimulateRequest(_Request):
    config: Dict[str, Any]
    seed: int
    provider: Optional[str] = None


class ObservedPayload(_Request):
    weekly_cases: List[float]
    monthly_unemployment: List[float]


class CalibrateRequest(_Request):
    config: Dict[str, Any]
    observed: ObservedPayload
    covariates: Optional[List[List[float]]] = None
    epochs: int = Field(default=50, ge=0)
    lr: float = Field(default=1e-4, gt=0)
    hidden: int = Field(default=32, ge=1)
    width: int = Field(default=3, ge=1)
    seed: int = 0


class PollRequest(_Request):
    config: Dict[str, Any]
    seed: int
    query: Dict[str, Any]
    provider: Optional[str] = None


class CounterfactualRequest(_Request):
    config: Dict[str, Any]
    patch: Dict[str, Any] = Field(default_factory=dict)
    n_seeds: int = Field(default=1, ge=1)
    seed: Optional[int] = None


class ProspectiveRequest(_Request):
    config: Dict[str, Any]
    protocol_a: Dict[str, Any] = Field(default_factory=dict)
    protocol_b: Dict[str, Any] = Field(default_factory=dict)
    sweep: Dict[str, Any]
    n_seeds: int = Field(default=1, ge=1)
    seed: Optional[int] = None


class DecisionRequest(_Request):
    system: str
    user: str


class DecisionResponse(BaseModel):
    text: str


class HealthResponse(BaseModel):
    status: str
    version: str
