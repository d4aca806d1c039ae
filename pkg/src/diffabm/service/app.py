"""HTTP facade over the simulation, calibration, and analysis APIs.

All state lives in the request payloads; the only server-side state is the
decision provider backing /v1/decision, which lets the remote decision
protocol be exercised against this service itself.
"""

from __future__ import annotations

import io
from importlib import metadata
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..analysis import PollQuery, counterfactual, poll, prospective_sweep
from ..calibrate import (
    CovariateSeries,
    ObservedSeries,
    calibrate,
    synthetic_covariates,
)
from ..config import config_hash, validate_config
from ..engine import Simulation, build_population
from ..errors import DiffAbmError, SchemaError
from ..popgen import write_population_csv
from ..providers import HeuristicProvider, Provider
from . import schemas


def package_version() -> str:
    try:
        return metadata.version("diffabm")
    except metadata.PackageNotFoundError:
        return "0.0.0"


def _config_with_provider(doc: dict, provider: Optional[str]) -> dict:
    if provider is None:
        return doc
    out = dict(doc)
    behavior = dict(out.get("behavior", {}))
    behavior["provider"] = provider
    out["behavior"] = behavior
    return out


def create_app(decision_provider: Optional[Provider] = None) -> FastAPI:
    app = FastAPI(title="diffabm", version=package_version())
    app.state.decision_provider = decision_provider or HeuristicProvider(
        0.5, seed=0
    )

    @app.exception_handler(SchemaError)
    async def schema_error(request: Request, exc: SchemaError):
        return JSONResponse(
            status_code=422,
            content={"detail": {"message": str(exc), "errors": exc.errors}},
        )

    @app.exception_handler(DiffAbmError)
    async def domain_error(request: Request, exc: DiffAbmError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/v1/health", response_model=schemas.HealthResponse)
    def health():
        return {"status": "ok", "version": package_version()}

    @app.post("/v1/config/validate", response_model=schemas.ValidateResponse)
    def validate(req: schemas.ValidateRequest):
        cfg = validate_config(req.config)
        return {"normalized": cfg.normalized(), "hash": config_hash(cfg)}

    @app.post("/v1/popgen", response_model=schemas.PopgenResponse)
    def popgen(req: schemas.PopgenRequest):
        cfg = validate_config(req.config)
        pop = build_population(cfg)
        buf = io.StringIO()
        write_population_csv(pop, buf)
        return {
            "n": pop.n,
            "households": int(pop.household_id.max()) + 1,
            "csv": buf.getvalue(),
            "config_hash": config_hash(cfg),
        }

    @app.post("/v1/simulate")
    def simulate(req: schemas.SimulateRequest):
        cfg = validate_config(_config_with_provider(req.config, req.provider))
        sim = Simulation(cfg)
        traj = sim.run(seed=req.seed)
        payload = traj.to_dict()
        payload["config"] = cfg.normalized()
        return payload

    @app.post("/v1/calibrate")
    def calibrate_endpoint(req: schemas.CalibrateRequest):
        cfg = validate_config(req.config)
        observed = ObservedSeries(
            weekly_cases=np.asarray(req.observed.weekly_cases, dtype=float),
            monthly_unemployment=np.asarray(
                req.observed.monthly_unemployment, dtype=float
            ),
        )
        if req.covariates is not None:
            cov = CovariateSeries(np.asarray(req.covariates, dtype=float))
        else:
            horizon = cfg.execution.horizon_steps
            daily = np.repeat(observed.weekly_cases / 7.0, 7)
            if daily.size < horizon:
                pad = np.full(horizon - daily.size,
                              daily[-1] if daily.size else 0.0)
                daily = np.concatenate([daily, pad])
            cov = synthetic_covariates(daily[:horizon], req.width,
                                       seed=req.seed)
        result = calibrate(
            cfg, observed, cov,
            epochs=req.epochs, lr=req.lr, hidden=req.hidden, seed=req.seed,
        )
        return {
            "model": result.net.to_doc(),
            "gamma0": float(result.gamma0.value),
            "gamma1": float(result.gamma1.value),
            "best_epoch": result.best_epoch,
            "best_loss": (result.best_loss
                          if np.isfinite(result.best_loss) else None),
            "history": [
                {
                    "epoch": r.epoch,
                    "mse_cases": r.mse_cases,
                    "mse_unemployment": r.mse_unemployment,
                    "total": r.total,
                    "wall_time": r.wall_time,
                }
                for r in result.history
            ],
            "config_hash": config_hash(cfg),
        }

    @app.post("/v1/analyze/poll")
    def analyze_poll(req: schemas.PollRequest):
        cfg = validate_config(_config_with_provider(req.config, req.provider))
        query = PollQuery.from_dict(req.query)
        sim = Simulation(cfg)
        traj = sim.run(seed=req.seed)
        table = poll(sim.last_state.pop, traj, query)
        return {
            "metric": table.metric,
            "group_by": table.group_by,
            "rows": table.rows,
            "config_hash": config_hash(cfg),
            "seed": req.seed,
        }

    @app.post("/v1/analyze/counterfactual")
    def analyze_counterfactual(req: schemas.CounterfactualRequest):
        cfg = validate_config(req.config)
        report = counterfactual(cfg, req.patch, req.n_seeds,
                                base_seed=req.seed)
        return report.to_dict()

    @app.post("/v1/analyze/prospective")
    def analyze_prospective(req: schemas.ProspectiveRequest):
        cfg = validate_config(req.config)
        curve = prospective_sweep(
            cfg, req.protocol_a, req.protocol_b, req.sweep,
            n_seeds=req.n_seeds, base_seed=req.seed,
        )
        return curve.to_dict()

    @app.post("/v1/decision", response_model=schemas.DecisionResponse)
    def decision(req: schemas.DecisionRequest):
        text = app.state.decision_provider.query(req.system, req.user)
        return {"text": text}

    return app
