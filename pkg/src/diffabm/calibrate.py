"""Gradient-based calibration of structural parameters.

A single-layer GRU maps a covariate series to bounded time-varying R0 and
insured-claims (IUR) series; gamma0/gamma1 are calibrated as direct bounded
parameters. The whole pipeline (recurrence, bounded heads, mean-field
simulation, aggregation, MSE loss) runs on one tape, so one backward() call
yields gradients for every weight, and Adam drives the fit with best-epoch
checkpointing.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import tape as T
from .config import RunConfig
from .engine import MONTH_STEPS, WEEK_STEPS, Simulation
from .errors import DomainError, GradientError
from .optim import Adam
from .tape import ArrayLike, Param, Tape, value_of

R0_BOUNDS = (2.5, 8.0)
IUR_BOUNDS = (0.0, 1.0)
GAMMA0_BOUNDS = (-1.0, 0.0)
GAMMA1_BOUNDS = (0.0, 2.0)


@dataclass
class CovariateSeries:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise DomainError("covariates must be finite")

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def synthetic_covariates(case_series: np.ndarray, width: int, seed: int = 0,
                         noise: float = 0.1) -> CovariateSeries:
    """Standardized lagged copies of a case curve plus noise.

    A stand-in for real multi-modal signals: column k is the curve lagged by
    k steps (zero-padded), standardized, with seeded Gaussian jitter.
    """
    series = np.asarray(case_series, dtype=float)
    steps = series.size
    gen = np.random.default_rng(seed)
    cols = []
    for k in range(width):
        lagged = np.concatenate([np.zeros(k), series[: steps - k]])
        sd = lagged.std()
        standardized = (lagged - lagged.mean()) / (sd if sd > 0 else 1.0)
        cols.append(standardized + noise * gen.standard_normal(steps))
    return CovariateSeries(np.column_stack(cols))


_GATES = ("z", "r", "n")


class CalibNet:
    """Single-layer GRU (input d, hidden h) with a 2-output bounded head.

    Update convention: h_t = (1 - z_t) * n_t + z_t * h_{t-1} with
    n_t = tanh(W_n x + U_n (r_t * h_{t-1}) + b_n). Head outputs pass through
    a sigmoid scaled into [lo, hi] per target, so predictions cannot leave
    their bounds for any weight setting.
    """

    def __init__(self, input_dim: int, hidden: int = 32,
                 r0_bounds: Tuple[float, float] = R0_BOUNDS,
                 iur_bounds: Tuple[float, float] = IUR_BOUNDS,
                 seed: int = 0):
        if input_dim < 1 or hidden < 1:
            raise DomainError("input_dim and hidden must be >= 1")
        self.input_dim = input_dim
        self.hidden = hidden
        self.r0_bounds = (float(r0_bounds[0]), float(r0_bounds[1]))
        self.iur_bounds = (float(iur_bounds[0]), float(iur_bounds[1]))
        gen = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(hidden)

        def mk(name, shape):
            return Param(name, gen.uniform(-scale, scale, shape))

        self.weights: Dict[str, Param] = {}
        for gate in _GATES:
            self.weights[f"w_{gate}"] = mk(f"w_{gate}", (hidden, input_dim))
            self.weights[f"u_{gate}"] = mk(f"u_{gate}", (hidden, hidden))
            self.weights[f"b_{gate}"] = mk(f"b_{gate}", (hidden,))
        self.weights["w_head"] = mk("w_head", (2, hidden))
        self.weights["b_head"] = mk("b_head", (2,))

    def params(self) -> List[Param]:
        return list(self.weights.values())

    def to_doc(self) -> Dict[str, object]:
        return {
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "bounds": {"r0": list(self.r0_bounds), "iur": list(self.iur_bounds)},
            "covariates": {"width": self.input_dim, "kind": "lagged-cases"},
            "weights": {
                name: {
                    "shape": list(np.shape(p.value)),
                    "data": np.asarray(p.value, dtype=float).ravel().tolist(),
                }
                for name, p in self.weights.items()
            },
        }

    def to_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_doc(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_doc(cls, doc: Dict[str, object]) -> "CalibNet":
        net = cls(
            input_dim=int(doc["input_dim"]),
            hidden=int(doc["hidden"]),
            r0_bounds=tuple(doc["bounds"]["r0"]),
            iur_bounds=tuple(doc["bounds"]["iur"]),
        )
        for name, spec in doc["weights"].items():
            if name not in net.weights:
                raise DomainError(f"unknown weight {name!r} in model file")
            arr = np.asarray(spec["data"], dtype=float).reshape(spec["shape"])
            net.weights[name].value = arr
        return net

    @classmethod
    def from_json(cls, path: str) -> "CalibNet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_doc(json.load(fh))


def _handles(net: CalibNet, tape: Optional[Tape]) -> Dict[str, ArrayLike]:
    if tape is None:
        return {k: p.value for k, p in net.weights.items()}
    return {k: tape.watch(p) for k, p in net.weights.items()}


def gru_forward(net: CalibNet, cov: CovariateSeries,
                tape: Optional[Tape] = None) -> List[ArrayLike]:
    """Hidden-state sequence; taped when a tape is given."""
    if cov.width != net.input_dim:
        raise DomainError(
            f"covariate width {cov.width} != net input dim {net.input_dim}"
        )
    w = _handles(net, tape)
    h: ArrayLike = np.zeros(net.hidden)
    hs: List[ArrayLike] = []
    for t in range(cov.steps):
        x = cov.values[t]
        z = T.sigmoid(T.add(T.add(T.matmul(w["w_z"], x), T.matmul(w["u_z"], h)),
                            w["b_z"]))
        r = T.sigmoid(T.add(T.add(T.matmul(w["w_r"], x), T.matmul(w["u_r"], h)),
                            w["b_r"]))
        n = T.tanh(T.add(T.add(T.matmul(w["w_n"], x),
                               T.matmul(w["u_n"], T.mul(r, h))), w["b_n"]))
        h = T.add(T.mul(T.sub(1.0, z), n), T.mul(z, h))
        hs.append(h)
    return hs


def _bounded(y: ArrayLike, bounds: Tuple[float, float]) -> ArrayLike:
    lo, hi = bounds
    return T.add(lo, T.mul(hi - lo, T.sigmoid(y)))


def predict_structural(net: CalibNet, cov: CovariateSeries,
                       tape: Optional[Tape] = None) -> Dict[str, List[ArrayLike]]:
    """Per-step bounded R0 and IUR series from the GRU head."""
    w = _handles(net, tape)
    hs = gru_forward(net, cov, tape=tape)
    r0s: List[ArrayLike] = []
    iurs: List[ArrayLike] = []
    for h in hs:
        y = T.add(T.matmul(w["w_head"], h), w["b_head"])
        y0 = T.tsum(T.gather(y, np.array([0])))
        y1 = T.tsum(T.gather(y, np.array([1])))
        r0s.append(_bounded(y0, net.r0_bounds))
        iurs.append(_bounded(y1, net.iur_bounds))
    return {"r0": r0s, "iur": iurs}


@dataclass
class ObservedSeries:
    weekly_cases: np.ndarray
    monthly_unemployment: np.ndarray

    def __post_init__(self):
        self.weekly_cases = np.asarray(self.weekly_cases, dtype=float)
        self.monthly_unemployment = np.asarray(
            self.monthly_unemployment, dtype=float
        )


def read_observed(cases_path: str, unemployment_path: str) -> ObservedSeries:
    cases = pd.read_csv(cases_path)
    unemp = pd.read_csv(unemployment_path)
    for frame, cols, path in ((cases, ("week", "cases"), cases_path),
                              (unemp, ("month", "unemployment_rate"),
                               unemployment_path)):
        for col in cols:
            if col not in frame.columns:
                raise DomainError(f"{path}: missing column {col!r}")
    return ObservedSeries(
        weekly_cases=cases["cases"].to_numpy(dtype=float),
        monthly_unemployment=unemp["unemployment_rate"].to_numpy(dtype=float),
    )


def write_observed(obs: ObservedSeries, cases_path: str,
                   unemployment_path: str) -> None:
    pd.DataFrame({"week": np.arange(obs.weekly_cases.size),
                  "cases": obs.weekly_cases}).to_csv(cases_path, index=False)
    pd.DataFrame({"month": np.arange(obs.monthly_unemployment.size),
                  "unemployment_rate": obs.monthly_unemployment}).to_csv(
        unemployment_path, index=False)


def weekly_sums(step_values: Sequence[ArrayLike], weeks: int) -> List[ArrayLike]:
    if len(step_values) < weeks * WEEK_STEPS:
        raise DomainError("trajectory shorter than the requested weeks")
    out = []
    for wk in range(weeks):
        acc = step_values[wk * WEEK_STEPS]
        for i in range(1, WEEK_STEPS):
            acc = T.add(acc, step_values[wk * WEEK_STEPS + i])
        out.append(acc)
    return out


def mse(sim_series: Sequence[ArrayLike], observed: np.ndarray) -> ArrayLike:
    observed = np.asarray(observed, dtype=float)
    if len(sim_series) != observed.size:
        raise DomainError(
            f"series length mismatch: {len(sim_series)} vs {observed.size}"
        )
    acc = None
    for sim_t, obs_t in zip(sim_series, observed):
        d = T.sub(sim_t, float(obs_t))
        sq = T.mul(d, d)
        acc = sq if acc is None else T.add(acc, sq)
    return T.div(acc, float(observed.size))


def loss(weekly_sim: Sequence[ArrayLike], monthly_sim: Sequence[ArrayLike],
         observed: ObservedSeries,
         weights: Tuple[float, float] = (1.0, 1.0)) -> Dict[str, ArrayLike]:
    cases = mse(weekly_sim, observed.weekly_cases)
    unemp = mse(monthly_sim, observed.monthly_unemployment)
    total = T.add(T.mul(weights[0], cases), T.mul(weights[1], unemp))
    return {"cases": cases, "unemployment": unemp, "total": total}


@dataclass
class LossReport:
    epoch: int
    mse_cases: float
    mse_unemployment: float
    total: float
    wall_time: float

    def __post_init__(self):
        if self.mse_cases < 0 or self.mse_unemployment < 0 or self.total < 0:
            raise DomainError("losses must be nonnegative")


@dataclass
class CalibrationResult:
    net: CalibNet
    gamma0: Param
    gamma1: Param
    history: List[LossReport] = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = float("inf")


def calibrate(
    config: RunConfig,
    observed: ObservedSeries,
    cov: CovariateSeries,
    epochs: int,
    lr: float = 1e-4,
    hidden: int = 32,
    seed: int = 0,
    net: Optional[CalibNet] = None,
    loss_weights: Tuple[float, float] = (1.0, 1.0),
    allow_stochastic: bool = False,
) -> CalibrationResult:
    """Fit the CalibNet and gamma parameters against observed series.

    Runs in mean-field mode (smooth deterministic loss); pass
    allow_stochastic=True to optimize averaged straight-through gradients
    instead, which is noisier and not the validated path.
    """
    if config.execution.mode != "mean-field" and not allow_stochastic:
        raise DomainError("calibration requires mean-field execution mode")
    sim = Simulation(config)
    horizon = config.execution.horizon_steps
    weeks = horizon // WEEK_STEPS
    months = (horizon + MONTH_STEPS - 1) // MONTH_STEPS
    if observed.weekly_cases.size != weeks:
        raise DomainError(
            f"observed weekly cases has {observed.weekly_cases.size} points,"
            f" horizon implies {weeks}"
        )
    if observed.monthly_unemployment.size != months:
        raise DomainError(
            f"observed unemployment has {observed.monthly_unemployment.size}"
            f" points, horizon implies {months}"
        )
    if cov.steps < horizon:
        raise DomainError("covariate series shorter than the horizon")

    if net is None:
        net = CalibNet(cov.width, hidden=hidden, seed=seed)
    gamma0 = Param("gamma0", config.labor.gamma0, bounds=GAMMA0_BOUNDS)
    gamma1 = Param("gamma1", config.labor.gamma1, bounds=GAMMA1_BOUNDS)
    trainable = net.params() + [gamma0, gamma1]
    opt = Adam(trainable, lr=lr)
    result = CalibrationResult(net=net, gamma0=gamma0, gamma1=gamma1)
    best_state: Dict[Param, np.ndarray] = {}

    for epoch in range(epochs):
        started = time.perf_counter()
        tape = Tape()
        preds = predict_structural(net, cov, tape=tape)
        r0_series = preds["r0"][:horizon]
        iur_series = [preds["iur"][m * MONTH_STEPS] for m in range(months)]
        traj = sim.run(
            r0_series=r0_series,
            gamma0=tape.watch(gamma0),
            gamma1=tape.watch(gamma1),
            iur_series=iur_series,
        )
        taped_cases = traj.taped_new_infections
        if taped_cases is None:
            # stochastic runs carry no case tape; cases enter as constants
            taped_cases = [float(x) for x in traj.new_infections]
        weekly = weekly_sums(taped_cases, weeks)
        parts = loss(weekly, traj.taped_unemployment, observed, loss_weights)
        total_value = float(value_of(parts["total"]))
        if not np.isfinite(total_value):
            raise GradientError(
                f"non-finite loss at epoch {epoch}:"
                f" cases={float(value_of(parts['cases']))!r}"
                f" unemployment={float(value_of(parts['unemployment']))!r}"
            )
        if total_value < result.best_loss:
            # Snapshot before the step: these weights produced this loss.
            result.best_loss = total_value
            result.best_epoch = epoch
            best_state = {p: np.array(p.value, dtype=float, copy=True)
                          for p in trainable}
        grads = tape.backward(parts["total"])
        opt.step(grads)
        result.history.append(LossReport(
            epoch=epoch,
            mse_cases=float(value_of(parts["cases"])),
            mse_unemployment=float(value_of(parts["unemployment"])),
            total=total_value,
            wall_time=time.perf_counter() - started,
        ))

    if best_state:
        for p, val in best_state.items():
            p.value = val
    return result
