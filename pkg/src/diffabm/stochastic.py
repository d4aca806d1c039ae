"""Differentiable discrete sampling and soft conditional operators.

Hard samplers use the straight-through estimator: the forward value is an
exact sample, the backward pass treats the sample as an identity function of
its probability. Gumbel-softmax is offered as a relaxed alternative for
categorical draws; it is unbiased only per-op and accumulates bias when
composed, which callers should weigh when stacking many relaxed draws.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from . import tape as T
from .errors import DomainError
from .rng import RngStream
from .tape import ArrayLike, TapeValue, value_of

_PROB_TOL = 1e-12


def _check_unit_interval(v: np.ndarray, what: str) -> None:
    v = np.asarray(v, dtype=float)
    if np.any(v < -_PROB_TOL) or np.any(v > 1.0 + _PROB_TOL):
        raise DomainError(f"{what} outside [0, 1]")


def bernoulli_st(p: ArrayLike, rng: RngStream, ids: Optional[np.ndarray] = None):
    """Sample b ~ Bernoulli(p) elementwise with straight-through gradient.

    ``p`` may be scalar or a vector; with ``ids`` given, draws are addressed
    per agent id (stable under reordering), otherwise positionally.
    """
    pv = np.asarray(value_of(p), dtype=float)
    _check_unit_interval(pv, "bernoulli probability")
    pv = np.clip(pv, 0.0, 1.0)
    if ids is not None:
        u = rng.uniform_for(ids)
    else:
        u = rng.uniform(pv.shape if pv.ndim else None)
    sample = (np.asarray(u) < pv).astype(float)
    if pv.ndim == 0:
        sample = float(sample)
    if not T.is_taped(p):
        return sample
    return p.tape.append("bernoulli_st", sample, (p.node_id,), (lambda g: g,))


def categorical_st(
    probs: ArrayLike,
    rng: RngStream,
    mode: str = "hard-st",
    tau: float = 0.1,
):
    """Sample from a categorical distribution given on the last axis.

    ``probs`` is (A,) or (n, A) with rows summing to 1. ``hard-st`` returns a
    one-hot array (sampled index = argmax) with straight-through gradient to
    each probability; ``gumbel-softmax`` returns a point on the simplex whose
    argmax is the sample and which sharpens to one-hot as tau -> 0.
    """
    pv = np.asarray(value_of(probs), dtype=float)
    if np.any(pv < -_PROB_TOL):
        raise DomainError("negative category probability")
    pv = np.clip(pv, 0.0, None)
    sums = pv.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise DomainError("category probabilities must sum to 1 within 1e-9")

    if mode == "hard-st":
        u = rng.uniform(pv.shape[:-1] if pv.ndim > 1 else None)
        cdf = np.cumsum(pv, axis=-1)
        idx = np.sum(np.asarray(u)[..., None] >= cdf, axis=-1)
        idx = np.minimum(idx, pv.shape[-1] - 1)
        onehot = np.zeros_like(pv)
        np.put_along_axis(onehot, np.asarray(idx)[..., None], 1.0, axis=-1)
        if not T.is_taped(probs):
            return onehot
        return probs.tape.append(
            "categorical_st", onehot, (probs.node_id,), (lambda g: g,)
        )

    if mode == "gumbel-softmax":
        if tau <= 0:
            raise DomainError("gumbel-softmax temperature must be positive")
        g = rng.gumbel(pv.shape)
        return _gumbel_softmax(probs, np.asarray(g), tau)

    raise DomainError(f"unknown categorical mode {mode!r}")


def _gumbel_softmax(probs: ArrayLike, noise: np.ndarray, tau: float):
    logits = T.log(T.add(probs, 1e-20))
    z = T.div(T.add(logits, noise), tau)
    return softmax(z)


def softmax(z: ArrayLike):
    """Softmax over the last axis; shift-invariant, so the max is folded out."""
    zv = np.asarray(value_of(z), dtype=float)
    shift = zv.max(axis=-1, keepdims=True) if zv.ndim else zv.max()
    e = T.exp(T.sub(z, shift))
    total = T.tsum(e, axis=-1) if zv.ndim > 1 else T.tsum(e)
    if zv.ndim > 1:
        if T.is_taped(total):
            total = total.tape.append(
                "expand", np.asarray(total.value)[..., None],
                (total.node_id,), (lambda g: np.squeeze(g, axis=-1),),
            )
        else:
            total = np.asarray(total)[..., None]
    return T.div(e, total)


def soft_compare(x: ArrayLike, y: ArrayLike, tau: float = 0.1):
    """Soft indicator of x < y: sigmoid((y - x) / tau)."""
    if tau <= 0:
        raise DomainError("soft_compare temperature must be positive")
    return T.sigmoid(T.div(T.sub(y, x), tau))


def soft_logical(a: ArrayLike, b: ArrayLike, kind: str):
    """Differentiable conjunction/disjunction of [0,1]-valued operands."""
    _check_unit_interval(value_of(a), "soft_logical operand")
    _check_unit_interval(value_of(b), "soft_logical operand")
    if kind == "and":
        return T.mul(a, b)
    if kind == "or":
        return T.sub(T.add(a, b), T.mul(a, b))
    raise DomainError(f"unknown logical kind {kind!r}")
