"""Per-kernel grouping probabilities and their Gumbel-Softmax relaxation.

Columns are always ordered ``[task-1, shared, task-2]`` (``GROUPS``).
Probabilities are ``softplus(logits)`` normalised per row. Frozen groupings
(used by the baselines) carry exact probabilities instead of logits; they
may contain hard zeros and never enter the tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autograd import Tensor, ops

GROUPS = ("task1", "shared", "task2")
TASK1, SHARED, TASK2 = 0, 1, 2
GUMBEL_CLAMP = 1e-12


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("inverse_softplus is only defined for positive values")
    # log(expm1(y)) loses precision for large y; y + log(1 - exp(-y)) does not
    return np.where(y > 20.0, y + np.log1p(-np.exp(-np.minimum(y, 700.0))), np.log(np.expm1(np.minimum(y, 20.0))))


def logits_for_probs(p: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Logits whose softplus-normalised rows equal ``p``.

    Zero entries are replaced by ``floor`` (softplus is strictly positive),
    after which rows are renormalised.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    p = np.maximum(p, floor)
    p = p / p.sum(axis=1, keepdims=True)
    return inverse_softplus(p)


@dataclass
class GroupingParams:
    """Grouping distribution for the ``K`` kernels of one layer.

    Exactly one of ``logits`` (trainable, ``[K, T+1]``) or ``fixed``
    (frozen probabilities) is set.
    """

    logits: Optional[Tensor] = None
    fixed: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if (self.logits is None) == (self.fixed is None):
            raise ValueError("GroupingParams needs exactly one of logits / fixed")
        if self.fixed is not None:
            f = np.atleast_2d(np.asarray(self.fixed, dtype=np.float64))
            if np.any(f < 0) or not np.allclose(f.sum(axis=1), 1.0, atol=1e-12, rtol=0):
                raise ValueError("fixed grouping probabilities must be non-negative rows summing to 1")
            self.fixed = f

    @classmethod
    def from_probs(cls, p: np.ndarray, trainable: bool = True, name: Optional[str] = None) -> "GroupingParams":
        if trainable:
            return cls(logits=Tensor(logits_for_probs(p), requires_grad=True, name=name))
        return cls(fixed=np.atleast_2d(np.asarray(p, dtype=np.float64)).copy())

    @property
    def trainable(self) -> bool:
        return self.logits is not None

    @property
    def num_kernels(self) -> int:
        return (self.logits.shape if self.logits is not None else self.fixed.shape)[0]

    @property
    def num_groups(self) -> int:
        return (self.logits.shape if self.logits is not None else self.fixed.shape)[1]

    def probs_array(self) -> np.ndarray:
        if self.fixed is not None:
            return self.fixed.copy()
        sp = np.logaddexp(0.0, self.logits.data)
        return sp / sp.sum(axis=1, keepdims=True)


@dataclass
class AssignmentSample:
    """One draw of per-kernel group weights ``z`` ([K, T+1])."""

    z: Tensor
    tau: float
    hard: bool
    gumbel: np.ndarray = field(repr=False)

    def weights(self) -> np.ndarray:
        return self.z.data


@dataclass
class TempSchedule:
    rate: float
    floor: float = 0.10

    def __post_init__(self) -> None:
        if self.rate <= 0 or self.floor <= 0:
            raise ValueError("annealing rate and floor must be positive")


def probs(gp: GroupingParams) -> Tensor:
    """Row-normalised softplus of the logits (constant tensor if frozen)."""
    if gp.fixed is not None:
        return Tensor(gp.fixed)
    sp = ops.softplus(gp.logits)
    return ops.div(sp, ops.sum(sp, axis=1, keepdims=True))


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP, size=shape)
    return -np.log(-np.log(u))


def _one_hot_argmax(y: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y)
    np.put_along_axis(out, y.argmax(axis=1)[:, None], 1.0, axis=1)
    return out


def gsm_sample(gp: GroupingParams, tau: float, rng: Optional[np.random.Generator] = None,
               hard: bool = False, gumbel: Optional[np.ndarray] = None) -> AssignmentSample:
    """Draw ``z = softmax((log p + g) / tau)`` per kernel.

    Pass ``gumbel`` to replay a previous draw's noise. With ``hard=True`` the
    value is the argmax one-hot and the gradient is the relaxed sample's.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    shape = (gp.num_kernels, gp.num_groups)
    if gumbel is None:
        if rng is None:
            raise ValueError("gsm_sample needs an rng or explicit gumbel noise")
        gumbel = sample_gumbel(rng, shape)
    elif gumbel.shape != shape:
        raise ValueError(f"gumbel noise shape {gumbel.shape} does not match {shape}")

    if gp.fixed is not None:
        with np.errstate(divide="ignore"):
            y = (np.log(gp.fixed) + gumbel) / tau
        y = y - y.max(axis=1, keepdims=True)
        e = np.exp(y)
        z = e / e.sum(axis=1, keepdims=True)
        if hard:
            z = _one_hot_argmax(z)
        return AssignmentSample(Tensor(z), tau, hard, gumbel)

    y = ops.mul(ops.add(ops.log(probs(gp)), Tensor(gumbel)), 1.0 / tau)
    z = ops.softmax(y, axis=1)
    if hard:
        z = ops.straight_through(_one_hot_argmax(z.data), z)
    return AssignmentSample(z, tau, hard, gumbel)


def fixed_sample(z: np.ndarray, tau: float = 1.0) -> AssignmentSample:
    """Wrap a given assignment matrix as a constant sample."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    hard = bool(np.all((z == 0) | (z == 1)))
    return AssignmentSample(Tensor(z), tau, hard, np.zeros_like(z))


def temperature(sched: TempSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("step must be non-negative")
    return max(sched.floor, math.exp(-sched.rate * t))


def entropy(gp: GroupingParams) -> Tensor:
    """Per-kernel entropy ``-sum_i p_i log p_i`` (nats)."""
    if gp.fixed is not None:
        p = gp.fixed
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        return Tensor(-terms.sum(axis=1))
    p = probs(gp)
    return ops.neg(ops.sum(ops.mul(p, ops.log(p)), axis=1))
