"""Penalty definitions and the Monte-Carlo expected-penalty estimator."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_TAU = 1.2


class PenaltyVariant(enum.Enum):
    THRESHOLD = "threshold"
    PROBABILITY = "probability"
    COST_DIFFERENCE = "cost_difference"
    COST_RATIO = "cost_ratio"
    VARIANCE = "variance"


@dataclass(frozen=True)
class PenaltySpec:
    variant: PenaltyVariant = PenaltyVariant.THRESHOLD
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError("tau must be nonnegative")

    @classmethod
    def parse(cls, variant: str = "threshold", tau: float | None = None) -> "PenaltySpec":
        try:
            v = PenaltyVariant(variant.lower())
        except ValueError:
            raise ValueError(f"unknown penalty variant {variant!r}") from None
        return cls(v, DEFAULT_TAU if tau is None else float(tau))

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "tau": self.tau}

    def __str__(self):
        if self.variant in (PenaltyVariant.THRESHOLD, PenaltyVariant.PROBABILITY):
            return f"{self.variant.value}(tau={self.tau:g})"
        return self.variant.value


@dataclass(frozen=True)
class CostedSample:
    s: np.ndarray
    opt_cost: float
    plan_cost: float


def penalties(spec: PenaltySpec, plan_cost, opt_cost) -> np.ndarray:
    """Elementwise penalty of plan costs relative to optimal costs."""
    c = np.asarray(plan_cost, dtype=float)
    c_opt = np.asarray(opt_cost, dtype=float)
    v = spec.variant
    if v is PenaltyVariant.THRESHOLD:
        return np.where(c <= (1.0 + spec.tau) * c_opt, 0.0, c - c_opt)
    if v is PenaltyVariant.PROBABILITY:
        return (c > (1.0 + spec.tau) * c_opt).astype(float)
    if v is PenaltyVariant.COST_DIFFERENCE:
        return np.maximum(c - c_opt, 0.0)
    if v is PenaltyVariant.COST_RATIO:
        if np.any(c_opt <= 0):
            raise ValueError("cost ratio needs a positive optimal cost")
        return c / c_opt
    raise ValueError("variance penalty requires two-pass estimator; use expected_penalty")


def penalty(spec: PenaltySpec, plan_cost: float, opt_cost: float) -> float:
    """Penalty of one plan cost against the optimal cost at the same point."""
    return float(penalties(spec, plan_cost, opt_cost))


def expected_penalty_arrays(spec: PenaltySpec, plan_costs, opt_costs, weights=None) -> float:
    """Mean penalty over samples, optionally importance-weighted.

    Weights are used unnormalized: the estimate is ``sum(w * p) / n``.
    """
    c = np.asarray(plan_costs, dtype=float)
    c_opt = np.asarray(opt_costs, dtype=float)
    if c.size == 0:
        raise ValueError("expected penalty needs at least one sample")
    w = np.ones_like(c) if weights is None else np.asarray(weights, dtype=float)
    n = c.size
    if spec.variant is PenaltyVariant.VARIANCE:
        delta = c - c_opt
        if weights is None:
            # two-pass form: same quantity as E[X^2] - E[X]^2 without the cancellation
            return float(np.var(delta))
        m1 = np.sum(w * delta) / n
        m2 = np.sum(w * delta * delta) / n
        return float(max(m2 - m1 * m1, 0.0))
    return float(np.sum(w * penalties(spec, c, c_opt)) / n)


def expected_penalty(spec: PenaltySpec, samples: Sequence[CostedSample]) -> float:
    if not samples:
        raise ValueError("expected penalty needs at least one sample")
    return expected_penalty_arrays(
        spec, [x.plan_cost for x in samples], [x.opt_cost for x in samples]
    )
