"""Robust plan selection by minimum expected penalty over a sampled candidate pool."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .error_profiling import JointErrorDistribution
from .penalty import PenaltySpec, expected_penalty_arrays
from .plan_space import Plan, PlanSpace, cost

DEFAULT_SAMPLES = 100
DEFAULT_TOP = 3


@dataclass
class SampleCache:
    """Sampled selectivities with the optimal plan and cost at each."""

    points: np.ndarray  # (S, d)
    opt_fingerprints: list[str]
    opt_costs: np.ndarray  # (S,)
    anchor: np.ndarray
    active_dims: tuple[int, ...]

    def __len__(self):
        return self.points.shape[0]

    def entries(self):
        return zip(self.points, self.opt_fingerprints, self.opt_costs)


@dataclass
class CandidatePool:
    plans: dict[str, Plan] = field(default_factory=dict)
    occurrence_counts: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.plans)

    def add(self, plan: Plan, count: int = 1):
        fp = plan.fingerprint
        self.plans.setdefault(fp, plan)
        self.occurrence_counts[fp] = self.occurrence_counts.get(fp, 0) + count


@dataclass(frozen=True)
class CandidateEvaluation:
    fingerprint: str
    plan: Plan
    expected_penalty: float
    anchor_cost: float
    sample_costs: np.ndarray = field(repr=False, compare=False)

    def sort_key(self):
        return (self.expected_penalty, self.anchor_cost, self.fingerprint)


@dataclass(frozen=True)
class RobustChoice:
    plan: Plan
    expected_penalty: float
    per_candidate: tuple[tuple[str, float], ...]


def build_pool(
    space: PlanSpace,
    dist: JointErrorDistribution,
    n_samples: int = DEFAULT_SAMPLES,
    rng: Optional[np.random.Generator] = None,
    include: Optional[Plan] = None,
) -> tuple[CandidatePool, SampleCache]:
    """Draw ``n_samples`` points from ``dist``, optimize each, pool the optima.

    ``dist`` should already be restricted to the sensitive dimensions.
    ``include`` (normally the traditional plan) joins the pool with count 0 if
    no sample produced it; it costs no extra Opt call.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = rng if rng is not None else np.random.default_rng()
    points = dist.sample(rng, n_samples)
    pool = CandidatePool()
    fps, costs = [], np.empty(n_samples)
    for k, s in enumerate(points):
        plan, c = space.optimize(s)
        pool.add(plan)
        fps.append(plan.fingerprint)
        costs[k] = c
    if include is not None and include.fingerprint not in pool.plans:
        pool.add(include, count=0)
    cache = SampleCache(points, fps, costs, dist.anchor.copy(), dist.active_dims)
    return pool, cache


def evaluate_pool(
    space: PlanSpace, pool: CandidatePool, cache: SampleCache, spec: PenaltySpec = PenaltySpec()
) -> list[CandidateEvaluation]:
    """Expected penalty of every pooled plan over the cached samples.

    One Cost call per (candidate, sample) pair and no Opt calls. The anchor
    cost used for tie-breaking is computed outside the counted path.
    """
    if len(cache) == 0:
        raise ValueError("empty sample cache")
    out = []
    for fp in sorted(pool.plans):
        plan = pool.plans[fp]
        c = space.cost_many(plan, cache.points)
        out.append(
            CandidateEvaluation(
                fp,
                plan,
                expected_penalty_arrays(spec, c, cache.opt_costs),
                cost(space.graph, plan, cache.anchor),
                c,
            )
        )
    return out


def rank(evaluated: Sequence[CandidateEvaluation]) -> list[CandidateEvaluation]:
    """Ascending expected penalty, then anchor cost, then fingerprint."""
    return sorted(evaluated, key=CandidateEvaluation.sort_key)


def choose_robust(evaluated: Sequence[CandidateEvaluation]) -> RobustChoice:
    if not evaluated:
        raise ValueError("no candidates to choose from")
    ranked = rank(evaluated)
    best = ranked[0]
    return RobustChoice(
        best.plan, best.expected_penalty, tuple((e.fingerprint, e.expected_penalty) for e in ranked)
    )


def top_candidates(evaluated: Sequence[CandidateEvaluation], n: int = DEFAULT_TOP) -> list[CandidateEvaluation]:
    if n < 1:
        raise ValueError("n must be at least 1")
    return rank(evaluated)[:n]
