"""Parametric reuse of robust-plan work across instances of one query template.

An anchor stores the error models, the sample cache and up to three robust
candidates found for one estimate vector. A new estimate vector reuses the
anchor when the KL divergence between the two conditional distributions of
true selectivities is below ``ln(S)``; candidate penalties are then
re-estimated on the cached samples with importance weights.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .error_profiling import ErrorModel, JointErrorDistribution
from .penalty import PenaltySpec, expected_penalty_arrays
from .plan_space import CallCounters, JoinGraph, Plan, PlanSpace, parse_plan
from .robust_select import (
    DEFAULT_SAMPLES,
    DEFAULT_TOP,
    SampleCache,
    build_pool,
    evaluate_pool,
    top_candidates,
)
from .sensitivity import Method, PenaltyObjective, run_until_converged

log = logging.getLogger(__name__)

ANCHOR_VERSION = 1
DEFAULT_KL_SAMPLES = 10_000
DENSITY_FLOOR = 1e-300
_LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)
WEIGHT_DIAGNOSTIC_RANGE = (0.2, 5.0)


class Outcome(enum.Enum):
    REUSE = "reuse"
    FALLBACK = "fallback"


# --- KL test --------------------------------------------------------------------------


def kl_terms(
    dist: JointErrorDistribution,
    other: JointErrorDistribution,
    n_samples: int = DEFAULT_KL_SAMPLES,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Unfloored per-dimension Monte-Carlo KL estimates, over all dimensions.

    For dimension ``i`` errors are drawn from ``dist``'s density at its
    anchor; the same true selectivity expressed in ``other``'s error
    coordinate is shifted by ``ln(anchor'_i / anchor_i)``.
    """
    if dist.dimension != other.dimension:
        raise ValueError("distributions must cover the same dimensions")
    rng = rng if rng is not None else np.random.default_rng()
    terms = np.empty(dist.dimension)
    for i in range(dist.dimension):
        g = dist.models[i].density_for(dist.anchor[i])
        g2 = other.models[i].density_for(other.anchor[i])
        eps = g.sample(rng, n_samples)
        shift = math.log(other.anchor[i] / dist.anchor[i])
        log_p = g.logpdf(eps)
        log_q = np.maximum(g2.logpdf(eps + shift), _LOG_DENSITY_FLOOR)
        terms[i] = float(np.mean(log_p - log_q))
    return terms


def kl_divergence(
    dist: JointErrorDistribution,
    other: JointErrorDistribution,
    n_samples: int = DEFAULT_KL_SAMPLES,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """KL(dist || other) for factorized distributions; each term floored at 0."""
    return float(np.sum(np.maximum(kl_terms(dist, other, n_samples, rng), 0.0)))


def reuse_threshold(n_samples: int) -> float:
    """Largest KL divergence a cache of ``n_samples`` samples is trusted for."""
    if n_samples < 1:
        raise ValueError("need at least one cached sample")
    return math.log(n_samples)


def decide(kl: float, threshold: float) -> Outcome:
    return Outcome.REUSE if kl < threshold else Outcome.FALLBACK


# --- anchors ------------------------------------------------------------------------


@dataclass
class AnchorCandidate:
    plan: Plan
    expected_penalty: float
    anchor_cost: float
    sample_costs: np.ndarray = field(repr=False)

    @property
    def fingerprint(self) -> str:
        return self.plan.fingerprint


@dataclass
class AnchorEntry:
    template_id: str
    graph: JoinGraph = field(repr=False)
    dist: JointErrorDistribution = field(repr=False)
    sensitive_dims: tuple[int, ...]
    cache: SampleCache = field(repr=False)
    candidates: list[AnchorCandidate]
    spec: PenaltySpec = PenaltySpec()

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("anchor needs at least one candidate")
        if tuple(self.cache.active_dims) != tuple(sorted(self.sensitive_dims)):
            raise ValueError("cache was not sampled over the sensitive dimensions")

    @property
    def s_hat(self) -> np.ndarray:
        return self.dist.anchor

    @property
    def n_samples(self) -> int:
        return len(self.cache)

    def to_dict(self) -> dict:
        return {
            "version": ANCHOR_VERSION,
            "template_id": self.template_id,
            "s_hat": self.dist.anchor.tolist(),
            "sensitive_dims": list(self.sensitive_dims),
            "penalty": self.spec.to_dict(),
            "models": [m.to_dict() for m in self.dist.models],
            "cache_entries": [
                {"s": s.tolist(), "plan": fp, "cost": float(c)} for s, fp, c in self.cache.entries()
            ],
            "candidates": [
                {
                    "plan": c.fingerprint,
                    "expected_penalty": c.expected_penalty,
                    "anchor_cost": c.anchor_cost,
                    "costs": c.sample_costs.tolist(),
                }
                for c in self.candidates
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, doc: dict, graph: JoinGraph) -> "AnchorEntry":
        if doc.get("version") != ANCHOR_VERSION:
            raise ValueError(f"unsupported anchor version {doc.get('version')!r}")
        models = tuple(ErrorModel.from_dict(m) for m in doc["models"])
        dist = JointErrorDistribution(models, np.array(doc["s_hat"], dtype=float))
        sens = tuple(int(d) for d in doc["sensitive_dims"])
        entries = doc["cache_entries"]
        cache = SampleCache(
            np.array([e["s"] for e in entries], dtype=float).reshape(len(entries), dist.dimension),
            [e["plan"] for e in entries],
            np.array([e["cost"] for e in entries], dtype=float),
            dist.anchor.copy(),
            tuple(sorted(sens)),
        )
        cands = [
            AnchorCandidate(
                parse_plan(c["plan"], graph),
                float(c["expected_penalty"]),
                float(c["anchor_cost"]),
                np.array(c["costs"], dtype=float),
            )
            for c in doc["candidates"]
        ]
        spec = PenaltySpec.parse(doc["penalty"]["variant"], doc["penalty"]["tau"])
        return cls(doc["template_id"], graph, dist, sens, cache, cands, spec)

    @classmethod
    def loads(cls, text: str, graph: JoinGraph) -> "AnchorEntry":
        return cls.from_dict(json.loads(text), graph)


def register_anchor(
    template_id: str,
    graph: JoinGraph,
    dist: JointErrorDistribution,
    spec: PenaltySpec = PenaltySpec(),
    n_samples: int = DEFAULT_SAMPLES,
    rng: Optional[np.random.Generator] = None,
    counters: Optional[CallCounters] = None,
    k_max: int = 6,
    n_candidates: int = DEFAULT_TOP,
) -> AnchorEntry:
    """Full analysis at ``dist.anchor``: Sobol, candidate pool, top candidates.

    Candidate costs at every cached sample are kept so that reuse needs
    neither Opt nor Cost calls.
    """
    rng = rng if rng is not None else np.random.default_rng()
    space = PlanSpace(graph, counters)
    full = dist.restrict(range(dist.dimension))
    traditional, _ = space.optimize(full.anchor)
    objective = PenaltyObjective(graph, traditional, spec, space.counters)
    analysis = run_until_converged(Method.SOBOL, objective, full, rng, k_max=k_max)
    sens = tuple(sorted(analysis.selected.dims))
    pool, cache = build_pool(space, full.restrict(sens), n_samples, rng, include=traditional)
    evaluated = evaluate_pool(space, pool, cache, spec)
    cands = [
        AnchorCandidate(e.plan, e.expected_penalty, e.anchor_cost, e.sample_costs)
        for e in top_candidates(evaluated, n_candidates)
    ]
    return AnchorEntry(template_id, graph, full, sens, cache, cands, spec)


# --- reuse ---------------------------------------------------------------------------


@dataclass
class PQODecision:
    outcome: Outcome
    kl: float
    threshold: float
    chosen: Optional[str] = None
    per_candidate: tuple[tuple[str, float], ...] = ()
    mean_weight: Optional[float] = None
    diagnostic: str = ""

    def __post_init__(self):
        if self.outcome is Outcome.REUSE and not self.kl < self.threshold:
            raise ValueError("reuse requires kl below the threshold")


def importance_weights(anchor: AnchorEntry, s_new) -> np.ndarray:
    """Density ratio of the new over the anchor distribution at each cached
    sample, over the anchor's sensitive dimensions."""
    here = anchor.dist.restrict(anchor.sensitive_dims)
    there = here.with_anchor(np.asarray(s_new, dtype=float))
    pts = anchor.cache.points
    return np.exp(there.active_log_density(pts) - here.active_log_density(pts))


def reweighted_penalties(anchor: AnchorEntry, s_new, spec: Optional[PenaltySpec] = None, weights=None):
    spec = spec or anchor.spec
    w = importance_weights(anchor, s_new) if weights is None else weights
    return [
        (c, expected_penalty_arrays(spec, c.sample_costs, anchor.cache.opt_costs, w))
        for c in anchor.candidates
    ]


def select_for_query(
    anchor: AnchorEntry,
    s_new,
    spec: Optional[PenaltySpec] = None,
    rng: Optional[np.random.Generator] = None,
    kl_samples: int = DEFAULT_KL_SAMPLES,
) -> PQODecision:
    """Reuse the anchor for ``s_new`` if the KL test passes, else signal fallback."""
    s_new = np.asarray(s_new, dtype=float)
    if s_new.shape != anchor.s_hat.shape:
        raise ValueError("estimate vector has the wrong dimensionality")
    threshold = reuse_threshold(anchor.n_samples)
    kl = kl_divergence(anchor.dist, anchor.dist.with_anchor(s_new), kl_samples, rng)
    if decide(kl, threshold) is Outcome.FALLBACK:
        return PQODecision(Outcome.FALLBACK, kl, threshold)
    w = importance_weights(anchor, s_new)
    if not np.any(w > 0):
        return PQODecision(Outcome.FALLBACK, kl, threshold, diagnostic="all importance weights are zero")
    mean_w = float(np.mean(w))
    diag = ""
    lo, hi = WEIGHT_DIAGNOSTIC_RANGE
    if not lo <= mean_w <= hi:
        diag = f"mean importance weight {mean_w:.3g} outside [{lo}, {hi}]"
        log.warning("%s: %s", anchor.template_id, diag)
    scored = reweighted_penalties(anchor, s_new, spec, w)
    scored.sort(key=lambda t: (t[1], t[0].anchor_cost, t[0].fingerprint))
    return PQODecision(
        Outcome.REUSE,
        kl,
        threshold,
        scored[0][0].fingerprint,
        tuple((c.fingerprint, p) for c, p in scored),
        mean_w,
        diag,
    )
