"""End-to-end compositions used by the CLI and the demos."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..error_profiling import (
    MIN_SELECTIVITY,
    JointErrorDistribution,
    ProfileStore,
    build_models,
    ingest_observations,
)
from ..penalty import PenaltySpec, expected_penalty_arrays
from ..plan_space import CallCounters, Plan, PlanSpace, call_tally, cost, cost_many, optimize
from ..pqo import AnchorEntry, Outcome, importance_weights, register_anchor, select_for_query
from ..robust_select import (
    DEFAULT_SAMPLES,
    CandidateEvaluation,
    build_pool,
    choose_robust,
    evaluate_pool,
)
from ..sensitivity import (
    ConvergedAnalysis,
    Method,
    PenaltyObjective,
    SensitivityScores,
    local_scores,
    morris,
    run_until_converged,
    select_sensitive,
    sobol,
)
from .scenario import Scenario, generate_observations

log = logging.getLogger(__name__)

DEFAULT_OBSERVATIONS = 200


class InvariantViolation(RuntimeError):
    """A call-count identity or other internal contract failed."""


def check(condition: bool, message: str):
    if not condition:
        raise InvariantViolation(message)


def stage_seeds(seed: int, n: int = 5) -> list[np.random.Generator]:
    """Independent generators per pipeline stage, derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def profile_store(scenario: Scenario, rng: np.random.Generator, n: int = DEFAULT_OBSERVATIONS) -> ProfileStore:
    return ingest_observations(generate_observations(scenario, n, rng))


def error_distribution(scenario: Scenario, store: ProfileStore, s_hat) -> JointErrorDistribution:
    return JointErrorDistribution(tuple(build_models(scenario.graph, store)), s_hat)


@dataclass
class Analysis:
    traditional: Plan
    scores: SensitivityScores
    selected: tuple[int, ...]
    converged: Optional[ConvergedAnalysis]
    counters: CallCounters


def analyze(
    scenario: Scenario,
    dist: JointErrorDistribution,
    rng: np.random.Generator,
    method: Method = Method.SOBOL,
    K: Optional[int] = None,
    auto_converge: bool = True,
    k_max: int = 6,
    spec: Optional[PenaltySpec] = None,
    workers: int = 1,
) -> Analysis:
    """Sensitivity of the traditional plan at ``dist.anchor``."""
    spec = spec or scenario.penalty
    traditional, _ = optimize(scenario.graph, dist.anchor)
    counters = CallCounters()
    objective = PenaltyObjective(scenario.graph, traditional, spec, counters, workers)
    converged = None
    if method is Method.LOCAL:
        scores = local_scores(objective, dist, K or 256, rng)
    elif auto_converge:
        converged = run_until_converged(method, objective, dist, rng, k_max=k_max)
        scores = converged.scores
    else:
        run = sobol if method is Method.SOBOL else morris
        scores = run(objective, dist, K or (8 if method is Method.SOBOL else 10), rng)
    selected = select_sensitive(scores, k_max)

    m = len(dist.active_dims)
    total = converged.evaluations if converged else scores.evaluations
    check(counters.opt == counters.cost == objective.evaluations == total, "objective call accounting")
    if method is Method.SOBOL:
        check(scores.evaluations == scores.K * (m + 2), "Sobol must use K(d+2) evaluations")
    elif method is Method.MORRIS:
        check(scores.evaluations == scores.K * (m + 1), "Morris must use K(d+1) evaluations")
    return Analysis(traditional, scores, tuple(sorted(selected.dims)), converged, counters)


@dataclass
class PipelineResult:
    query: str
    s_hat: np.ndarray
    dist: JointErrorDistribution
    analysis: Analysis
    traditional: Plan
    recentered_s: np.ndarray
    recentered: Plan
    robust: Plan
    robust_penalty: float
    evaluations: list
    n_samples: int
    pool_size: int
    counters: dict = field(default_factory=dict)

    def in_model_penalty(self, fingerprint: str) -> Optional[float]:
        for e in self.evaluations:
            if e.fingerprint == fingerprint:
                return e.expected_penalty
        return None


def run_pipeline(
    scenario: Scenario,
    query: Optional[str] = None,
    seed: int = 0,
    n_samples: int = DEFAULT_SAMPLES,
    spec: Optional[PenaltySpec] = None,
    n_observations: int = DEFAULT_OBSERVATIONS,
    store: Optional[ProfileStore] = None,
    k_max: int = 6,
    method: Method = Method.SOBOL,
    workers: int = 1,
) -> PipelineResult:
    """Profile, analyze, pool and choose; plus the traditional and recentered
    baselines for comparison."""
    spec = spec or scenario.penalty
    rng_obs, rng_sens, rng_pool, _, _ = stage_seeds(seed)
    name, s_hat, _ = scenario.query(query)
    if store is None:
        store = profile_store(scenario, rng_obs, n_observations)
    dist = error_distribution(scenario, store, s_hat)

    analysis = analyze(scenario, dist, rng_sens, method, k_max=k_max, spec=spec, workers=workers)
    traditional = analysis.traditional

    pool_counters = CallCounters()
    space = PlanSpace(scenario.graph, pool_counters)
    pool, cache = build_pool(space, dist.restrict(analysis.selected), n_samples, rng_pool, include=traditional)
    check(pool_counters.opt == n_samples, "pool build must use exactly S Opt calls")

    eval_counters = CallCounters()
    espace = PlanSpace(scenario.graph, eval_counters)
    evaluated = evaluate_pool(espace, pool, cache, spec)
    check(eval_counters.opt == 0, "pool evaluation must not call Opt")
    check(eval_counters.cost == n_samples * len(pool), "pool evaluation must use S*|pool| Cost calls")
    choice = choose_robust(evaluated)

    rc = dist.recenter()
    recentered, _ = optimize(scenario.graph, rc)
    if recentered.fingerprint not in pool.plans:
        # comparison column only, outside the counted evaluation
        c = cost_many(scenario.graph, recentered, cache.points)
        evaluated = evaluated + [
            CandidateEvaluation(
                recentered.fingerprint,
                recentered,
                expected_penalty_arrays(spec, c, cache.opt_costs),
                cost(scenario.graph, recentered, cache.anchor),
                c,
            )
        ]

    return PipelineResult(
        name,
        s_hat,
        dist,
        analysis,
        traditional,
        rc,
        recentered,
        choice.plan,
        choice.expected_penalty,
        evaluated,
        n_samples,
        len(pool),
        {
            "sensitivity": analysis.counters.snapshot(),
            "pool": pool_counters.snapshot(),
            "evaluate": eval_counters.snapshot(),
        },
    )


@dataclass
class InstanceRow:
    instance: str
    optimal_cost: float
    costs: dict[str, float]

    def ratio(self, label: str) -> float:
        return self.costs[label] / self.optimal_cost


def simulate_instances(
    scenario: Scenario, plans: dict[str, Plan], instances=None, query: Optional[str] = None
) -> list[InstanceRow]:
    """Cost of each labelled plan on every instance, next to that instance's optimum."""
    _, _, base_true = scenario.query(query)
    names = [i.name for i in scenario.instances] if instances is None else list(instances)
    rows = []
    for name in names:
        inst = scenario.instance(name)
        graph, s = scenario.instance_state(inst, base_true)
        _, opt = optimize(graph, s)
        rows.append(InstanceRow(name, opt, {k: cost(graph, p, s) for k, p in plans.items()}))
    return rows


@dataclass
class WorkloadDecision:
    index: int
    s_hat: np.ndarray
    outcome: Outcome
    kl: float
    threshold: float
    chosen: str
    traditional: str
    chosen_penalty: Optional[float]
    traditional_penalty: Optional[float]
    diagnostic: str = ""


def draw_workload(scenario: Scenario, anchor_s: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Estimate vectors ``s_hat * exp(log_sd * z)`` around the anchor."""
    sd = np.broadcast_to(np.asarray(scenario.workload.get("log_sd", 0.5), dtype=float), anchor_s.shape)
    z = rng.standard_normal((count, anchor_s.size))
    return np.clip(anchor_s * np.exp(sd * z), MIN_SELECTIVITY, 1.0)


def run_pqo_workload(
    scenario: Scenario,
    anchor: AnchorEntry,
    queries: np.ndarray,
    rng: np.random.Generator,
    kl_samples: int = 10_000,
) -> tuple[list[WorkloadDecision], dict, dict]:
    """Serve every estimate vector in ``queries`` from ``anchor`` or fall back.

    Reused queries also get the traditional plan's reweighted penalty as a
    comparison column; that costing happens outside the reuse path.
    """
    reuse_calls = {"opt": 0, "cost": 0}
    fallback = CallCounters()
    fb_space = PlanSpace(scenario.graph, fallback)
    spec = anchor.spec
    decisions = []
    chosen_pen, trad_pen = [], []
    for k, s_new in enumerate(np.atleast_2d(queries)):
        before = call_tally()
        d = select_for_query(anchor, s_new, spec, rng, kl_samples)
        after = call_tally()
        for kind in reuse_calls:
            reuse_calls[kind] += after[kind] - before[kind]
        if d.outcome is Outcome.REUSE:
            trad, _ = optimize(scenario.graph, s_new)
            c = cost_many(scenario.graph, trad, anchor.cache.points)
            tp = expected_penalty_arrays(spec, c, anchor.cache.opt_costs, importance_weights(anchor, s_new))
            cp = dict(d.per_candidate)[d.chosen]
            chosen_pen.append(cp)
            trad_pen.append(tp)
            decisions.append(
                WorkloadDecision(
                    k, s_new, d.outcome, d.kl, d.threshold, d.chosen, trad.fingerprint, cp, tp, d.diagnostic
                )
            )
        else:
            trad, _ = fb_space.optimize(s_new)
            decisions.append(
                WorkloadDecision(
                    k, s_new, d.outcome, d.kl, d.threshold, trad.fingerprint, trad.fingerprint, None, None,
                    d.diagnostic,
                )
            )
    check(reuse_calls == {"opt": 0, "cost": 0}, "reuse path must not call Opt or Cost")
    n = len(decisions)
    reused = sum(1 for d in decisions if d.outcome is Outcome.REUSE)
    summary = {
        "queries": n,
        "reused": reused,
        "reuse_fraction": reused / n if n else 0.0,
        "mean_penalty_chosen": float(np.mean(chosen_pen)) if chosen_pen else None,
        "mean_penalty_traditional": float(np.mean(trad_pen)) if trad_pen else None,
    }
    return decisions, summary, {"reuse": reuse_calls, "fallback": fallback.snapshot()}


def register(
    scenario: Scenario,
    seed: int,
    query: Optional[str] = None,
    n_samples: int = DEFAULT_SAMPLES,
    n_observations: int = DEFAULT_OBSERVATIONS,
    store: Optional[ProfileStore] = None,
) -> tuple[AnchorEntry, dict]:
    rng_obs, _, _, rng_anchor, _ = stage_seeds(seed)
    name, s_hat, _ = scenario.query(query)
    if store is None:
        store = profile_store(scenario, rng_obs, n_observations)
    dist = error_distribution(scenario, store, s_hat)
    counters = CallCounters()
    entry = register_anchor(name, scenario.graph, dist, scenario.penalty, n_samples, rng_anchor, counters)
    return entry, {"register": counters.snapshot()}
