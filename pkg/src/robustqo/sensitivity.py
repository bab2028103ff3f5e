"""Penalty-aware sensitivity analysis of a plan around its selectivity estimates.

Three scores are available: one-at-a-time local expected penalty, Morris
elementary effects along random paths seeded from the error distribution, and
Sobol first-/total-order indices. The analyzed function is always an
:class:`Objective`, i.e. a vectorized ``points -> values`` map with an
evaluation counter. :class:`PenaltyObjective` is the production objective;
:class:`FunctionObjective` wraps analytic test functions.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import plan_space
from .penalty import PenaltySpec, PenaltyVariant, penalties
from .plan_space import CallCounters, JoinGraph, Plan

log = logging.getLogger(__name__)

SOBOL_START_K = 8
MORRIS_START_K = 10
K_CAP = 2**14
DEFAULT_K_MAX = 6
STAND_OUT_SHARE = 0.8
MIN_VARIANCE = 1e-12


class Method(enum.Enum):
    LOCAL = "local"
    MORRIS = "morris"
    SOBOL = "sobol"


# --- objectives ---------------------------------------------------------------------


class Objective:
    """Vectorized objective with an evaluation counter."""

    evaluations: int = 0

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        values = self._evaluate(points)
        self.evaluations += points.shape[0]
        return values

    def _evaluate(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class FunctionObjective(Objective):
    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn
        self.evaluations = 0

    def _evaluate(self, points):
        return np.asarray(self.fn(points), dtype=float)


class PenaltyObjective(Objective):
    """``h(s)``: penalty of a fixed plan against the optimal plan at ``s``.

    Each evaluated point costs one Opt and one Cost call, tallied in
    ``counters``. With ``workers > 1`` the point list is split into contiguous
    chunks evaluated on a thread pool and reassembled in order, so values do
    not depend on the worker count.

    For the variance penalty the per-point quantity is the extra cost over the
    optimum, whose spread is what that penalty measures.
    """

    def __init__(
        self,
        graph: JoinGraph,
        plan: Plan,
        spec: PenaltySpec = PenaltySpec(),
        counters: Optional[CallCounters] = None,
        workers: int = 1,
    ):
        plan_space.validate_plan(graph, plan)
        self.graph = graph
        self.plan = plan
        self.spec = spec
        self.counters = counters if counters is not None else CallCounters()
        self.workers = max(int(workers), 1)
        self.evaluations = 0

    def _chunk(self, points):
        opt = plan_space.optimal_costs(self.graph, points)
        c = plan_space.cost_many(self.graph, self.plan, points)
        if self.spec.variant is PenaltyVariant.VARIANCE:
            return c - opt
        return penalties(self.spec, c, opt)

    def _evaluate(self, points):
        n = points.shape[0]
        if self.workers == 1 or n < 2 * self.workers:
            out = self._chunk(points)
        else:
            parts = np.array_split(points, self.workers)
            with ThreadPoolExecutor(self.workers) as pool:
                out = np.concatenate(list(pool.map(self._chunk, parts)))
        self.counters.opt += n
        self.counters.cost += n
        return out


def penalty_objective(graph: JoinGraph, plan: Plan, s, spec: PenaltySpec = PenaltySpec()) -> float:
    """Single-point ``h(s)``."""
    return float(PenaltyObjective(graph, plan, spec)(np.asarray(s, dtype=float)[None, :])[0])


# --- synthetic input distribution ----------------------------------------------------------


@dataclass(frozen=True)
class UniformBox:
    """Independent uniform inputs; stands in for the error distribution on
    analytic benchmarks."""

    low: np.ndarray
    high: np.ndarray
    active_dims: tuple[int, ...] = None

    def __post_init__(self):
        low = np.asarray(self.low, dtype=float)
        high = np.asarray(self.high, dtype=float)
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        if self.active_dims is None:
            object.__setattr__(self, "active_dims", tuple(range(low.size)))

    @property
    def dimension(self) -> int:
        return self.low.size

    @property
    def anchor(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    @property
    def upper(self):
        return self.high

    def morris_steps(self) -> np.ndarray:
        return 0.05 * (self.high - self.low)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.tile(self.anchor, (n, 1))
        for d in self.active_dims:
            out[:, d] = rng.uniform(self.low[d], self.high[d], size=n)
        return out

    def restrict(self, dims) -> "UniformBox":
        return UniformBox(self.low, self.high, tuple(sorted(dims)))


# --- scores -----------------------------------------------------------------------------


@dataclass
class SensitivityScores:
    method: Method
    per_dim: np.ndarray
    K: int
    evaluations: int
    total_order: Optional[np.ndarray] = None
    total_variance: Optional[float] = None
    first_order_raw: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {
            "method": self.method.value,
            "K": self.K,
            "evaluations": self.evaluations,
            "per_dim": [float(x) for x in self.per_dim],
        }
        if self.total_order is not None:
            out["total_order"] = [float(x) for x in self.total_order]
        if self.total_variance is not None:
            out["total_variance"] = float(self.total_variance)
        return out


@dataclass(frozen=True)
class SensitiveDimensionSet:
    dims: tuple[int, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if not self.dims or len(set(self.dims)) != len(self.dims):
            raise ValueError("sensitive set must hold distinct dimensions")


def local_sensitivity(objective: Objective, dist, dim: int, n: int, rng: np.random.Generator) -> float:
    """Expected objective when only ``dim`` deviates from the anchor."""
    if dim not in dist.active_dims:
        raise ValueError(f"dimension {dim} is frozen")
    points = dist.restrict([dim]).sample(rng, n)
    return float(np.mean(objective(points)))


def local_scores(objective: Objective, dist, n: int, rng: np.random.Generator) -> SensitivityScores:
    before = objective.evaluations
    scores = np.zeros(dist.dimension)
    for d in dist.active_dims:
        scores[d] = max(local_sensitivity(objective, dist, d, n, rng), 0.0)
    return SensitivityScores(Method.LOCAL, scores, n, objective.evaluations - before)


def morris(objective: Objective, dist, K: int, rng: np.random.Generator) -> SensitivityScores:
    """Mean absolute elementary effect per dimension over ``K`` random paths.

    Seeds come from ``dist``. A step that would leave the domain through the
    upper bound goes down instead. Uses exactly ``K * (d_active + 1)``
    objective evaluations.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    active = np.array(dist.active_dims)
    m = active.size
    steps = np.asarray(dist.morris_steps(), dtype=float)
    upper = np.broadcast_to(np.asarray(dist.upper, dtype=float), steps.shape)
    seeds = dist.sample(rng, K)
    orders = [rng.permutation(active) for _ in range(K)]

    points = np.empty((K, m + 1, dist.dimension))
    signed = np.empty((K, m))
    for j in range(K):
        x = seeds[j].copy()
        points[j, 0] = x
        for k, i in enumerate(orders[j]):
            delta = steps[i]
            if x[i] + delta > upper[i]:
                delta = -delta
            x[i] = x[i] + delta
            points[j, k + 1] = x
            signed[j, k] = delta
    values = objective(points.reshape(-1, dist.dimension)).reshape(K, m + 1)

    effects = np.zeros((K, dist.dimension))
    for j in range(K):
        diffs = np.diff(values[j])
        effects[j, orders[j]] = diffs / signed[j]
    scores = np.mean(np.abs(effects), axis=0)
    return SensitivityScores(Method.MORRIS, scores, K, K * (m + 1))


def sobol(objective: Objective, dist, K: int, rng: np.random.Generator) -> SensitivityScores:
    """First- and total-order Sobol indices from ``2K`` draws of ``dist``.

    Uses the pick-freeze matrices ``A``, ``B`` and ``A_B^(i)`` (``A`` with
    column ``i`` taken from ``B``); the total variance is the population
    variance of the pooled ``h(A)`` and ``h(B)``, whose mean is subtracted
    from all outputs first. Exactly
    ``K * (d_active + 2)`` evaluations.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    active = list(dist.active_dims)
    m = len(active)
    A = dist.sample(rng, K)
    B = dist.sample(rng, K)
    blocks = [A, B]
    for i in active:
        AB = A.copy()
        AB[:, i] = B[:, i]
        blocks.append(AB)
    values = objective(np.vstack(blocks)).reshape(m + 2, K)
    pooled = np.concatenate([values[0], values[1]])
    var = float(np.var(pooled))
    # centering leaves every estimator's expectation unchanged and cuts its variance
    values = values - pooled.mean()
    hA, hB = values[0], values[1]

    d = dist.dimension
    first = np.zeros(d)
    total = np.zeros(d)
    raw = np.zeros(d)
    if var >= MIN_VARIANCE:
        for k, i in enumerate(active):
            hAB = values[k + 2]
            v_i = np.mean(hB * (hAB - hA))
            vt_i = 0.5 * np.mean((hAB - hA) ** 2)
            raw[i] = v_i / var
            first[i] = min(max(v_i / var, 0.0), 1.0)
            total[i] = min(max(vt_i / var, 0.0), 1.0)
    return SensitivityScores(Method.SOBOL, first, K, K * (m + 2), total, var, raw)


def select_sensitive(scores: SensitivityScores, k_max: int = DEFAULT_K_MAX) -> SensitiveDimensionSet:
    """Smallest top-scoring prefix holding 80% of the total score, capped at ``k_max``."""
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    values = np.asarray(scores.per_dim, dtype=float)
    total = float(values.sum())
    if total <= 0:
        return SensitiveDimensionSet((0,), (float(values[0]) if values.size else 0.0,))
    order = sorted(range(values.size), key=lambda i: (-values[i], i))
    dims, vals = [], []
    acc = 0.0
    for i in order:
        dims.append(i)
        vals.append(float(values[i]))
        acc += values[i]
        if acc >= STAND_OUT_SHARE * total or len(dims) >= k_max:
            break
    return SensitiveDimensionSet(tuple(dims), tuple(vals))


@dataclass
class ConvergedAnalysis:
    scores: SensitivityScores
    selected: SensitiveDimensionSet
    K: int
    converged: bool
    rounds: int
    evaluations: int


def run_until_converged(
    method: Method,
    objective: Objective,
    dist,
    rng: np.random.Generator,
    k_max: int = DEFAULT_K_MAX,
    k_cap: int = K_CAP,
) -> ConvergedAnalysis:
    """Double ``K`` until two consecutive rounds select the same dimension set."""
    if method is Method.SOBOL:
        run, K = sobol, SOBOL_START_K
    elif method is Method.MORRIS:
        run, K = morris, MORRIS_START_K
    else:
        raise ValueError("auto-convergence supports morris and sobol only")
    previous = None
    rounds = 0
    evaluations = 0
    while True:
        scores = run(objective, dist, K, rng)
        selected = select_sensitive(scores, k_max)
        rounds += 1
        evaluations += scores.evaluations
        if previous is not None and set(previous.dims) == set(selected.dims):
            return ConvergedAnalysis(scores, selected, K, True, rounds, evaluations)
        previous = selected
        if 2 * K > k_cap:
            log.warning("%s did not converge by K=%d", method.value, K)
            return ConvergedAnalysis(scores, selected, K, False, rounds, evaluations)
        K *= 2
