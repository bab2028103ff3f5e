import math

import numpy as np
import pytest

from robustqo.penalty import PenaltySpec, PenaltyVariant
from robustqo.plan_space import CallCounters, JoinGraph, cost, enumerate_all_plans, optimize, parse_plan
from robustqo.sensitivity import (
    FunctionObjective,
    Method,
    PenaltyObjective,
    SensitivityScores,
    UniformBox,
    local_scores,
    local_sensitivity,
    morris,
    penalty_objective,
    run_until_converged,
    select_sensitive,
    sobol,
)

from _support import gaussian_dist

# A(1000, local selection) -- B(500); the best plan flips near sel(A) = 0.125 and 0.5
FLIP = JoinGraph.build([("A", 1000, True), ("B", 500, False)], [("A", "B")])


def scores(values, method=Method.SOBOL):
    return SensitivityScores(method, np.asarray(values, dtype=float), 1, 1)


def ishigami(x, a=7.0, b=0.1):
    return np.sin(x[:, 0]) + a * np.sin(x[:, 1]) ** 2 + b * x[:, 2] ** 4 * np.sin(x[:, 0])


def ishigami_indices(a=7.0, b=0.1):
    v1 = 0.5 * (1 + b * math.pi**4 / 5) ** 2
    v2 = a * a / 8
    v13 = b * b * math.pi**8 * (1 / 18 - 1 / 50)
    var = v1 + v2 + v13
    return (v1 / var, v2 / var, 0.0), ((v1 + v13) / var, v2 / var, v13 / var)


# --- objective ----------------------------------------------------------------------------


def test_penalty_objective_zero_at_anchor():
    s = np.array([0.1, 0.001])
    plan, _ = optimize(FLIP, s)
    assert penalty_objective(FLIP, plan, s) == 0


def test_penalty_objective_positive_when_forced_suboptimal():
    # NL wins at sel(A)=0.01 but loses by ~2x at sel(A)=1
    plan = parse_plan("(A ⋈NL B)", FLIP)
    s = np.array([1.0, 0.001])
    best = min(cost(FLIP, p, s) for p in enumerate_all_plans(FLIP))
    expected = cost(FLIP, plan, s) - best
    assert expected > 0
    assert penalty_objective(FLIP, plan, s, PenaltySpec(tau=0.5)) == expected
    prob = penalty_objective(FLIP, plan, s, PenaltySpec(PenaltyVariant.PROBABILITY, 0.5))
    assert prob == 1.0


def test_probability_objective_is_indicator():
    plan = parse_plan("(A ⋈NL B)", FLIP)
    obj = PenaltyObjective(FLIP, plan, PenaltySpec(PenaltyVariant.PROBABILITY, 0.2))
    dist = gaussian_dist([0.1, 0.001], 1.5)
    vals = obj(dist.sample(np.random.default_rng(0), 500))
    assert set(np.unique(vals)) <= {0.0, 1.0}
    assert 0 < vals.mean() < 1


def test_objective_counts_opt_and_cost():
    counters = CallCounters()
    plan, _ = optimize(FLIP, np.array([0.1, 0.001]))
    obj = PenaltyObjective(FLIP, plan, counters=counters)
    obj(np.tile([0.1, 0.001], (7, 1)))
    assert obj.evaluations == 7 and counters.snapshot() == {"opt": 7, "cost": 7}


def test_objective_worker_invariance():
    plan, _ = optimize(FLIP, np.array([0.1, 0.001]))
    pts = gaussian_dist([0.1, 0.001], 1.0).sample(np.random.default_rng(3), 1001)
    one = PenaltyObjective(FLIP, plan, workers=1)(pts)
    four = PenaltyObjective(FLIP, plan, workers=4)(pts)
    assert np.array_equal(one, four)


# --- local ----------------------------------------------------------------------------------


def test_local_degenerate_model_is_zero():
    s = np.array([0.1, 0.001])
    plan, _ = optimize(FLIP, s)
    dist = gaussian_dist(s, 1e-3)
    assert local_sensitivity(PenaltyObjective(FLIP, plan), dist, 0, 200, np.random.default_rng(0)) == 0


def test_local_zero_for_dimension_that_never_changes_plan_choice():
    s = np.array([0.1, 0.001])
    plan, _ = optimize(FLIP, s)
    # oracle: over the join dimension's whole support the argmin never moves
    for j in np.exp(np.linspace(np.log(1e-9), 0, 200)):
        pt = np.array([0.1, j])
        costs = {p.fingerprint: cost(FLIP, p, pt) for p in enumerate_all_plans(FLIP)}
        assert min(costs, key=lambda k: (costs[k], k)) == plan.fingerprint
    dist = gaussian_dist(s, 2.0)
    obj = PenaltyObjective(FLIP, plan, PenaltySpec(tau=0.5))
    assert local_sensitivity(obj, dist, 1, 500, np.random.default_rng(1)) == 0
    assert local_sensitivity(obj, dist, 0, 500, np.random.default_rng(1)) > 0


def test_local_determinism_and_frozen_error():
    s = np.array([0.1, 0.001])
    plan, _ = optimize(FLIP, s)
    dist = gaussian_dist(s, 1.0, active=(0,))
    obj = PenaltyObjective(FLIP, plan)
    a = local_sensitivity(obj, dist, 0, 300, np.random.default_rng(5))
    b = local_sensitivity(obj, dist, 0, 300, np.random.default_rng(5))
    assert a == b
    with pytest.raises(ValueError):
        local_sensitivity(obj, dist, 1, 10, np.random.default_rng(0))
    sc = local_scores(obj, dist, 50, np.random.default_rng(0))
    assert sc.per_dim[1] == 0 and sc.evaluations == 50


# --- Morris ---------------------------------------------------------------------------------


def test_morris_constant_objective():
    g = JoinGraph.build([("A", 100, True)], [])
    plan, _ = optimize(g, np.array([0.5]))
    obj = PenaltyObjective(g, plan)
    sc = morris(obj, gaussian_dist([0.5], 1.0), 20, np.random.default_rng(0))
    assert np.all(sc.per_dim == 0)


@pytest.mark.parametrize("a,b", [(3.0, -2.0), (0.5, 7.25), (-1e3, 1e-2)])
def test_morris_linear_exact(a, b):
    obj = FunctionObjective(lambda x: a * x[:, 0] + b * x[:, 1])
    dist = gaussian_dist([0.2, 0.9, 0.5], 0.8)
    K = 25
    sc = morris(obj, dist, K, np.random.default_rng(11))
    assert sc.per_dim == pytest.approx([abs(a), abs(b), 0.0], abs=1e-9 * max(abs(a), abs(b)))
    assert sc.evaluations == obj.evaluations == K * (3 + 1)


def test_morris_steps_down_at_upper_bound():
    # anchor at 1: every upward step would leave the domain
    obj = FunctionObjective(lambda x: 4.0 * x[:, 0])
    dist = gaussian_dist([1.0], 1e-3)
    sc = morris(obj, dist, 10, np.random.default_rng(0))
    assert sc.per_dim[0] == pytest.approx(4.0, rel=1e-9)


def test_morris_frozen_dims_score_zero():
    obj = FunctionObjective(lambda x: x.sum(axis=1))
    dist = gaussian_dist([0.2, 0.2, 0.2], 0.5, active=(0, 2))
    sc = morris(obj, dist, 8, np.random.default_rng(0))
    assert sc.per_dim[1] == 0 and sc.evaluations == 8 * 3


def test_morris_on_uniform_box_uses_box_steps():
    obj = FunctionObjective(lambda x: 2 * x[:, 0] - 5 * x[:, 1])
    box = UniformBox(np.array([-1.0, 0.0]), np.array([1.0, 10.0]))
    sc = morris(obj, box, 30, np.random.default_rng(0))
    assert sc.per_dim == pytest.approx([2.0, 5.0], rel=1e-9)


# --- Sobol ----------------------------------------------------------------------------------


def test_sobol_single_factor():
    obj = FunctionObjective(lambda x: x[:, 0])
    box = UniformBox(np.zeros(3), np.ones(3))
    sc = sobol(obj, box, 4096, np.random.default_rng(0))
    assert sc.per_dim == pytest.approx([1, 0, 0], abs=0.05)
    assert sc.evaluations == 4096 * 5


def test_sobol_additive_shares():
    obj = FunctionObjective(lambda x: x[:, 0] + x[:, 1])
    box = UniformBox(np.zeros(2), np.ones(2))
    sc = sobol(obj, box, 4096, np.random.default_rng(1))
    assert sc.per_dim == pytest.approx([0.5, 0.5], abs=0.05)


def test_ishigami_reference_values():
    s, st = ishigami_indices()
    assert s == pytest.approx((0.3139, 0.4424, 0.0), abs=1e-4)
    assert st == pytest.approx((0.5576, 0.4424, 0.2437), abs=1e-4)


def test_ishigami_moderate_k():
    s_ref, st_ref = ishigami_indices()
    box = UniformBox(np.full(3, -math.pi), np.full(3, math.pi))
    sc = sobol(FunctionObjective(ishigami), box, 2**12, np.random.default_rng(7))
    assert sc.per_dim == pytest.approx(s_ref, abs=0.1)
    assert sc.total_order == pytest.approx(st_ref, abs=0.1)


@pytest.mark.parametrize(
    "fn",
    [ishigami, lambda x: x[:, 0] * x[:, 1] + x[:, 2], lambda x: np.exp(x[:, 0]) + x[:, 1] ** 2],
)
def test_first_order_not_above_total(fn):
    box = UniformBox(np.full(3, -math.pi), np.full(3, math.pi))
    sc = sobol(FunctionObjective(fn), box, 2**12, np.random.default_rng(2))
    assert np.all(sc.per_dim <= sc.total_order + 0.05)


def test_sobol_constant_objective_all_zero():
    sc = sobol(FunctionObjective(lambda x: np.full(len(x), 3.0)), UniformBox(np.zeros(2), np.ones(2)), 16, np.random.default_rng(0))
    assert np.all(sc.per_dim == 0) and np.all(sc.total_order == 0)
    assert sc.total_variance == 0


def test_sobol_indices_clamped_and_counted():
    obj = FunctionObjective(lambda x: x[:, 0] ** 3)
    dist = gaussian_dist([0.5, 0.5, 0.5, 0.5], 0.4, active=(0, 3))
    sc = sobol(obj, dist, 8, np.random.default_rng(0))
    assert np.all((sc.per_dim >= 0) & (sc.per_dim <= 1))
    assert np.all((sc.total_order >= 0) & (sc.total_order <= 1))
    assert sc.per_dim[1] == sc.per_dim[2] == 0
    assert sc.evaluations == obj.evaluations == 8 * (2 + 2)


def test_sobol_deterministic():
    box = UniformBox(np.full(3, -math.pi), np.full(3, math.pi))
    a = sobol(FunctionObjective(ishigami), box, 256, np.random.default_rng(4))
    b = sobol(FunctionObjective(ishigami), box, 256, np.random.default_rng(4))
    assert np.array_equal(a.per_dim, b.per_dim) and np.array_equal(a.total_order, b.total_order)


def test_sobol_rejects_tiny_k():
    with pytest.raises(ValueError):
        sobol(FunctionObjective(ishigami), UniformBox(np.zeros(3), np.ones(3)), 1, np.random.default_rng(0))


def test_sobol_penalty_objective_worker_invariance():
    s = np.array([0.1, 0.001])
    plan, _ = optimize(FLIP, s)
    dist = gaussian_dist(s, 1.0)
    a = sobol(PenaltyObjective(FLIP, plan, workers=1), dist, 64, np.random.default_rng(0))
    b = sobol(PenaltyObjective(FLIP, plan, workers=3), dist, 64, np.random.default_rng(0))
    assert np.array_equal(a.per_dim, b.per_dim) and a.total_variance == b.total_variance


# --- selection ------------------------------------------------------------------------------


def test_select_examples():
    assert select_sensitive(scores([0.9, 0.05, 0.05]), 6).dims == (0,)
    assert select_sensitive(scores([0.1] * 10), 3).dims == (0, 1, 2)
    assert select_sensitive(scores([0, 0, 0])).dims == (0,)
    assert select_sensitive(scores([0.1, 0.5, 0.4]), 6).dims == (1, 2)
    sel = select_sensitive(scores([0.2, 0.2, 0.6]))
    assert sel.dims == (2, 0) and sel.scores == (0.6, 0.2)
    with pytest.raises(ValueError):
        select_sensitive(scores([1.0]), 0)


# --- convergence ----------------------------------------------------------------------------


def test_single_dimension_converges_at_first_doubling():
    obj = FunctionObjective(lambda x: x[:, 0] ** 2)
    r = run_until_converged(Method.SOBOL, obj, gaussian_dist([0.3], 0.5), np.random.default_rng(0))
    assert r.converged and r.K == 16 and r.rounds == 2
    assert r.evaluations == obj.evaluations == (8 + 16) * 3
    r = run_until_converged(Method.MORRIS, FunctionObjective(lambda x: x[:, 0]), gaussian_dist([0.3], 0.5), np.random.default_rng(0))
    assert r.converged and r.K == 20


def test_dominant_dimension_found():
    obj = FunctionObjective(lambda x: 100 * x[:, 1] + 0.1 * x[:, 0] + 0.1 * x[:, 2])
    r = run_until_converged(Method.SOBOL, obj, gaussian_dist([0.3, 0.3, 0.3], 0.5), np.random.default_rng(0))
    assert r.converged and set(r.selected.dims) == {1}
    assert r.K >= 16


def test_cap_without_agreement_is_flagged():
    rng_values = np.random.default_rng(123)
    # pure noise objective: the selected set keeps changing
    obj = FunctionObjective(lambda x: rng_values.standard_normal(len(x)))
    r = run_until_converged(Method.SOBOL, obj, gaussian_dist([0.3] * 6, 0.5), np.random.default_rng(0), k_max=2, k_cap=32)
    assert r.K <= 32
    if not r.converged:
        assert r.rounds == 3


def test_local_method_not_auto_convergent():
    with pytest.raises(ValueError):
        run_until_converged(Method.LOCAL, FunctionObjective(lambda x: x[:, 0]), gaussian_dist([0.3], 0.5), np.random.default_rng(0))
