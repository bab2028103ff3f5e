import json
import math

import numpy as np
import pytest

from robustqo.error_profiling import ProfileStore, build_models, ingest_observations
from robustqo.plan_space import cost, enumerate_all_plans, optimize
from robustqo.pqo import Outcome
from robustqo.workbench import ScenarioError, load_scenario, parse_scenario, run_pipeline
from robustqo.workbench import cli, pipeline
from robustqo.workbench.pipeline import register, run_pqo_workload, simulate_instances, stage_seeds
from robustqo.workbench.scenario import generate_observations

from _support import SCENARIOS, load, scenario_doc


def two_table(bias=1.0, noise=0.0):
    return parse_scenario(
        {
            "version": 1,
            "name": "tt",
            "tables": [
                {"name": "A", "cardinality": 1000, "selection": {
                    "truth": {"family": "loguniform", "low": 1e-3, "high": 1e-1},
                    "estimator": {"bias": bias, "noise": noise},
                }},
                {"name": "B", "cardinality": 100},
            ],
            "joins": [{"left": "A", "right": "B", "truth": {"family": "constant", "value": 0.01}}],
            "queries": {"q": {"s_hat": [0.01, 0.01]}},
        }
    )


# --- scenarios ----------------------------------------------------------------------


def test_bundled_scenarios_load():
    for name in ("trap", "star", "noise_free"):
        sc = load_scenario(SCENARIOS / f"{name}.json")
        assert sc.name == name
        assert len(sc.dims) == sc.graph.dimension


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.update(version=2),
        lambda d: d.pop("tables"),
        lambda d: d["tables"][1].update(selection={"truth": {"family": "zipf"}}),
        lambda d: d["tables"][1].update(selection={"truth": {"family": "loguniform", "low": 0.5, "high": 0.1}}),
        lambda d: d["queries"]["q"].update(s_hat=[0.1, 0.1]),
        lambda d: d["queries"]["q"].update(s_hat=[0.1, 2.0, 0.1]),
        lambda d: d["instances"].append({"name": "x", "cardinality_scale": {"Z": 2}}),
        lambda d: d["instances"].append({"name": "x", "scale": [1, 1]}),
        lambda d: d["joins"].append({"left": "A", "right": "Q", "truth": {"family": "constant", "value": 0.1}}),
    ],
)
def test_invalid_scenarios_are_rejected(mutate):
    doc = scenario_doc("trap")
    mutate(doc)
    with pytest.raises((ScenarioError, ValueError)):
        parse_scenario(doc)


def test_load_rejects_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ScenarioError):
        load_scenario(p)


def test_unknown_query_and_instance():
    sc = load("trap")
    with pytest.raises(ScenarioError):
        sc.query("zzz")
    with pytest.raises(ScenarioError):
        sc.instance("zzz")


# --- observations -------------------------------------------------------------------


def errors_of(sc, n, seed):
    return np.array([math.log(o.estimated / o.actual) for o in generate_observations(sc, n, np.random.default_rng(seed))])


def test_unbiased_noise_free_observations_have_zero_error():
    eps = errors_of(two_table(), 50, 0)
    assert np.allclose(eps, 0.0, atol=1e-12)


def test_bias_four_gives_ln_four():
    sc = two_table(bias=4.0)
    obs = list(generate_observations(sc, 30, np.random.default_rng(0)))
    for o in obs:
        # only the selection's estimator is biased; the join's is exact
        expected = 0.0 if o.querylet.edges else math.log(4)
        assert math.log(o.estimated / o.actual) == pytest.approx(expected, abs=1e-12)
    assert any(not o.querylet.edges for o in obs)


def test_fit_recovers_bias():
    sc = two_table(bias=2.0, noise=0.5)
    store = ingest_observations(generate_observations(sc, 200, np.random.default_rng(11)))
    models = build_models(sc.graph, store)
    eps = np.concatenate([models[0].low.centers, models[0].high.centers])
    assert eps.mean() == pytest.approx(math.log(2), abs=0.1)


def test_observations_are_deterministic_and_validate_n():
    sc = load("star")
    a = [o.to_line() for o in generate_observations(sc, 5, np.random.default_rng(3))]
    b = [o.to_line() for o in generate_observations(sc, 5, np.random.default_rng(3))]
    assert a == b
    with pytest.raises(ValueError):
        list(generate_observations(sc, 0, np.random.default_rng(0)))


# --- pipeline ------------------------------------------------------------------------


def test_noise_free_scenario_keeps_the_traditional_plan():
    r = run_pipeline(load("noise_free"), seed=0, n_samples=60)
    assert r.robust == r.traditional
    assert r.robust_penalty == 0
    assert r.counters["pool"]["opt"] == 60
    assert r.counters["evaluate"] == {"opt": 0, "cost": 60 * r.pool_size}


def test_trap_pipeline_avoids_the_trap_plan_and_is_deterministic():
    sc = load("trap")
    r = run_pipeline(sc, seed=0)
    assert r.robust != r.traditional
    assert r.robust_penalty < r.in_model_penalty(r.traditional.fingerprint)
    s = r.counters["sensitivity"]
    conv = r.analysis.converged
    # auto-convergence from K=8, doubling: every round costs K(d+2)
    per_round = [8 * 2**i * (sc.graph.dimension + 2) for i in range(conv.rounds)]
    assert s["opt"] == s["cost"] == conv.evaluations == sum(per_round)
    r2 = run_pipeline(sc, seed=0)
    assert r2.robust == r.robust
    assert r2.robust_penalty == r.robust_penalty
    assert [e.expected_penalty for e in r2.evaluations] == [e.expected_penalty for e in r.evaluations]


def test_identical_instance_row_equals_base_costs():
    sc = load("noise_free")
    _, _, s_true = sc.query()
    plans = {p.fingerprint: p for p in enumerate_all_plans(sc.graph)[:4]}
    (row,) = simulate_instances(sc, plans, ["same"])
    assert row.costs == {k: cost(sc.graph, p, s_true) for k, p in plans.items()}
    assert row.optimal_cost == optimize(sc.graph, s_true)[1]


def test_reference_column_is_enumeration_minimum():
    for name in ("trap", "star", "noise_free"):
        sc = load(name)
        _, _, base = sc.query()
        for row in simulate_instances(sc, {}):
            graph, s = sc.instance_state(sc.instance(row.instance), base)
            assert row.optimal_cost == min(cost(graph, p, s) for p in enumerate_all_plans(graph))


def test_unknown_instance_raises():
    with pytest.raises(ScenarioError):
        simulate_instances(load("trap"), {}, ["nope"])


# --- PQO workload ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def trap_anchor():
    sc = load("trap")
    anchor, counters = register(sc, 0, n_samples=200)
    return sc, anchor


def test_all_anchor_workload_reuses_everything(trap_anchor):
    sc, anchor = trap_anchor
    queries = np.tile(anchor.s_hat, (6, 1))
    decisions, summary, counters = run_pqo_workload(sc, anchor, queries, np.random.default_rng(0))
    assert summary["reuse_fraction"] == 1.0
    assert counters["reuse"] == {"opt": 0, "cost": 0}
    assert all(d.chosen == anchor.candidates[0].fingerprint for d in decisions)


def test_far_workload_never_reuses(trap_anchor):
    sc, anchor = trap_anchor
    # join errors have bandwidth ~0.02: a shift of 1 in log space gives KL in the
    # thousands under the Gaussian approximation
    queries = np.tile(anchor.s_hat, (5, 1)) * np.array([1.0, math.e, 1.0])
    _, summary, counters = run_pqo_workload(sc, anchor, queries, np.random.default_rng(0))
    assert summary["reuse_fraction"] == 0.0
    assert counters["fallback"]["opt"] == 5


def test_mixed_workload_is_partial_and_deterministic(trap_anchor):
    sc, anchor = trap_anchor
    queries = pipeline.draw_workload(sc, anchor.s_hat, 30, np.random.default_rng(5))
    d1, s1, _ = run_pqo_workload(sc, anchor, queries, np.random.default_rng(1), kl_samples=2000)
    d2, s2, _ = run_pqo_workload(sc, anchor, queries, np.random.default_rng(1), kl_samples=2000)
    assert 0.0 < s1["reuse_fraction"] < 1.0
    assert s1 == s2
    assert [(d.outcome, d.kl, d.chosen) for d in d1] == [(d.outcome, d.kl, d.chosen) for d in d2]
    for d in d1:
        assert (d.outcome is Outcome.REUSE) == (d.kl < d.threshold)


# --- CLI -----------------------------------------------------------------------------


def cli_run(capsys, *argv):
    code = cli.run([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


TRAP = SCENARIOS / "trap.json"
NOISE_FREE = SCENARIOS / "noise_free.json"


@pytest.mark.parametrize(
    "args",
    [
        ["profile"],
        ["analyze", "--method", "morris", "--k", "10"],
        ["analyze", "--method", "local", "--k", "16"],
        ["analyze"],
        ["plan", "--samples", "40"],
        ["instances", "--samples", "40", "--instances", "t0", "t4"],
        ["pqo", "--anchors", "a.json", "--samples", "50", "--count", "5"],
    ],
)
def test_cli_commands_are_reproducible(args, capsys, tmp_path, monkeypatch):
    bodies = []
    for workers, sub in ((1, "r1"), (1, "r2"), (4, "r3")):
        d = tmp_path / sub
        d.mkdir()
        monkeypatch.chdir(d)
        code, out, err = cli_run(capsys, "--scenario", TRAP, "--seed", "3", "--workers", workers, *args)
        assert code == 0, err
        bodies.append(out)
    assert bodies[0] == bodies[1] == bodies[2]
    assert bodies[0].startswith(f"command: \"{args[0]}\"")


def test_cli_json_and_out(capsys, tmp_path):
    out = tmp_path / "r.json"
    code, stdout, _ = cli_run(capsys, "--scenario", NOISE_FREE, "--format", "json", "--out", out, "plan", "--samples", "20")
    assert code == 0 and stdout == ""
    doc = json.loads(out.read_text())
    assert doc["command"] == "plan"
    assert doc["outputs"]["robust_plan"] == doc["outputs"]["traditional_plan"]
    assert doc["outputs"]["robust_expected_penalty"] == 0
    assert doc["counters"]["pool"]["opt"] == 20


def test_cli_subcommand_accepts_global_flags_after_the_command(capsys):
    a = cli_run(capsys, "--scenario", NOISE_FREE, "--seed", "2", "profile", "--n-obs", "20")
    b = cli_run(capsys, "profile", "--scenario", NOISE_FREE, "--seed", "2", "--n-obs", "20")
    assert a[0] == b[0] == 0
    assert a[1] == b[1]


def test_cli_input_errors_exit_two(capsys, tmp_path):
    assert cli_run(capsys, "profile")[0] == 2
    assert cli_run(capsys, "--scenario", tmp_path / "missing.json", "profile")[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 7}))
    code, _, err = cli_run(capsys, "--scenario", bad, "profile")
    assert code == 2 and "version" in err
    assert cli_run(capsys, "--scenario", TRAP, "plan", "--query", "nope")[0] == 2
    assert cli_run(capsys, "--scenario", TRAP, "plan", "--penalty", "nope")[0] == 2


def test_cli_invariant_violation_exits_three(capsys, monkeypatch):
    def broken(*a, **k):
        raise pipeline.InvariantViolation("pool build must use exactly S Opt calls")

    monkeypatch.setattr(pipeline, "run_pipeline", broken)
    code, _, err = cli_run(capsys, "--scenario", TRAP, "plan")
    assert code == 3 and "invariant" in err


def test_profile_store_and_observations_round_trip(capsys, tmp_path):
    store, obs = tmp_path / "s.json", tmp_path / "o.jsonl"
    code, first, _ = cli_run(
        capsys, "--scenario", TRAP, "profile", "--n-obs", "30", "--store", store, "--write-observations", obs
    )
    assert code == 0
    text = store.read_text()
    assert ProfileStore.loads(text).dumps() == text
    store2 = tmp_path / "s2.json"
    code, _, _ = cli_run(capsys, "--scenario", TRAP, "profile", "--observations", obs, "--store", store2)
    assert code == 0
    assert store2.read_text() == text
    # a plan run fed the written store matches the synthesized one
    a = cli_run(capsys, "--scenario", TRAP, "--format", "json", "plan", "--samples", "30", "--n-obs", "30")
    b = cli_run(capsys, "--scenario", TRAP, "--format", "json", "plan", "--samples", "30", "--profiles", store)
    assert json.loads(a[1])["outputs"] == json.loads(b[1])["outputs"]


def test_pqo_anchor_file_round_trips(capsys, tmp_path):
    anchors = tmp_path / "a.json"
    args = ["--scenario", TRAP, "--format", "json", "pqo", "--anchors", anchors, "--samples", "60", "--count", "8"]
    code, first, _ = cli_run(capsys, *args)
    assert code == 0
    text = anchors.read_text()
    code, second, _ = cli_run(capsys, *args)
    assert code == 0
    assert anchors.read_text() == text
    a, b = json.loads(first), json.loads(second)
    assert a["outputs"]["registered"] and not b["outputs"]["registered"]
    assert a["outputs"]["decisions"] == b["outputs"]["decisions"]
    assert b["counters"]["reuse"] == {"opt": 0, "cost": 0}


def test_pqo_explicit_queries(capsys, tmp_path):
    sc = load("trap")
    _, s_hat, _ = sc.query()
    q = tmp_path / "q.jsonl"
    q.write_text(
        json.dumps({"s_hat": s_hat.tolist()}) + "\n" + json.dumps({"s_hat": (s_hat * [1, math.e, 1]).tolist()}) + "\n"
    )
    code, out, _ = cli_run(
        capsys, "--scenario", TRAP, "--format", "json", "pqo", "--anchors", tmp_path / "a.json", "--samples", "40",
        "--queries", q,
    )
    assert code == 0
    outcomes = [d["outcome"] for d in json.loads(out)["outputs"]["decisions"]]
    assert outcomes == ["reuse", "fallback"]


def test_stage_seeds_are_independent_and_stable():
    a = [g.random() for g in stage_seeds(9)]
    b = [g.random() for g in stage_seeds(9)]
    assert a == b
    assert len(set(a)) == 5
