"""Command-line entry point.

    robustqo --scenario S.json [--seed N] [--out PATH] [--format text|json] COMMAND ...

Commands: profile, analyze, plan, instances, pqo. Exit status is 0 on success,
2 on bad input and 3 when an internal invariant fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from ..error_profiling import ProfileStore, match_querylets
from ..penalty import PenaltySpec
from ..plan_space import PlanError
from ..pqo import AnchorEntry, DEFAULT_KL_SAMPLES
from ..robust_select import DEFAULT_SAMPLES
from ..sensitivity import Method
from . import pipeline
from .pipeline import DEFAULT_OBSERVATIONS, InvariantViolation, stage_seeds
from .report import RunReport, digest
from .scenario import Scenario, ScenarioError, generate_observations, load_scenario

log = logging.getLogger("robustqo")

EXIT_INPUT = 2
EXIT_INVARIANT = 3


def _common(parser: argparse.ArgumentParser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--scenario", default=d(None), help="scenario JSON file")
    parser.add_argument("--seed", type=int, default=d(0))
    parser.add_argument("--out", default=d(None), help="write the report here instead of stdout")
    parser.add_argument("--format", choices=("text", "json"), default=d("text"))
    parser.add_argument("--workers", type=int, default=d(1), help="threads for objective evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustqo", description=__doc__.splitlines()[0])
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _common(common, suppress=True)

    def profiles_args(p):
        p.add_argument("--profiles", help="profile store JSON (default: synthesize from the scenario)")
        p.add_argument("--n-obs", type=int, default=DEFAULT_OBSERVATIONS, help="observations per querylet")

    p = sub.add_parser("profile", parents=[common], help="observations -> profile store")
    p.add_argument("--observations", help="JSON-lines observations (default: synthesize)")
    p.add_argument("--n-obs", type=int, default=DEFAULT_OBSERVATIONS)
    p.add_argument("--store", help="write the profile store here")
    p.add_argument("--write-observations", help="also write the synthesized observations")

    p = sub.add_parser("analyze", parents=[common], help="sensitivity report for the traditional plan")
    p.add_argument("--query")
    p.add_argument("--method", choices=[m.value for m in Method], default="sobol")
    p.add_argument("--k", type=int, help="sample count (fixed-K runs)")
    p.add_argument("--auto-converge", action="store_true")
    p.add_argument("--k-max-dims", type=int, default=6)
    p.add_argument("--penalty")
    p.add_argument("--tau", type=float)
    profiles_args(p)

    for name, help_ in (("plan", "robust plan selection"), ("instances", "cross-instance cost table")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--query")
        p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
        p.add_argument("--penalty")
        p.add_argument("--tau", type=float)
        p.add_argument("--k-max-dims", type=int, default=6)
        profiles_args(p)
        if name == "instances":
            p.add_argument("--instances", nargs="*", help="instance names (default: all)")

    p = sub.add_parser("pqo", parents=[common], help="anchor registration and workload simulation")
    p.add_argument("--anchors", required=True, help="anchor cache file; created if missing")
    p.add_argument("--queries", help="JSON-lines estimate vectors ({\"s_hat\": [...]})")
    p.add_argument("--query", help="anchor query name")
    p.add_argument("--count", type=int, help="workload size when --queries is absent")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--kl-samples", type=int, default=DEFAULT_KL_SAMPLES)
    profiles_args(p)
    return parser


def _spec(scenario: Scenario, args) -> PenaltySpec:
    if getattr(args, "penalty", None) is None and getattr(args, "tau", None) is None:
        return scenario.penalty
    variant = args.penalty or scenario.penalty.variant.value
    tau = args.tau if args.tau is not None else scenario.penalty.tau
    return PenaltySpec.parse(variant, tau)


def _store(scenario: Scenario, args):
    if getattr(args, "profiles", None):
        return ProfileStore.loads(Path(args.profiles).read_text())
    return pipeline.profile_store(scenario, stage_seeds(args.seed)[0], args.n_obs)


def _plan_out(plan) -> dict:
    return {"fingerprint": plan.fingerprint, "tree": plan.render().splitlines()}


def cmd_profile(scenario: Scenario, args):
    if args.observations:
        lines = Path(args.observations).read_text().splitlines()
        store = ProfileStore().ingest_lines(lines)
    else:
        obs = list(generate_observations(scenario, args.n_obs, stage_seeds(args.seed)[0]))
        if args.write_observations:
            Path(args.write_observations).write_text("".join(o.to_line() + "\n" for o in obs))
        store = ProfileStore().ingest(obs)
    if args.store:
        Path(args.store).write_text(store.dumps())
    dist = pipeline.error_distribution(scenario, store, scenario.query()[1]) if scenario.queries else None
    matches = match_querylets(scenario.graph, store.profiles.keys())
    dims = []
    for d in range(scenario.graph.dimension):
        m = dist.models[d] if dist else None
        dims.append(
            {
                "dim": d,
                "label": scenario.graph.dim_label(d),
                "querylets": [q.canonical() for q in matches.get(d, [])],
                "cutoff": m.cutoff if m else None,
                "low": {"mean": m.low.mean, "bandwidth": m.low.bandwidth} if m else None,
                "high": {"mean": m.high.mean, "bandwidth": m.high.bandwidth} if m else None,
            }
        )
    outputs = {
        "profiles": {q.canonical(): len(p.samples) for q, p in sorted(store.profiles.items(), key=lambda kv: kv[0].canonical())},
        "rejected": store.rejected,
        "dimensions": dims,
    }
    return outputs, {}


def cmd_analyze(scenario: Scenario, args):
    store = _store(scenario, args)
    name, s_hat, _ = scenario.query(args.query)
    dist = pipeline.error_distribution(scenario, store, s_hat)
    method = Method(args.method)
    auto = args.auto_converge or (args.k is None and method is not Method.LOCAL)
    a = pipeline.analyze(
        scenario, dist, stage_seeds(args.seed)[1], method, args.k, auto, args.k_max_dims, _spec(scenario, args), args.workers
    )
    labels = [scenario.graph.dim_label(d) for d in range(scenario.graph.dimension)]
    outputs = {
        "query": name,
        "traditional_plan": _plan_out(a.traditional),
        "dimensions": labels,
        "scores": a.scores.to_dict(),
        "sensitive_dims": list(a.selected),
        "sensitive_labels": [labels[d] for d in a.selected],
        "converged": a.converged.converged if a.converged else None,
        "rounds": a.converged.rounds if a.converged else 1,
    }
    return outputs, {"sensitivity": a.counters.snapshot()}


def _pipeline(scenario: Scenario, args):
    return pipeline.run_pipeline(
        scenario,
        args.query,
        args.seed,
        args.samples,
        _spec(scenario, args),
        args.n_obs,
        _store(scenario, args) if args.profiles else None,
        args.k_max_dims,
        workers=args.workers,
    )


def _plan_outputs(scenario: Scenario, r) -> dict:
    labels = [scenario.graph.dim_label(d) for d in range(scenario.graph.dimension)]
    return {
        "query": r.query,
        "s_hat": r.s_hat,
        "sensitive_dims": list(r.analysis.selected),
        "sensitive_labels": [labels[d] for d in r.analysis.selected],
        "sobol_K": r.analysis.scores.K,
        "samples": r.n_samples,
        "pool_size": r.pool_size,
        "robust_plan": _plan_out(r.robust),
        "robust_expected_penalty": r.robust_penalty,
        "traditional_plan": _plan_out(r.traditional),
        "traditional_expected_penalty": r.in_model_penalty(r.traditional.fingerprint),
        "recentered_s": r.recentered_s,
        "recentered_plan": _plan_out(r.recentered),
        "recentered_expected_penalty": r.in_model_penalty(r.recentered.fingerprint),
        "candidates": [
            {"fingerprint": e.fingerprint, "expected_penalty": e.expected_penalty, "anchor_cost": e.anchor_cost}
            for e in sorted(r.evaluations, key=lambda e: e.sort_key())
        ],
    }


def cmd_plan(scenario: Scenario, args):
    r = _pipeline(scenario, args)
    return _plan_outputs(scenario, r), r.counters


def cmd_instances(scenario: Scenario, args):
    r = _pipeline(scenario, args)
    plans = {"robust": r.robust, "traditional": r.traditional, "recentered": r.recentered}
    rows = pipeline.simulate_instances(scenario, plans, args.instances or None, args.query)
    table = []
    for row in rows:
        table.append(
            {
                "instance": row.instance,
                "optimal_cost": row.optimal_cost,
                "costs": row.costs,
                "ratios": {k: row.ratio(k) for k in plans},
            }
        )
    outputs = _plan_outputs(scenario, r)
    outputs["instances"] = table
    outputs["worst_ratio"] = {k: max(t["ratios"][k] for t in table) if table else None for k in plans}
    return outputs, r.counters


def cmd_pqo(scenario: Scenario, args):
    path = Path(args.anchors)
    counters = {}
    if path.exists():
        anchor = AnchorEntry.loads(path.read_text(), scenario.graph)
        registered = False
    else:
        store = _store(scenario, args) if args.profiles else None
        anchor, counters = pipeline.register(scenario, args.seed, args.query, args.samples, args.n_obs, store)
        path.write_text(anchor.dumps())
        registered = True
    rng = stage_seeds(args.seed)[4]
    if args.queries:
        rows = [json.loads(ln) for ln in Path(args.queries).read_text().splitlines() if ln.strip()]
        queries = np.array([r["s_hat"] for r in rows], dtype=float)
    else:
        count = args.count or int(scenario.workload.get("count", 100))
        queries = pipeline.draw_workload(scenario, anchor.s_hat, count, rng)
    decisions, summary, wl_counters = pipeline.run_pqo_workload(scenario, anchor, queries, rng, args.kl_samples)
    counters.update(wl_counters)
    outputs = {
        "template": anchor.template_id,
        "registered": registered,
        "anchor_s_hat": anchor.s_hat,
        "sensitive_dims": list(anchor.sensitive_dims),
        "candidates": [c.fingerprint for c in anchor.candidates],
        "threshold": float(np.log(anchor.n_samples)),
        "decisions": [
            {
                "index": d.index,
                "template": anchor.template_id,
                "kl": d.kl,
                "threshold": d.threshold,
                "outcome": d.outcome.value,
                "chosen": d.chosen,
            }
            for d in decisions
        ],
        "summary": summary,
    }
    return outputs, counters


COMMANDS = {
    "profile": cmd_profile,
    "analyze": cmd_analyze,
    "plan": cmd_plan,
    "instances": cmd_instances,
    "pqo": cmd_pqo,
}


def _configure_logging():
    level = os.environ.get("PARQO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def run(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        if not args.scenario:
            raise ScenarioError("--scenario is required")
        scenario = load_scenario(args.scenario)
        outputs, counters = COMMANDS[args.command](scenario, args)
    except InvariantViolation as exc:
        print(f"robustqo: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ScenarioError, PlanError, ValueError, KeyError, OSError) as exc:
        print(f"robustqo: {exc}", file=sys.stderr)
        return EXIT_INPUT
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "format", "workers")}
    report = RunReport(
        args.command,
        digest(scenario.source, params),
        args.seed,
        outputs,
        counters,
        time.perf_counter() - started,
    )
    text = report.render(args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    log.info("%s finished in %.3fs", args.command, report.wall_time)
    return 0


def main():
    sys.exit(run())
