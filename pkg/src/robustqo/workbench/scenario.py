"""Scenario files and synthetic workload observations.

A scenario is a JSON document describing one query template (tables, joins,
local selections), how true selectivities and the estimator's guesses are
generated for every dimension, named estimate vectors ("queries"), shifted
database instances and the parameter distribution of a PQO workload.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from ..error_profiling import MIN_SELECTIVITY, Observation, QueryletId
from ..penalty import PenaltySpec
from ..plan_space import JoinGraph

SCENARIO_VERSION = 1
FAMILIES = ("constant", "loguniform", "beta")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class TruthGenerator:
    family: str
    params: dict

    def __post_init__(self):
        p = self.params
        if self.family == "constant":
            ok = 0 < p.get("value", -1) <= 1
        elif self.family == "loguniform":
            ok = 0 < p.get("low", -1) <= p.get("high", -1) <= 1
        elif self.family == "beta":
            ok = p.get("a", -1) > 0 and p.get("b", -1) > 0
        else:
            raise ScenarioError(f"unknown generator family {self.family!r}; expected one of {FAMILIES}")
        if not ok:
            raise ScenarioError(f"bad parameters for {self.family} generator: {p}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = self.params
        if self.family == "constant":
            return np.full(n, float(p["value"]))
        if self.family == "loguniform":
            return np.exp(rng.uniform(math.log(p["low"]), math.log(p["high"]), size=n))
        return np.clip(rng.beta(p["a"], p["b"], size=n), MIN_SELECTIVITY, 1.0)

    @classmethod
    def from_dict(cls, doc) -> "TruthGenerator":
        doc = dict(doc)
        return cls(doc.pop("family"), doc)


@dataclass(frozen=True)
class EstimatorModel:
    """``estimate = actual * bias * exp(noise * z)``, times ``outlier_factor``
    with probability ``outlier_prob``; clipped into ``(0, 1]``."""

    bias: float = 1.0
    noise: float = 0.0
    outlier_prob: float = 0.0
    outlier_factor: float = 1.0

    def __post_init__(self):
        if not (self.bias > 0 and self.noise >= 0 and 0 <= self.outlier_prob <= 1 and self.outlier_factor > 0):
            raise ScenarioError(f"bad estimator parameters: {self}")

    def estimate(self, rng: np.random.Generator, actual: np.ndarray) -> np.ndarray:
        n = actual.size
        z = rng.standard_normal(n)
        u = rng.uniform(size=n)
        factor = np.where(u < self.outlier_prob, self.outlier_factor, 1.0)
        est = actual * self.bias * np.exp(self.noise * z) * factor
        return np.clip(est, MIN_SELECTIVITY, 1.0)


@dataclass(frozen=True)
class DimensionSpec:
    truth: TruthGenerator
    estimator: EstimatorModel


@dataclass(frozen=True)
class Instance:
    name: str
    s_true: Optional[tuple[float, ...]] = None
    scale: Optional[tuple[float, ...]] = None
    cardinality_scale: dict = field(default_factory=dict)


@dataclass
class Scenario:
    name: str
    graph: JoinGraph
    dims: list[DimensionSpec]
    penalty: PenaltySpec
    queries: dict[str, dict]
    instances: list[Instance]
    workload: dict
    source: dict = field(repr=False, default_factory=dict)

    def query(self, name: Optional[str] = None) -> tuple[str, np.ndarray, np.ndarray]:
        """``(name, s_hat, s_true)``; the first query when ``name`` is None."""
        if not self.queries:
            raise ScenarioError("scenario defines no queries")
        if name is None:
            name = next(iter(self.queries))
        if name not in self.queries:
            raise ScenarioError(f"unknown query {name!r}")
        q = self.queries[name]
        s_hat = _vector(q["s_hat"], self.graph.dimension, f"query {name}: s_hat")
        s_true = _vector(q.get("s_true", q["s_hat"]), self.graph.dimension, f"query {name}: s_true")
        return name, s_hat, s_true

    def instance(self, name: str) -> Instance:
        for inst in self.instances:
            if inst.name == name:
                return inst
        raise ScenarioError(f"unknown instance {name!r}")

    def instance_state(self, inst: Instance, base_true: np.ndarray) -> tuple[JoinGraph, np.ndarray]:
        if inst.s_true is not None:
            s = np.array(inst.s_true, dtype=float)
        elif inst.scale is not None:
            s = np.clip(base_true * np.array(inst.scale, dtype=float), MIN_SELECTIVITY, 1.0)
        else:
            s = base_true.copy()
        return self.graph.with_cardinalities(inst.cardinality_scale), s

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.source).encode()).hexdigest()[:16]


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _vector(values, d: int, what: str) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.shape != (d,):
        raise ScenarioError(f"{what}: expected {d} values, got {v.size}")
    if not (np.all(v > 0) and np.all(v <= 1)):
        raise ScenarioError(f"{what}: selectivities must lie in (0, 1]")
    return v


def _dim_spec(doc, where: str) -> DimensionSpec:
    if "truth" not in doc:
        raise ScenarioError(f"{where}: missing 'truth' generator")
    return DimensionSpec(
        TruthGenerator.from_dict(doc["truth"]), EstimatorModel(**doc.get("estimator", {}))
    )


def parse_scenario(doc: dict) -> Scenario:
    if doc.get("version") != SCENARIO_VERSION:
        raise ScenarioError(f"unsupported scenario version {doc.get('version')!r}")
    try:
        tables = doc["tables"]
        joins = doc.get("joins", [])
        graph = JoinGraph.build(
            [(t["name"], t["cardinality"], t.get("selection") is not None) for t in tables],
            [(j["left"], j["right"]) for j in joins],
        )
        dims: list[DimensionSpec] = []
        for t in tables:
            if t.get("selection") is not None:
                dims.append(_dim_spec(t["selection"], f"table {t['name']}"))
        for j in joins:
            dims.append(_dim_spec(j, f"join {j['left']}-{j['right']}"))
        pen = doc.get("penalty", {})
        spec = PenaltySpec.parse(pen.get("variant", "threshold"), pen.get("tau"))
        instances = []
        for inst in doc.get("instances", []):
            instances.append(
                Instance(
                    inst["name"],
                    tuple(inst["s_true"]) if "s_true" in inst else None,
                    tuple(inst["scale"]) if "scale" in inst else None,
                    dict(inst.get("cardinality_scale", {})),
                )
            )
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing field {exc}") from None
    except TypeError as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from None
    scenario = Scenario(
        doc.get("name", "scenario"),
        graph,
        dims,
        spec,
        dict(doc.get("queries", {})),
        instances,
        dict(doc.get("workload", {})),
        doc,
    )
    for name in scenario.queries:
        scenario.query(name)
    names = {t.name for t in graph.tables}
    for inst in instances:
        if inst.s_true is not None:
            _vector(inst.s_true, graph.dimension, f"instance {inst.name}: s_true")
        if inst.scale is not None and len(inst.scale) != graph.dimension:
            raise ScenarioError(f"instance {inst.name}: scale must have {graph.dimension} entries")
        unknown = set(inst.cardinality_scale) - names
        if unknown:
            raise ScenarioError(f"instance {inst.name}: unknown tables {sorted(unknown)}")
    return scenario


def load_scenario(path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
    return parse_scenario(doc)


# --- observations ----------------------------------------------------------------------


def dimension_querylets(graph: JoinGraph) -> dict[int, list[QueryletId]]:
    """Querylets whose profiles describe each dimension, mirroring how
    :func:`~robustqo.error_profiling.match_querylets` looks them up."""
    names = [t.name for t in graph.tables]
    selective = {t for t, _ in graph.local_selection_dims}
    out: dict[int, list[QueryletId]] = {}
    for t, d in graph.local_selection_dims:
        out[d] = [QueryletId.selection(names[t])]
    for e in graph.join_edges:
        a, b = e.left, e.right
        pair = (names[a], names[b])
        flags = [names[x] for x in (a, b) if x in selective]
        if flags:
            out[e.dim] = [QueryletId(pair, (pair,), tuple(flags))]
            continue
        triples = []
        for x in (a, b):
            for f in graph.join_edges:
                if x not in (f.left, f.right):
                    continue
                other = f.right if f.left == x else f.left
                if other in (a, b) or other not in selective:
                    continue
                triples.append(
                    QueryletId(
                        pair + (names[other],),
                        (pair, (names[x], names[other])),
                        (names[other],),
                    )
                )
        out[e.dim] = sorted(set(triples), key=QueryletId.canonical) or [QueryletId(pair, (pair,), ())]
    return dict(sorted(out.items()))


def generate_observations(scenario: Scenario, n: int, rng: np.random.Generator) -> Iterator[Observation]:
    """``n`` (estimated, actual) pairs per querylet of every dimension."""
    if n < 1:
        raise ValueError("n must be at least 1")
    for d, querylets in dimension_querylets(scenario.graph).items():
        spec = scenario.dims[d]
        for q in querylets:
            actual = spec.truth.sample(rng, n)
            est = spec.estimator.estimate(rng, actual)
            for e, a in zip(est, actual):
                yield Observation(q, float(e), float(a))
