"""Workload-driven models of selectivity-estimation error.

Errors are tracked per querylet (a 1-3 table subquery pattern) as log-relative
errors ``eps = ln(estimated / actual)``. Each selectivity dimension of a query
template gets an :class:`ErrorModel`: two Gaussian kernel density estimates,
one for low and one for high estimates. The per-dimension models compose into
a :class:`JointErrorDistribution`, the factorized density of true
selectivities given the estimates.

Densities live in eps-space. Consumers only ever take ratios of densities at a
common point, where the change-of-variables Jacobian cancels, so it is omitted.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .plan_space import JoinGraph

log = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-3
FALLBACK_BANDWIDTH = 2.0
MIN_SELECTIVITY = 1e-9
STORE_VERSION = 1
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# --- querylets and observations ----------------------------------------------


@dataclass(frozen=True, order=True)
class QueryletId:
    """Tables, join edges and selection flags of a small subquery pattern."""

    tables: tuple[str, ...]
    edges: tuple[tuple[str, str], ...] = ()
    selections: tuple[str, ...] = ()

    def __post_init__(self):
        tables = tuple(sorted(set(self.tables)))
        edges = tuple(sorted({tuple(sorted(e)) for e in self.edges}))
        selections = tuple(sorted(set(self.selections)))
        object.__setattr__(self, "tables", tables)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "selections", selections)
        if not 1 <= len(tables) <= 3:
            raise ValueError("a querylet spans one to three tables")
        if not set(selections) <= set(tables):
            raise ValueError("selection tables must be among the querylet's tables")
        for a, b in edges:
            if a == b or a not in tables or b not in tables:
                raise ValueError(f"bad querylet edge {a}-{b}")
        if len(tables) > 1:
            reached = {tables[0]}
            changed = True
            while changed:
                changed = False
                for a, b in edges:
                    if (a in reached) != (b in reached):
                        reached |= {a, b}
                        changed = True
            if reached != set(tables):
                raise ValueError("querylet edges must connect its tables")

    def canonical(self) -> str:
        return "|".join(
            [
                ",".join(self.tables),
                ",".join(f"{a}-{b}" for a, b in self.edges),
                ",".join(self.selections),
            ]
        )

    __str__ = canonical

    @classmethod
    def parse(cls, text: str) -> "QueryletId":
        parts = text.split("|")
        if len(parts) != 3:
            raise ValueError(f"malformed querylet {text!r}")
        tables = [t for t in parts[0].split(",") if t]
        edges = [tuple(e.split("-")) for e in parts[1].split(",") if e]
        if any(len(e) != 2 for e in edges):
            raise ValueError(f"malformed querylet edge in {text!r}")
        sel = [t for t in parts[2].split(",") if t]
        return cls(tuple(tables), tuple(edges), tuple(sel))

    @classmethod
    def selection(cls, table: str) -> "QueryletId":
        return cls((table,), (), (table,))


@dataclass(frozen=True)
class Observation:
    querylet: QueryletId
    estimated: float
    actual: float

    def to_line(self) -> str:
        return json.dumps(
            {"querylet": self.querylet.canonical(), "estimated": self.estimated, "actual": self.actual}
        )

    @classmethod
    def from_line(cls, line: str) -> "Observation":
        rec = json.loads(line)
        return cls(QueryletId.parse(rec["querylet"]), float(rec["estimated"]), float(rec["actual"]))


@dataclass
class ErrorProfile:
    querylet: QueryletId
    samples: list[tuple[float, float]] = field(default_factory=list)

    @property
    def estimates(self) -> np.ndarray:
        return np.array([e for e, _ in self.samples], dtype=float)

    @property
    def errors(self) -> np.ndarray:
        return np.array([x for _, x in self.samples], dtype=float)


class ProfileStore:
    """Error profiles keyed by querylet, built by ingesting observations."""

    def __init__(self):
        self.profiles: dict[QueryletId, ErrorProfile] = {}
        self.rejected = 0

    def __len__(self):
        return len(self.profiles)

    def __contains__(self, q):
        return q in self.profiles

    def __getitem__(self, q) -> ErrorProfile:
        return self.profiles[q]

    def ingest(self, observations: Iterable[Observation]) -> "ProfileStore":
        for obs in observations:
            if not (obs.estimated > 0 and obs.actual > 0) or not (
                math.isfinite(obs.estimated) and math.isfinite(obs.actual)
            ):
                self.rejected += 1
                continue
            eps = math.log(obs.estimated / obs.actual)
            prof = self.profiles.setdefault(obs.querylet, ErrorProfile(obs.querylet))
            prof.samples.append((obs.estimated, eps))
        if self.rejected:
            log.info("rejected %d observations with nonpositive selectivity", self.rejected)
        return self

    def ingest_lines(self, lines: Iterable[str]) -> "ProfileStore":
        return self.ingest(Observation.from_line(ln) for ln in lines if ln.strip())

    def to_dict(self) -> dict:
        profiles = []
        for q in sorted(self.profiles, key=QueryletId.canonical):
            profiles.append(
                {"querylet": q.canonical(), "samples": [[e, x] for e, x in self.profiles[q].samples]}
            )
        return {"version": STORE_VERSION, "rejected": self.rejected, "profiles": profiles}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ProfileStore":
        if doc.get("version") != STORE_VERSION:
            raise ValueError(f"unsupported profile store version {doc.get('version')!r}")
        store = cls()
        store.rejected = int(doc.get("rejected", 0))
        for rec in doc["profiles"]:
            q = QueryletId.parse(rec["querylet"])
            store.profiles[q] = ErrorProfile(q, [(float(e), float(x)) for e, x in rec["samples"]])
        return store

    @classmethod
    def loads(cls, text: str) -> "ProfileStore":
        return cls.from_dict(json.loads(text))


def ingest_observations(observations: Iterable[Observation]) -> ProfileStore:
    return ProfileStore().ingest(observations)


# --- querylet matching ----------------------------------------------------------


def _edge_querylet(graph: JoinGraph, a: int, b: int, flags) -> QueryletId:
    na, nb = graph.tables[a].name, graph.tables[b].name
    return QueryletId((na, nb), ((na, nb),), tuple(flags))


def match_querylets(graph: JoinGraph, available) -> dict[int, list[QueryletId]]:
    """Map every dimension of ``graph`` to the profiled querylets describing it.

    Local selections use the single-table querylet. A join whose endpoints
    carry selections uses the most specific matching two-table querylet. A join
    between two selection-free tables collects every profiled three-table
    querylet that extends it by one selective neighbor; these get merged.
    Unmatched dimensions map to an empty list.
    """
    available = set(available)
    names = [t.name for t in graph.tables]
    selective = {names[t] for t, _ in graph.local_selection_dims}
    out: dict[int, list[QueryletId]] = {}
    for t, d in graph.local_selection_dims:
        q = QueryletId.selection(names[t])
        out[d] = [q] if q in available else []
    for e in graph.join_edges:
        na, nb = names[e.left], names[e.right]
        flags = sorted({na, nb} & selective)
        if flags:
            # drop flags one at a time when the exact pattern was never profiled
            candidates = []
            for k in range(len(flags), -1, -1):
                for subset in itertools.combinations(flags, k):
                    candidates.append(_edge_querylet(graph, e.left, e.right, subset))
            out[e.dim] = next(([q] for q in candidates if q in available), [])
            continue
        matches = []
        for q in available:
            if len(q.tables) != 3 or not {na, nb} <= set(q.tables):
                continue
            if (min(na, nb), max(na, nb)) not in q.edges:
                continue
            if not _consistent(graph, q, selective):
                continue
            matches.append(q)
        if not matches:
            plain = _edge_querylet(graph, e.left, e.right, ())
            matches = [plain] if plain in available else []
        out[e.dim] = sorted(matches, key=QueryletId.canonical)
    return dict(sorted(out.items()))


def _consistent(graph: JoinGraph, q: QueryletId, selective: set[str]) -> bool:
    # the querylet must be a subpattern of the query with the query's own flags
    try:
        idx = {name: graph.table_index(name) for name in q.tables}
    except ValueError:
        return False
    for a, b in q.edges:
        if graph.edge_between(idx[a], idx[b]) is None:
            return False
    return set(q.selections) == set(q.tables) & selective


# --- kernel density ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KernelDensity:
    """Equal-weight Gaussian mixture over ``centers`` with a shared bandwidth."""

    centers: np.ndarray
    bandwidth: float

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).ravel()
        if c.size == 0:
            raise ValueError("kernel density needs at least one center")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValueError("bandwidth must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    def __eq__(self, other):
        if not isinstance(other, KernelDensity):
            return NotImplemented
        return self.bandwidth == other.bandwidth and np.array_equal(self.centers, other.centers)

    def __hash__(self):
        return hash((self.bandwidth, self.centers.tobytes()))

    @classmethod
    def fit(cls, values) -> "KernelDensity":
        x = np.asarray(values, dtype=float)
        return cls(x, silverman_bandwidth(x))

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.centers) / self.bandwidth
        return (
            logsumexp(-0.5 * z * z, axis=-1)
            - math.log(self.centers.size)
            - math.log(self.bandwidth)
            - _LOG_SQRT_2PI
        )

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.integers(0, self.centers.size, size=n)
        return self.centers[idx] + self.bandwidth * rng.standard_normal(n)

    @property
    def mean(self) -> float:
        return float(self.centers.mean())

    def expected_exp_neg(self) -> float:
        """E[exp(-eps)] for eps drawn from this density (lognormal mixture mean)."""
        h = self.bandwidth
        return float(np.mean(np.exp(-self.centers + 0.5 * h * h)))

    def support(self, width: float = 8.0) -> tuple[float, float]:
        return (
            float(self.centers.min() - width * self.bandwidth),
            float(self.centers.max() + width * self.bandwidth),
        )

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "bandwidth": self.bandwidth}

    @classmethod
    def from_dict(cls, doc) -> "KernelDensity":
        return cls(np.array(doc["centers"], dtype=float), float(doc["bandwidth"]))


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return BANDWIDTH_FLOOR
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(float(np.std(x)), float(q75 - q25) / 1.34)
    return max(0.9 * spread * x.size ** (-0.2), BANDWIDTH_FLOOR)


FALLBACK_DENSITY = KernelDensity(np.zeros(1), FALLBACK_BANDWIDTH)


@dataclass(frozen=True)
class ErrorModel:
    """Low/high split error model for one dimension."""

    dim: int
    cutoff: float
    low: KernelDensity
    high: KernelDensity

    def density_for(self, estimate: float) -> KernelDensity:
        return self.low if estimate <= self.cutoff else self.high

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "cutoff": self.cutoff,
            "low": self.low.to_dict(),
            "high": self.high.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc) -> "ErrorModel":
        return cls(
            int(doc["dim"]),
            float(doc["cutoff"]),
            KernelDensity.from_dict(doc["low"]),
            KernelDensity.from_dict(doc["high"]),
        )

    @classmethod
    def fallback(cls, dim: int) -> "ErrorModel":
        return cls(dim, 1.0, FALLBACK_DENSITY, FALLBACK_DENSITY)

    @classmethod
    def exact(cls, dim: int, bandwidth: float = BANDWIDTH_FLOOR) -> "ErrorModel":
        """A near-degenerate model centered on zero error."""
        kd = KernelDensity(np.zeros(1), bandwidth)
        return cls(dim, 1.0, kd, kd)


def build_model(dim: int, profiles: Sequence[ErrorProfile]) -> ErrorModel:
    """Fit the low/high model for ``dim`` from merged profiles.

    The split point is the median of the observed estimates. With no samples
    at all, a wide non-informative model centered at zero is returned.
    """
    samples = [x for p in profiles for x in p.samples]
    if not samples:
        return ErrorModel.fallback(dim)
    est = np.array([e for e, _ in samples], dtype=float)
    eps = np.array([x for _, x in samples], dtype=float)
    cutoff = float(np.median(est))
    lo = est <= cutoff
    if lo.all() or not lo.any():
        kd = KernelDensity.fit(eps)
        return ErrorModel(dim, cutoff, kd, kd)
    return ErrorModel(dim, cutoff, KernelDensity.fit(eps[lo]), KernelDensity.fit(eps[~lo]))


def build_models(graph: JoinGraph, store: ProfileStore) -> list[ErrorModel]:
    """One model per dimension of ``graph``; unmatched dimensions fall back."""
    matches = match_querylets(graph, store.profiles.keys())
    models = []
    for d in range(graph.dimension):
        qs = matches.get(d, [])
        if not qs:
            log.info("dimension %d (%s): no profile, using fallback model", d, graph.dim_label(d))
        models.append(build_model(d, [store[q] for q in qs]))
    return models


# --- joint distribution --------------------------------------------------------------


@dataclass(frozen=True)
class JointErrorDistribution:
    """Factorized density of true selectivities given the estimates ``anchor``.

    Only ``active_dims`` vary; the rest stay frozen at the anchor.
    """

    models: tuple[ErrorModel, ...]
    anchor: np.ndarray
    active_dims: tuple[int, ...] = None

    def __post_init__(self):
        models = tuple(self.models)
        anchor = np.asarray(self.anchor, dtype=float).copy()
        anchor.setflags(write=False)
        if anchor.shape != (len(models),):
            raise ValueError("anchor length must match the number of models")
        if not (np.all(anchor > 0) and np.all(anchor <= 1)):
            raise ValueError("anchor selectivities must lie in (0, 1]")
        active = tuple(range(len(models))) if self.active_dims is None else tuple(sorted(set(self.active_dims)))
        if not active:
            raise ValueError("at least one active dimension required")
        if not all(0 <= d < len(models) for d in active):
            raise ValueError("active dimension out of range")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "active_dims", active)

    @property
    def dimension(self) -> int:
        return len(self.models)

    @property
    def upper(self) -> float:
        return 1.0

    def density(self, dim: int) -> KernelDensity:
        return self.models[dim].density_for(self.anchor[dim])

    def restrict(self, dims) -> "JointErrorDistribution":
        return JointErrorDistribution(self.models, self.anchor, tuple(dims))

    def with_anchor(self, anchor) -> "JointErrorDistribution":
        return JointErrorDistribution(self.models, anchor, self.active_dims)

    def morris_steps(self) -> np.ndarray:
        return 0.05 * self.anchor

    def errors_of(self, points) -> np.ndarray:
        """Log-relative errors ``ln(anchor / s)`` for each row of ``points``."""
        return np.log(self.anchor / np.asarray(points, dtype=float))

    def active_log_density(self, points) -> np.ndarray:
        """Sum of per-dimension log densities over the active dims, unchecked."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(pts.shape[0])
        for d in self.active_dims:
            out = out + self.density(d).logpdf(np.log(self.anchor[d] / pts[:, d]))
        return out

    def logpdf(self, s) -> float:
        s = np.asarray(s, dtype=float)
        if s.shape != self.anchor.shape:
            raise ValueError("selectivity vector has the wrong length")
        if np.any(s <= 0):
            raise ValueError("selectivities must be positive")
        frozen = np.setdiff1d(np.arange(self.dimension), self.active_dims)
        if np.any(s[frozen] != self.anchor[frozen]):
            raise ValueError("frozen dimensions must equal the anchor")
        return float(self.active_log_density(s[None, :])[0])

    def pdf(self, s) -> float:
        return math.exp(self.logpdf(s))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` draws of true selectivities, shape ``(n, d)``."""
        out = np.tile(self.anchor, (n, 1))
        for d in self.active_dims:
            eps = self.density(d).sample(rng, n)
            out[:, d] = np.clip(self.anchor[d] * np.exp(-eps), MIN_SELECTIVITY, 1.0)
        return out

    def sample_one(self, rng: np.random.Generator) -> np.ndarray:
        return self.sample(rng, 1)[0]

    def recenter(self) -> np.ndarray:
        """Expected true selectivities under the model, in closed form."""
        out = self.anchor.copy()
        for d in self.active_dims:
            out[d] = min(max(self.anchor[d] * self.density(d).expected_exp_neg(), MIN_SELECTIVITY), 1.0)
        return out


def joint_pdf(dist: JointErrorDistribution, s) -> float:
    return dist.pdf(s)


def sample_true_selectivities(dist: JointErrorDistribution, rng: np.random.Generator) -> np.ndarray:
    return dist.sample_one(rng)


def recenter(dist: JointErrorDistribution, anchor=None) -> np.ndarray:
    if anchor is not None:
        dist = dist.with_anchor(anchor)
    return dist.recenter()
