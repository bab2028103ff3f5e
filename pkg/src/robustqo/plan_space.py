"""Miniature cost-based join optimizer.

Provides the two host-optimizer primitives the rest of the package relies on:
``optimize`` (the cheapest plan for a selectivity vector) and ``cost`` (the cost
of a given plan under a selectivity vector). Plans are binary join trees over
small, connected join graphs; bushy trees are allowed, cross products are not.

All functions are pure. :class:`PlanSpace` bundles a graph with call counters
for code that needs to account for optimizer usage.
"""

from __future__ import annotations

import enum
import functools
import itertools
import re
import threading
from dataclasses import dataclass, field
from typing import Union

import numpy as np

MAX_DP_TABLES = 14
MAX_ENUM_TABLES = 7

HASH_BUILD_FACTOR = 2.0
NL_INNER_FACTOR = 0.01


class PlanError(ValueError):
    """Invalid graph, plan or selectivity input."""


class JoinAlgorithm(enum.Enum):
    HASH = "HJ"
    NESTED_LOOP = "NL"


@dataclass(frozen=True)
class Table:
    name: str
    cardinality: float
    has_local_selection: bool = False


@dataclass(frozen=True)
class JoinEdge:
    left: int
    right: int
    dim: int


_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


@dataclass(frozen=True)
class JoinGraph:
    """Query template: tables, join edges and the selectivity-dimension layout.

    ``local_selection_dims`` is a tuple of ``(table_index, dim)`` pairs. Use
    :meth:`build` to get dimension ids assigned automatically.
    """

    tables: tuple[Table, ...]
    join_edges: tuple[JoinEdge, ...]
    local_selection_dims: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        n = len(self.tables)
        if n == 0:
            raise PlanError("graph has no tables")
        names = [t.name for t in self.tables]
        if len(set(names)) != n:
            raise PlanError("duplicate table names")
        for t in self.tables:
            if not _NAME_RE.match(t.name):
                raise PlanError(f"invalid table name {t.name!r}")
            if not (t.cardinality > 0 and np.isfinite(t.cardinality)):
                raise PlanError(f"table {t.name}: cardinality must be positive")
        pairs = set()
        for e in self.join_edges:
            if not (0 <= e.left < n and 0 <= e.right < n):
                raise PlanError("join edge references unknown table")
            if e.left == e.right:
                raise PlanError("self-joins are not supported")
            key = frozenset((e.left, e.right))
            if key in pairs:
                raise PlanError("more than one join edge between a table pair")
            pairs.add(key)
        sel_tables = {t for t, _ in self.local_selection_dims}
        if len(sel_tables) != len(self.local_selection_dims):
            raise PlanError("table has more than one local selection dimension")
        for t, _ in self.local_selection_dims:
            if not 0 <= t < n:
                raise PlanError("local selection references unknown table")
            if not self.tables[t].has_local_selection:
                raise PlanError(f"table {self.tables[t].name} has no local selection flag")
        for i, t in enumerate(self.tables):
            if t.has_local_selection and i not in sel_tables:
                raise PlanError(f"table {t.name} flagged without a dimension")
        dims = [d for _, d in self.local_selection_dims] + [e.dim for e in self.join_edges]
        if sorted(dims) != list(range(len(dims))):
            raise PlanError("dimension ids must cover 0..d-1 exactly once")
        if not _connected(self._adjacency(), (1 << n) - 1):
            raise PlanError("join graph is not connected")

    @classmethod
    def build(cls, tables, joins) -> "JoinGraph":
        """Build a graph from ``(name, cardinality, has_selection)`` tuples and
        ``(left_name, right_name)`` join pairs.

        Local-selection dimensions come first in table order, then one dimension
        per join in the order given.
        """
        tables = tuple(Table(str(n), float(c), bool(s)) for n, c, s in tables)
        index = {t.name: i for i, t in enumerate(tables)}
        local = []
        for i, t in enumerate(tables):
            if t.has_local_selection:
                local.append((i, len(local)))
        edges = []
        for k, (a, b) in enumerate(joins):
            if a not in index or b not in index:
                raise PlanError(f"join {a}-{b} references unknown table")
            edges.append(JoinEdge(index[a], index[b], len(local) + k))
        return cls(tables, tuple(edges), tuple(local))

    @property
    def n_tables(self) -> int:
        return len(self.tables)

    @property
    def dimension(self) -> int:
        return len(self.local_selection_dims) + len(self.join_edges)

    def table_index(self, name: str) -> int:
        for i, t in enumerate(self.tables):
            if t.name == name:
                return i
        raise PlanError(f"unknown table {name!r}")

    def local_dim(self, table: int):
        for t, d in self.local_selection_dims:
            if t == table:
                return d
        return None

    def edge_between(self, a: int, b: int):
        for e in self.join_edges:
            if {e.left, e.right} == {a, b}:
                return e
        return None

    def dim_label(self, dim: int) -> str:
        """Human-readable name of a dimension, e.g. ``sel(A)`` or ``A-B``."""
        for t, d in self.local_selection_dims:
            if d == dim:
                return f"sel({self.tables[t].name})"
        for e in self.join_edges:
            if e.dim == dim:
                return f"{self.tables[e.left].name}-{self.tables[e.right].name}"
        raise PlanError(f"unknown dimension {dim}")

    def with_cardinalities(self, scale: dict[str, float]) -> "JoinGraph":
        tables = tuple(
            Table(t.name, t.cardinality * float(scale.get(t.name, 1.0)), t.has_local_selection)
            for t in self.tables
        )
        return JoinGraph(tables, self.join_edges, self.local_selection_dims)

    @functools.cached_property
    def _adj(self) -> tuple[int, ...]:
        return self._adjacency()

    def _adjacency(self) -> tuple[int, ...]:
        adj = [0] * len(self.tables)
        for e in self.join_edges:
            adj[e.left] |= 1 << e.right
            adj[e.right] |= 1 << e.left
        return tuple(adj)


def _connected(adj, mask: int) -> bool:
    if mask == 0:
        return False
    start = mask & -mask
    seen = start
    frontier = start
    while frontier:
        low = frontier & -frontier
        frontier ^= low
        nxt = adj[low.bit_length() - 1] & mask & ~seen
        seen |= nxt
        frontier |= nxt
    return seen == mask


def _bits(mask: int) -> list[int]:
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


# --- plans -----------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    table: int


@dataclass(frozen=True)
class Join:
    left: "Node"
    right: "Node"
    algorithm: JoinAlgorithm


Node = Union[Leaf, Join]


def _mask_of(node: Node) -> int:
    if isinstance(node, Leaf):
        return 1 << node.table
    return _mask_of(node.left) | _mask_of(node.right)


@dataclass(frozen=True)
class Plan:
    """A join tree plus the table names needed to print it."""

    root: Node
    names: tuple[str, ...] = field(compare=False, repr=False)

    @functools.cached_property
    def fingerprint(self) -> str:
        return _fingerprint(self.root, self.names)

    @property
    def mask(self) -> int:
        return _mask_of(self.root)

    def __hash__(self):
        return hash(self.fingerprint)

    def __eq__(self, other):
        return isinstance(other, Plan) and self.fingerprint == other.fingerprint

    def __str__(self):
        return self.fingerprint

    def render(self) -> str:
        """Indented multi-line tree rendering."""
        lines: list[str] = []

        def walk(node, depth):
            pad = "  " * depth
            if isinstance(node, Leaf):
                lines.append(f"{pad}{self.names[node.table]}")
            else:
                lines.append(f"{pad}{node.algorithm.name}")
                walk(node.left, depth + 1)
                walk(node.right, depth + 1)

        walk(self.root, 0)
        return "\n".join(lines)


JOIN_SYMBOL = "⋈"


def _fingerprint(node: Node, names) -> str:
    if isinstance(node, Leaf):
        return names[node.table]
    return (
        f"({_fingerprint(node.left, names)} {JOIN_SYMBOL}{node.algorithm.value} "
        f"{_fingerprint(node.right, names)})"
    )


_TOKEN_RE = re.compile(r"\s*(\(|\)|" + JOIN_SYMBOL + r"(?:HJ|NL)|[A-Za-z_][A-Za-z0-9_]*)")


def parse_plan(text: str, graph: JoinGraph) -> Plan:
    """Parse a fingerprint back into a plan and validate it against ``graph``."""
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise PlanError(f"cannot parse plan at offset {pos}: {text!r}")
        tokens.append(m.group(1))
        pos = m.end()
    names = tuple(t.name for t in graph.tables)
    algs = {JOIN_SYMBOL + a.value: a for a in JoinAlgorithm}

    def parse(i):
        tok = tokens[i] if i < len(tokens) else None
        if tok == "(":
            left, i = parse(i + 1)
            if i >= len(tokens) or tokens[i] not in algs:
                raise PlanError(f"expected join operator in {text!r}")
            alg = algs[tokens[i]]
            right, i = parse(i + 1)
            if i >= len(tokens) or tokens[i] != ")":
                raise PlanError(f"expected ')' in {text!r}")
            return Join(left, right, alg), i + 1
        if tok is None or tok in algs or tok == ")":
            raise PlanError(f"unexpected token {tok!r} in {text!r}")
        return Leaf(graph.table_index(tok)), i + 1

    root, end = parse(0)
    if end != len(tokens):
        raise PlanError(f"trailing input in {text!r}")
    plan = Plan(root, names)
    validate_plan(graph, plan)
    return plan


def validate_plan(graph: JoinGraph, plan: Plan) -> None:
    seen: list[int] = []

    def walk(node):
        if isinstance(node, Leaf):
            if not 0 <= node.table < graph.n_tables:
                raise PlanError("leaf references unknown table")
            seen.append(node.table)
            return 1 << node.table
        lm = walk(node.left)
        rm = walk(node.right)
        if not any(graph._adj[t] & rm for t in _bits(lm)):
            raise PlanError("join of subtrees without a connecting edge")
        return lm | rm

    walk(plan.root)
    if sorted(seen) != list(range(graph.n_tables)):
        raise PlanError("plan leaves must be a permutation of the graph's tables")


# --- global call tally ------------------------------------------------------

_tally_lock = threading.Lock()
_tally = {"opt": 0, "cost": 0}


def _record(kind: str, n: int = 1):
    with _tally_lock:
        _tally[kind] += n


def call_tally() -> dict[str, int]:
    """Process-wide Opt/Cost evaluations (vectorized calls count per point)."""
    with _tally_lock:
        return dict(_tally)


# --- cardinality and cost ---------------------------------------------------


def _check_selectivities(graph: JoinGraph, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape[-1:] != (graph.dimension,):
        raise PlanError(f"selectivity vector must have length {graph.dimension}")
    if not (np.all(s > 0) and np.all(s <= 1)):
        raise PlanError("selectivities must lie in (0, 1]")
    return s


def _subset_cardinality(graph: JoinGraph, mask: int, s):
    # Fixed factor order (tables, local selections, edges, all by index) keeps
    # scalar and vectorized evaluation bit-identical.
    members = _bits(mask)
    rows = 1.0
    for t in members:
        rows = rows * graph.tables[t].cardinality
    for t, d in graph.local_selection_dims:
        if mask >> t & 1:
            rows = rows * s[..., d]
    for e in graph.join_edges:
        if mask >> e.left & 1 and mask >> e.right & 1:
            rows = rows * s[..., e.dim]
    return rows


def cardinality(graph: JoinGraph, table_set, s) -> float:
    """Output rows of the join of ``table_set`` (table indices) under ``s``."""
    mask = 0
    for t in table_set:
        if not 0 <= t < graph.n_tables:
            raise PlanError(f"unknown table index {t}")
        mask |= 1 << t
    if mask == 0:
        raise PlanError("empty table set")
    if not _connected(graph._adj, mask):
        raise PlanError("disconnected intermediate")
    s = _check_selectivities(graph, s)
    return float(_subset_cardinality(graph, mask, s))


def _join_cost(alg: JoinAlgorithm, cost_l, cost_r, n_l, n_r, n_out):
    if alg is JoinAlgorithm.HASH:
        return cost_l + cost_r + HASH_BUILD_FACTOR * n_l + n_r + n_out
    return cost_l + cost_r + n_l + NL_INNER_FACTOR * n_l * n_r + n_out


def _cost_rec(graph, node, s):
    if isinstance(node, Leaf):
        rows = _subset_cardinality(graph, 1 << node.table, s)
        return graph.tables[node.table].cardinality, rows, 1 << node.table
    cl, nl, ml = _cost_rec(graph, node.left, s)
    cr, nr, mr = _cost_rec(graph, node.right, s)
    mask = ml | mr
    n_out = _subset_cardinality(graph, mask, s)
    return _join_cost(node.algorithm, cl, cr, nl, nr, n_out), n_out, mask


def cost(graph: JoinGraph, plan: Plan, s) -> float:
    """Cost of ``plan`` under selectivities ``s``."""
    validate_plan(graph, plan)
    s = _check_selectivities(graph, s)
    _record("cost")
    return float(_cost_rec(graph, plan.root, s)[0])


def cost_many(graph: JoinGraph, plan: Plan, points) -> np.ndarray:
    """Vectorized :func:`cost` over the rows of ``points`` (shape ``(n, d)``)."""
    validate_plan(graph, plan)
    points = np.atleast_2d(_check_selectivities(graph, points))
    _record("cost", points.shape[0])
    c = _cost_rec(graph, plan.root, points)[0]
    return np.broadcast_to(np.asarray(c, dtype=float), (points.shape[0],)).copy()


# --- dynamic programming ----------------------------------------------------


@dataclass(frozen=True)
class _Layout:
    subsets: tuple[int, ...]  # connected subsets, increasing size
    splits: dict  # mask -> tuple of (left_mask, right_mask)


@functools.lru_cache(maxsize=64)
def _layout(graph: JoinGraph) -> _Layout:
    n = graph.n_tables
    adj = graph._adj
    connected = [m for m in range(1, 1 << n) if _connected(adj, m)]
    connected.sort(key=lambda m: (bin(m).count("1"), m))
    conn_set = set(connected)
    splits = {}
    for mask in connected:
        if mask & (mask - 1) == 0:
            continue
        pairs = []
        sub = (mask - 1) & mask
        while sub:
            rest = mask ^ sub
            if sub in conn_set and rest in conn_set:
                if any(adj[t] & rest for t in _bits(sub)):
                    pairs.append((sub, rest))
            sub = (sub - 1) & mask
        pairs.sort()
        splits[mask] = tuple(pairs)
    return _Layout(tuple(connected), splits)


def optimize(graph: JoinGraph, s) -> tuple[Plan, float]:
    """Cheapest plan for ``s`` by DP over connected subsets.

    Equal-cost alternatives for a subset are resolved by the smaller fingerprint.
    """
    if graph.n_tables > MAX_DP_TABLES:
        raise PlanError("plan space too large")
    s = _check_selectivities(graph, s)
    _record("opt")
    layout = _layout(graph)
    names = tuple(t.name for t in graph.tables)
    rows = {m: _subset_cardinality(graph, m, s) for m in layout.subsets}
    best: dict[int, tuple[float, str, Node]] = {}
    for mask in layout.subsets:
        if mask & (mask - 1) == 0:
            t = mask.bit_length() - 1
            leaf = Leaf(t)
            best[mask] = (graph.tables[t].cardinality, names[t], leaf)
            continue
        current = None
        for lm, rm in layout.splits[mask]:
            cl, fl, nl_ = best[lm]
            cr, fr, nr_ = best[rm]
            for alg in JoinAlgorithm:
                c = _join_cost(alg, cl, cr, rows[lm], rows[rm], rows[mask])
                if current is not None and c > current[0]:
                    continue
                fp = f"({fl} {JOIN_SYMBOL}{alg.value} {fr})"
                if current is None or (c, fp) < (current[0], current[1]):
                    current = (c, fp, Join(nl_, nr_, alg))
        best[mask] = current
    c, _, root = best[(1 << graph.n_tables) - 1]
    return Plan(root, names), float(c)


def optimal_costs(graph: JoinGraph, points) -> np.ndarray:
    """Optimal cost for every row of ``points``; same arithmetic as :func:`optimize`."""
    if graph.n_tables > MAX_DP_TABLES:
        raise PlanError("plan space too large")
    points = np.atleast_2d(_check_selectivities(graph, points))
    n = points.shape[0]
    _record("opt", n)
    layout = _layout(graph)
    rows = {m: _subset_cardinality(graph, m, points) for m in layout.subsets}
    best = {}
    for mask in layout.subsets:
        if mask & (mask - 1) == 0:
            best[mask] = np.full(n, graph.tables[mask.bit_length() - 1].cardinality)
            continue
        acc = None
        for lm, rm in layout.splits[mask]:
            for alg in JoinAlgorithm:
                c = _join_cost(alg, best[lm], best[rm], rows[lm], rows[rm], rows[mask])
                acc = c if acc is None else np.minimum(acc, c)
        best[mask] = np.broadcast_to(acc, (n,))
    return np.array(best[(1 << graph.n_tables) - 1], dtype=float)


# --- exhaustive enumeration ---------------------------------------------------


def enumerate_all_plans(graph: JoinGraph) -> list[Plan]:
    """Every valid join tree, sorted by fingerprint. Brute-force oracle."""
    if graph.n_tables > MAX_ENUM_TABLES:
        raise PlanError("too many tables to enumerate")
    layout = _layout(graph)
    trees: dict[int, list[Node]] = {}
    for mask in layout.subsets:
        if mask & (mask - 1) == 0:
            trees[mask] = [Leaf(mask.bit_length() - 1)]
            continue
        out = []
        for lm, rm in layout.splits[mask]:
            for left, right, alg in itertools.product(trees[lm], trees[rm], JoinAlgorithm):
                out.append(Join(left, right, alg))
        trees[mask] = out
    names = tuple(t.name for t in graph.tables)
    plans = {}
    for root in trees[(1 << graph.n_tables) - 1]:
        p = Plan(root, names)
        plans.setdefault(p.fingerprint, p)
    return [plans[k] for k in sorted(plans)]


# --- counted access -----------------------------------------------------------


@dataclass
class CallCounters:
    opt: int = 0
    cost: int = 0

    def snapshot(self) -> dict[str, int]:
        return {"opt": self.opt, "cost": self.cost}


class PlanSpace:
    """A graph plus Opt/Cost call counters."""

    def __init__(self, graph: JoinGraph, counters: CallCounters | None = None):
        self.graph = graph
        self.counters = counters if counters is not None else CallCounters()

    def optimize(self, s) -> tuple[Plan, float]:
        self.counters.opt += 1
        return optimize(self.graph, s)

    def optimal_costs(self, points) -> np.ndarray:
        out = optimal_costs(self.graph, points)
        self.counters.opt += len(out)
        return out

    def cost(self, plan: Plan, s) -> float:
        self.counters.cost += 1
        return cost(self.graph, plan, s)

    def cost_many(self, plan: Plan, points) -> np.ndarray:
        out = cost_many(self.graph, plan, points)
        self.counters.cost += len(out)
        return out
