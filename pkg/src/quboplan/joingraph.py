"""Join-graph model, join-sequence validation, and an exact DP optimizer.

The base graph has relations as vertices and join predicates as edges; a
derived operator graph (the line graph) has one node per candidate binary
join, linked when two joins share a relation. Valid complete join orders
are exactly the spanning trees of the base graph, applied in an order
whose every prefix is a forest.

`dp_optimal_plan` enumerates connected subset splits to find the cheapest
bushy, cross-product-free plan; it is intentionally exhaustive and serves
as the quality oracle for everything else.
"""

from __future__ import annotations

from dataclasses import dataclass

from .catalog import Catalog, PlanTree, QuerySpec, estimate_cardinality
from .errors import OracleLimitError

__all__ = [
    "BaseEdge",
    "JoinGraph",
    "SequenceValidation",
    "build_join_graph",
    "dp_optimal_plan",
    "validate_plan",
]

#: Ordered sequence of base-edge indices; complete when it has n_rel - 1 entries.
JoinOrderSequence = tuple[int, ...]


@dataclass(frozen=True)
class BaseEdge:
    index: int
    a: str  # endpoint pair, sorted a < b
    b: str
    predicate_index: int

    def pair(self) -> tuple[str, str]:
        return (self.a, self.b)

    def touches(self, relation: str) -> bool:
        return relation == self.a or relation == self.b


@dataclass(frozen=True)
class JoinGraph:
    vertices: tuple[str, ...]
    base_edges: tuple[BaseEdge, ...]
    op_links: frozenset[tuple[int, int]]

    def op_adjacency(self) -> dict[int, set[int]]:
        """Adjacency lists of the operator (line) graph."""
        adj: dict[int, set[int]] = {e.index: set() for e in self.base_edges}
        for i, j in self.op_links:
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def shared_relations(self, i: int, j: int) -> frozenset[str]:
        ei, ej = self.base_edges[i], self.base_edges[j]
        return frozenset({ei.a, ei.b} & {ej.a, ej.b})


def build_join_graph(query: QuerySpec, catalog: Catalog) -> JoinGraph:
    """Derive both graph views for a query, with deterministic edge order."""
    keyed = []
    for pi in query.predicates:
        p = catalog.predicates[pi]
        a, b = p.pair()
        keyed.append((a, b, pi))
    keyed.sort()
    edges = tuple(BaseEdge(index=i, a=a, b=b, predicate_index=pi) for i, (a, b, pi) in enumerate(keyed))
    links = set()
    for i in range(len(edges)):
        for j in range(i + 1, len(edges)):
            if {edges[i].a, edges[i].b} & {edges[j].a, edges[j].b}:
                links.add((i, j))
    return JoinGraph(vertices=tuple(sorted(query.relations)), base_edges=edges, op_links=frozenset(links))


@dataclass(frozen=True)
class SequenceValidation:
    """Report of everything wrong with a join-order sequence.

    `redundant_steps` holds 1-based positions whose edge joins two
    relations that an earlier step already placed in one component.
    """

    duplicate_edges: tuple[int, ...]
    unknown_edges: tuple[int, ...]
    redundant_steps: tuple[int, ...]
    is_spanning_tree: bool

    @property
    def violation_count(self) -> int:
        return len(self.duplicate_edges) + len(self.unknown_edges) + len(self.redundant_steps)

    @property
    def ok(self) -> bool:
        return self.violation_count == 0 and self.is_spanning_tree


def validate_plan(graph: JoinGraph, sequence: JoinOrderSequence) -> SequenceValidation:
    """Check a sequence of edge indices against the join graph.

    Spanning tree is true only for a fully clean sequence: no duplicates,
    no unknown edges, every prefix a forest, and exactly the edges of a
    spanning tree at the end.
    """
    parent = {v: v for v in graph.vertices}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    duplicates, unknown, redundant = [], [], []
    seen = set()
    applied = 0
    for pos, eidx in enumerate(sequence, start=1):
        if not (0 <= eidx < len(graph.base_edges)):
            unknown.append(eidx)
            continue
        if eidx in seen:
            duplicates.append(eidx)
            continue
        seen.add(eidx)
        edge = graph.base_edges[eidx]
        ra, rb = find(edge.a), find(edge.b)
        if ra == rb:
            redundant.append(pos)
            continue
        parent[ra] = rb
        applied += 1
    clean = not duplicates and not unknown and not redundant
    spanning = clean and applied == len(graph.vertices) - 1
    return SequenceValidation(
        duplicate_edges=tuple(duplicates),
        unknown_edges=tuple(unknown),
        redundant_steps=tuple(redundant),
        is_spanning_tree=spanning,
    )


def dp_optimal_plan(catalog: Catalog, query: QuerySpec, limit: int = 12) -> tuple[PlanTree, float]:
    """Cheapest bushy cross-product-free plan via subset dynamic programming.

    Ties on cost break toward the lexicographically smaller canonical plan
    string, so the result is reproducible. Refuses queries above `limit`
    relations; the subset table grows as 3^n.
    """
    rels = sorted(query.relations)
    n = len(rels)
    if n > limit:
        raise OracleLimitError(f"query {query.id!r} has {n} relations, oracle limit is {limit}")
    pos = {r: i for i, r in enumerate(rels)}
    adj = [0] * n
    for pi in query.predicates:
        p = catalog.predicates[pi]
        i, j = pos[p.left], pos[p.right]
        adj[i] |= 1 << j
        adj[j] |= 1 << i

    def neighbors(mask: int) -> int:
        out = 0
        m = mask
        while m:
            low = m & -m
            out |= adj[low.bit_length() - 1]
            m ^= low
        return out

    def connected(mask: int) -> bool:
        low = mask & -mask
        reach = low
        while True:
            grown = reach | (neighbors(reach) & mask)
            if grown == reach:
                return reach == mask
            reach = grown

    def subset_names(mask: int) -> list[str]:
        return [rels[i] for i in range(n) if mask >> i & 1]

    # dp[mask] = (cost, plan, canonical string)
    dp: dict[int, tuple[float, PlanTree, str]] = {}
    for i in range(n):
        dp[1 << i] = (0.0, PlanTree.leaf(rels[i]), rels[i])

    full = (1 << n) - 1
    for mask in range(3, full + 1):
        if mask & (mask - 1) == 0 or not connected(mask):
            continue
        card = estimate_cardinality(catalog, query, subset_names(mask))
        best: tuple[float, PlanTree, str] | None = None
        lowbit = mask & -mask
        sub = (mask - 1) & mask
        while sub:
            if sub & lowbit:
                comp = mask ^ sub
                left = dp.get(sub)
                right = dp.get(comp)
                if left is not None and right is not None:
                    cost = left[0] + right[0] + card
                    for first, second in ((left, right), (right, left)):
                        canon = f"({first[2]} {second[2]})"
                        if best is None or cost < best[0] or (cost == best[0] and canon < best[2]):
                            best = (cost, PlanTree.join(first[1], second[1]), canon)
            sub = (sub - 1) & mask
        if best is not None:
            dp[mask] = best

    cost, plan, _ = dp[full]
    return plan, cost
