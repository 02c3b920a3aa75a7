"""Sparse QUBO representation and the time-indexed join-order encoding.

Variables are laid out as x[edge, step]: selecting edge e at step t of the
join sequence. Penalty terms enforce one edge per step and each edge at
most once; objective terms bias expensive joins toward late steps and
reward consecutive steps that share a relation. Tree connectivity is not
penalized at all; `decode_and_repair` guarantees a valid plan from any
assignment, which keeps the quadratic structure sparse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from .catalog import Catalog, PlanTree, QuerySpec, estimate_cardinality
from .errors import CostModelError
from .joingraph import JoinGraph, JoinOrderSequence

__all__ = [
    "TermClass",
    "Qubo",
    "VarMap",
    "EncodingWeights",
    "QuboMetrics",
    "DecodeReport",
    "Assignment",
    "energy",
    "constraint_energy",
    "encode_join_order",
    "resolve_penalty",
    "qubo_metrics",
    "decode_and_repair",
    "to_dense",
]

#: Bit vector over the QUBO's variables.
Assignment = tuple[int, ...]


class TermClass(Enum):
    CONSTRAINT = "constraint"
    OBJECTIVE = "objective"


@dataclass(frozen=True)
class Qubo:
    """Sparse quadratic binary objective: E(s) = sum J_ij s_i s_j + sum h_i s_i + offset.

    `term_class` tags every stored term (variable index for linear terms,
    index pair for couplings) as penalty-derived or objective-derived.
    `constraint_linear` / `constraint_offset` keep the penalty share of the
    merged linear terms separate so the penalty expression stays auditable.
    """

    n: int
    linear: dict[int, float]
    quadratic: dict[tuple[int, int], float]
    term_class: dict
    offset: float = 0.0
    constraint_linear: dict[int, float] = field(default_factory=dict)
    constraint_offset: float = 0.0

    @staticmethod
    def build(
        n: int,
        linear: Mapping[int, float] | None = None,
        quadratic: Mapping[tuple[int, int], float] | None = None,
        offset: float = 0.0,
        term_class: Mapping | None = None,
        constraint_linear: Mapping[int, float] | None = None,
        constraint_offset: float = 0.0,
    ) -> "Qubo":
        """Validate, normalize pair order, and drop zero coefficients."""
        if n < 1:
            raise ValueError("a QUBO needs at least one variable")
        lin: dict[int, float] = {}
        for i, v in (linear or {}).items():
            if not (0 <= i < n):
                raise ValueError(f"linear index {i} out of range for n={n}")
            if v != 0.0:
                lin[i] = lin.get(i, 0.0) + float(v)
        quad: dict[tuple[int, int], float] = {}
        for (i, j), v in (quadratic or {}).items():
            if i == j:
                raise ValueError(f"coupling ({i}, {j}) is a self-pair")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"coupling ({i}, {j}) out of range for n={n}")
            key = (i, j) if i < j else (j, i)
            if v != 0.0:
                quad[key] = quad.get(key, 0.0) + float(v)
        lin = {i: v for i, v in sorted(lin.items()) if v != 0.0}
        quad = {k: v for k, v in sorted(quad.items()) if v != 0.0}
        classes = dict(term_class) if term_class else {}
        for key in list(lin) + list(quad):
            classes.setdefault(key, TermClass.OBJECTIVE)
        classes = {k: v for k, v in classes.items() if k in lin or k in quad}
        return Qubo(
            n=n,
            linear=lin,
            quadratic=quad,
            term_class=classes,
            offset=float(offset),
            constraint_linear=dict(constraint_linear or {}),
            constraint_offset=float(constraint_offset),
        )

    def class_of(self, term) -> TermClass:
        return self.term_class.get(term, TermClass.OBJECTIVE)

    def max_abs_coefficient(self) -> float:
        values = [abs(v) for v in self.linear.values()] + [abs(v) for v in self.quadratic.values()]
        return max(values) if values else 0.0


def energy(qubo: Qubo, s: Assignment) -> float:
    """Exact energy of one assignment."""
    if len(s) != qubo.n:
        raise ValueError(f"assignment length {len(s)} does not match n={qubo.n}")
    total = qubo.offset
    for i, h in qubo.linear.items():
        if s[i]:
            total += h
    for (i, j), w in qubo.quadratic.items():
        if s[i] and s[j]:
            total += w
    return total


def constraint_energy(qubo: Qubo, s: Assignment) -> float:
    """Energy of the penalty share only: zero exactly on feasible assignments."""
    if len(s) != qubo.n:
        raise ValueError(f"assignment length {len(s)} does not match n={qubo.n}")
    total = qubo.constraint_offset
    for i, h in qubo.constraint_linear.items():
        if s[i]:
            total += h
    for (i, j), w in qubo.quadratic.items():
        if s[i] and s[j] and qubo.class_of((i, j)) is TermClass.CONSTRAINT:
            total += w
    return total


def to_dense(qubo: Qubo) -> tuple[np.ndarray, np.ndarray, float]:
    """Linear vector plus full symmetric coupling matrix, for vectorized kernels."""
    h = np.zeros(qubo.n, dtype=np.float64)
    for i, v in qubo.linear.items():
        h[i] = v
    mat = np.zeros((qubo.n, qubo.n), dtype=np.float64)
    for (i, j), v in qubo.quadratic.items():
        mat[i, j] = v
        mat[j, i] = v
    return h, mat, qubo.offset


@dataclass(frozen=True)
class VarMap:
    """Bijection between variable indices and (edge, step) slots.

    Edge-major layout: index = edge * num_steps + (step - 1); steps are
    1-based, running over the n_rel - 1 positions of a complete sequence.
    """

    num_edges: int
    num_steps: int

    @property
    def n(self) -> int:
        return self.num_edges * self.num_steps

    def index(self, edge: int, step: int) -> int:
        if not (0 <= edge < self.num_edges and 1 <= step <= self.num_steps):
            raise ValueError(f"slot (edge={edge}, step={step}) outside the map")
        return edge * self.num_steps + (step - 1)

    def slot(self, index: int) -> tuple[int, int]:
        if not (0 <= index < self.n):
            raise ValueError(f"variable index {index} outside the map")
        return index // self.num_steps, index % self.num_steps + 1

    def edge_column(self, edge: int) -> list[int]:
        return [self.index(edge, t) for t in range(1, self.num_steps + 1)]

    def step_row(self, step: int) -> list[int]:
        return [self.index(e, step) for e in range(self.num_edges)]


@dataclass(frozen=True)
class EncodingWeights:
    """Tuning knobs for the join-order encoding.

    The penalty magnitude is `penalty_factor` times the largest objective
    coefficient (floored at 1.0 so degenerate all-unit catalogs still get
    a real penalty).
    """

    cost_weight: float = 1.0
    adjacency_bonus: float = 1.0
    penalty_factor: float = 2.0

    def __post_init__(self):
        if self.cost_weight < 0 or self.adjacency_bonus < 0 or self.penalty_factor <= 0:
            raise ValueError("encoding weights must be non-negative, penalty factor positive")


def _objective_terms(
    catalog: Catalog, query: QuerySpec, graph: JoinGraph, varmap: VarMap, weights: EncodingWeights
) -> tuple[dict[int, float], dict[tuple[int, int], float]]:
    n_rel = len(query.relations)
    lin: dict[int, float] = {}
    quad: dict[tuple[int, int], float] = {}
    for edge in graph.base_edges:
        bias = weights.cost_weight * math.log(estimate_cardinality(catalog, query, edge.pair()))
        for t in range(1, varmap.num_steps + 1):
            value = bias * (n_rel - t)
            if value != 0.0:
                lin[varmap.index(edge.index, t)] = value
    if weights.adjacency_bonus != 0.0:
        for i, j in sorted(graph.op_links):
            for t in range(1, varmap.num_steps):
                for first, second in ((i, j), (j, i)):
                    a, b = varmap.index(first, t), varmap.index(second, t + 1)
                    key = (a, b) if a < b else (b, a)
                    quad[key] = quad.get(key, 0.0) - weights.adjacency_bonus
    return lin, quad


def resolve_penalty(
    catalog: Catalog, query: QuerySpec, graph: JoinGraph, weights: EncodingWeights | None = None
) -> float:
    """Penalty coefficient the encoder will use for the given inputs."""
    weights = weights or EncodingWeights()
    varmap = VarMap(num_edges=len(graph.base_edges), num_steps=len(query.relations) - 1)
    lin, quad = _objective_terms(catalog, query, graph, varmap, weights)
    largest = max([abs(v) for v in lin.values()] + [abs(v) for v in quad.values()], default=0.0)
    return weights.penalty_factor * max(1.0, largest)


def encode_join_order(
    catalog: Catalog,
    query: QuerySpec,
    graph: JoinGraph,
    weights: EncodingWeights | None = None,
) -> tuple[Qubo, VarMap]:
    """Build the time-indexed join-order QUBO.

    Penalties (CONSTRAINT class): expanding P*(sum_e x[e,t] - 1)^2 per step
    gives -P on each variable, +2P on same-step pairs, and +P constant;
    edge reuse adds +P on same-edge step pairs. Objective (OBJECTIVE
    class): each slot is biased by log-cardinality of the edge's join,
    scaled by how many later intermediates it feeds, and consecutive-step
    slots of relation-sharing edges get a small bonus.
    """
    weights = weights or EncodingWeights()
    varmap = VarMap(num_edges=len(graph.base_edges), num_steps=len(query.relations) - 1)
    obj_lin, obj_quad = _objective_terms(catalog, query, graph, varmap, weights)
    largest = max([abs(v) for v in obj_lin.values()] + [abs(v) for v in obj_quad.values()], default=0.0)
    penalty = weights.penalty_factor * max(1.0, largest)

    con_lin: dict[int, float] = {}
    con_quad: dict[tuple[int, int], float] = {}
    con_offset = 0.0
    for t in range(1, varmap.num_steps + 1):
        row = varmap.step_row(t)
        for idx in row:
            con_lin[idx] = con_lin.get(idx, 0.0) - penalty
        for a in range(len(row)):
            for b in range(a + 1, len(row)):
                con_quad[(row[a], row[b])] = 2.0 * penalty
        con_offset += penalty
    for e in range(varmap.num_edges):
        col = varmap.edge_column(e)
        for a in range(len(col)):
            for b in range(a + 1, len(col)):
                con_quad[(col[a], col[b])] = penalty

    linear: dict[int, float] = dict(con_lin)
    for i, v in obj_lin.items():
        linear[i] = linear.get(i, 0.0) + v
    quadratic = dict(con_quad)
    for k, v in obj_quad.items():
        if k in quadratic:
            raise AssertionError(f"penalty and objective collide on coupling {k}")
        quadratic[k] = v

    classes: dict = {k: TermClass.CONSTRAINT for k in con_quad}
    classes.update({k: TermClass.OBJECTIVE for k in obj_quad})
    classes.update({i: TermClass.CONSTRAINT for i in con_lin})
    qubo = Qubo.build(
        n=varmap.n,
        linear=linear,
        quadratic=quadratic,
        offset=con_offset,
        term_class=classes,
        constraint_linear=con_lin,
        constraint_offset=con_offset,
    )
    return qubo, varmap


@dataclass(frozen=True)
class QuboMetrics:
    variables: int
    couplings: int
    density: float


def qubo_metrics(qubo: Qubo) -> QuboMetrics:
    """Size and coupling density, the routing inputs."""
    possible = qubo.n * (qubo.n - 1) // 2
    density = len(qubo.quadratic) / possible if possible else 0.0
    return QuboMetrics(variables=qubo.n, couplings=len(qubo.quadratic), density=density)


@dataclass(frozen=True)
class DecodeReport:
    skipped_duplicates: int
    skipped_redundant: int
    greedy_added: int
    h1_violations: int
    h2_violations: int

    @property
    def repairs(self) -> int:
        return self.skipped_duplicates + self.skipped_redundant + self.greedy_added

    @property
    def raw_violations(self) -> int:
        return self.h1_violations + self.h2_violations


def decode_and_repair(
    varmap: VarMap,
    graph: JoinGraph,
    catalog: Catalog,
    query: QuerySpec,
    s: Assignment,
) -> tuple[PlanTree, JoinOrderSequence, DecodeReport]:
    """Turn any assignment into a valid plan, repairing as needed.

    Selected (edge, step) slots are applied in step order; an edge is used
    only when it merges two distinct components, so bushy trees arise
    naturally. Leftover components are joined greedily by the edge whose
    merged subset has the smallest estimated cardinality. Always returns a
    spanning plan for a connected query.
    """
    if len(s) != varmap.n:
        raise ValueError(f"assignment length {len(s)} does not match encoding size {varmap.n}")

    selected = sorted(varmap.slot(i)[::-1] for i in range(varmap.n) if s[i])  # (step, edge)
    step_counts = [0] * (varmap.num_steps + 1)
    edge_counts = [0] * varmap.num_edges
    for t, e in selected:
        step_counts[t] += 1
        edge_counts[e] += 1
    h1 = sum(1 for t in range(1, varmap.num_steps + 1) if step_counts[t] != 1)
    h2 = sum(k * (k - 1) // 2 for k in edge_counts)

    parent = {v: v for v in graph.vertices}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    trees: dict[str, PlanTree] = {v: PlanTree.leaf(v) for v in graph.vertices}
    members: dict[str, set[str]] = {v: {v} for v in graph.vertices}
    used: set[int] = set()
    sequence: list[int] = []
    skipped_dup = 0
    skipped_red = 0

    def apply_edge(eidx: int) -> None:
        edge = graph.base_edges[eidx]
        ra, rb = find(edge.a), find(edge.b)
        joined = PlanTree.join(trees[ra], trees[rb])
        parent[ra] = rb
        trees[rb] = joined
        members[rb] = members[ra] | members[rb]
        sequence.append(eidx)

    for _, eidx in selected:
        if eidx in used:
            skipped_dup += 1
            continue
        used.add(eidx)
        edge = graph.base_edges[eidx]
        if find(edge.a) == find(edge.b):
            skipped_red += 1
            continue
        apply_edge(eidx)

    greedy = 0
    components = len(graph.vertices) - len(sequence)
    while components > 1:
        best = None
        for edge in graph.base_edges:
            if edge.index in used:
                continue
            ra, rb = find(edge.a), find(edge.b)
            if ra == rb:
                continue
            merged = members[ra] | members[rb]
            card = estimate_cardinality(catalog, query, merged)
            key = (card, edge.index)
            if best is None or key < best:
                best = key
        if best is None:
            raise CostModelError("query join graph cannot be spanned; was the query connected?")
        used.add(best[1])
        apply_edge(best[1])
        greedy += 1
        components -= 1

    root = find(graph.vertices[0])
    report = DecodeReport(
        skipped_duplicates=skipped_dup,
        skipped_redundant=skipped_red,
        greedy_added=greedy,
        h1_violations=h1,
        h2_violations=h2,
    )
    return trees[root], tuple(sequence), report
