"""Workload ingestion and the cardinality/selectivity cost model.

A workload document describes base relations with row counts, join
predicates with selectivities, and the queries to optimize. The cost
model prices a join tree as the sum of its intermediate result sizes
(the classic C_out objective) under the independence assumption, which
is what every downstream component optimizes against.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .errors import CostModelError, WorkloadError

__all__ = [
    "Relation",
    "Predicate",
    "Catalog",
    "QuerySpec",
    "PlanTree",
    "load_workload",
    "serialize_workload",
    "estimate_cardinality",
    "plan_cost",
]


@dataclass(frozen=True)
class Relation:
    name: str
    cardinality: int


@dataclass(frozen=True)
class Predicate:
    left: str
    right: str
    selectivity: float

    def pair(self) -> tuple[str, str]:
        """Endpoints as a sorted pair."""
        return (self.left, self.right) if self.left <= self.right else (self.right, self.left)


@dataclass(frozen=True)
class Catalog:
    """Immutable statistics store: relations with cardinalities, join predicates."""

    relations: tuple[Relation, ...]
    predicates: tuple[Predicate, ...]
    _card: dict = field(init=False, compare=False, repr=False, default_factory=dict)

    def __post_init__(self):
        names = [r.name for r in self.relations]
        if len(set(names)) != len(names):
            raise WorkloadError("duplicate relation names in catalog")
        for r in self.relations:
            if not r.name:
                raise WorkloadError("empty relation name")
            if r.cardinality < 1:
                raise WorkloadError(f"relation {r.name!r}: cardinality must be >= 1")
        known = set(names)
        for i, p in enumerate(self.predicates):
            if p.left == p.right:
                raise WorkloadError(f"predicate {i}: joins a relation with itself")
            if p.left not in known or p.right not in known:
                raise WorkloadError(f"predicate {i}: unknown relation {p.left!r} or {p.right!r}")
            if not (0.0 < p.selectivity <= 1.0):
                raise WorkloadError(f"predicate {i}: selectivity {p.selectivity} outside (0, 1]")
        object.__setattr__(self, "_card", {r.name: r.cardinality for r in self.relations})

    def cardinality_of(self, name: str) -> int:
        return self._card[name]


@dataclass(frozen=True)
class QuerySpec:
    """One query: a connected subset of relations plus the predicates joining them."""

    id: str
    relations: tuple[str, ...]
    predicates: tuple[int, ...]

    @staticmethod
    def build(catalog: Catalog, qid: str, relations: Iterable[str], predicates: Iterable[int]) -> "QuerySpec":
        rels = tuple(sorted(relations))
        preds = tuple(sorted(predicates))
        if len(rels) < 2:
            raise WorkloadError(f"query {qid!r}: needs at least 2 relations")
        if len(set(rels)) != len(rels):
            raise WorkloadError(f"query {qid!r}: duplicate relations")
        known = {r.name for r in catalog.relations}
        for r in rels:
            if r not in known:
                raise WorkloadError(f"query {qid!r}: unknown relation {r!r}")
        if len(set(preds)) != len(preds):
            raise WorkloadError(f"query {qid!r}: duplicate predicate index")
        rel_set = set(rels)
        for i in preds:
            if not (0 <= i < len(catalog.predicates)):
                raise WorkloadError(f"query {qid!r}: predicate index {i} out of range")
            p = catalog.predicates[i]
            if p.left not in rel_set or p.right not in rel_set:
                raise WorkloadError(f"query {qid!r}: predicate {i} references relations outside the query")
        q = QuerySpec(id=qid, relations=rels, predicates=preds)
        if not _connected(rel_set, [catalog.predicates[i] for i in preds]):
            raise WorkloadError(f"query {qid!r}: join graph is disconnected (cross products rejected)")
        return q


def _connected(relations: set[str], predicates: list[Predicate]) -> bool:
    if not relations:
        return False
    adj: dict[str, set[str]] = {r: set() for r in relations}
    for p in predicates:
        if p.left in adj and p.right in adj:
            adj[p.left].add(p.right)
            adj[p.right].add(p.left)
    seen = set()
    stack = [next(iter(sorted(relations)))]
    while stack:
        v = stack.pop()
        if v in seen:
            continue
        seen.add(v)
        stack.extend(adj[v] - seen)
    return seen == relations


@dataclass(frozen=True)
class PlanTree:
    """Binary join tree; leaves are relation names.

    Exactly one of `relation` (leaf) or `left`/`right` (join node) is set.
    """

    relation: str | None = None
    left: "PlanTree | None" = None
    right: "PlanTree | None" = None

    @staticmethod
    def leaf(name: str) -> "PlanTree":
        return PlanTree(relation=name)

    @staticmethod
    def join(left: "PlanTree", right: "PlanTree") -> "PlanTree":
        return PlanTree(left=left, right=right)

    @property
    def is_leaf(self) -> bool:
        return self.relation is not None

    def leaves(self) -> Iterator[str]:
        if self.is_leaf:
            yield self.relation  # type: ignore[misc]
        else:
            yield from self.left.leaves()  # type: ignore[union-attr]
            yield from self.right.leaves()  # type: ignore[union-attr]

    def leaf_set(self) -> frozenset[str]:
        return frozenset(self.leaves())

    def subtrees(self) -> Iterator["PlanTree"]:
        """All internal nodes, bottom-up."""
        if not self.is_leaf:
            yield from self.left.subtrees()  # type: ignore[union-attr]
            yield from self.right.subtrees()  # type: ignore[union-attr]
            yield self

    def canonical(self) -> str:
        if self.is_leaf:
            return self.relation  # type: ignore[return-value]
        return f"({self.left.canonical()} {self.right.canonical()})"  # type: ignore[union-attr]


def load_workload(text: str) -> tuple[Catalog, list[QuerySpec]]:
    """Parse and validate a workload document.

    The document is JSON with three top-level keys:

    * ``relations``:  list of ``{"name": str, "cardinality": int >= 1}``
    * ``predicates``: list of ``{"left": str, "right": str, "selectivity": float in (0, 1]}``
    * ``queries``:    list of ``{"id": str, "relations": [str, ...],
      "predicates": [int, ...]}`` where predicate entries index into the
      top-level predicate list and must be internal to the query's relations.

    Queries whose join graph is disconnected are rejected: the cost model
    prices no cross products.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorkloadError(f"workload document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise WorkloadError("workload document must be a JSON object")
    for key in ("relations", "predicates", "queries"):
        if key not in doc or not isinstance(doc[key], list):
            raise WorkloadError(f"workload document missing list field {key!r}")

    relations = []
    for i, entry in enumerate(doc["relations"]):
        try:
            relations.append(Relation(name=str(entry["name"]), cardinality=int(entry["cardinality"])))
        except (TypeError, KeyError, ValueError) as exc:
            raise WorkloadError(f"relation entry {i} malformed: {exc}") from exc
    predicates = []
    for i, entry in enumerate(doc["predicates"]):
        try:
            predicates.append(
                Predicate(left=str(entry["left"]), right=str(entry["right"]), selectivity=float(entry["selectivity"]))
            )
        except (TypeError, KeyError, ValueError) as exc:
            raise WorkloadError(f"predicate entry {i} malformed: {exc}") from exc

    catalog = Catalog(relations=tuple(relations), predicates=tuple(predicates))

    queries = []
    seen_ids = set()
    for i, entry in enumerate(doc["queries"]):
        try:
            qid = str(entry["id"])
            rels = [str(r) for r in entry["relations"]]
            preds = [int(p) for p in entry["predicates"]]
        except (TypeError, KeyError, ValueError) as exc:
            raise WorkloadError(f"query entry {i} malformed: {exc}") from exc
        if qid in seen_ids:
            raise WorkloadError(f"duplicate query id {qid!r}")
        seen_ids.add(qid)
        queries.append(QuerySpec.build(catalog, qid, rels, preds))
    return catalog, queries


def serialize_workload(catalog: Catalog, queries: Iterable[QuerySpec]) -> str:
    """Canonical textual form; loading it back yields equal objects."""
    doc = {
        "relations": [{"name": r.name, "cardinality": r.cardinality} for r in catalog.relations],
        "predicates": [
            {"left": p.left, "right": p.right, "selectivity": p.selectivity} for p in catalog.predicates
        ],
        "queries": [
            {"id": q.id, "relations": list(q.relations), "predicates": list(q.predicates)} for q in queries
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def estimate_cardinality(catalog: Catalog, query: QuerySpec, subset: Iterable[str]) -> float:
    """Estimated rows of joining `subset` under independence, clamped at 1.

    The subset must be connected under the query's predicates; joining a
    disconnected subset would be a cross product, which the model refuses
    to price.
    """
    sub = frozenset(subset)
    if not sub:
        raise CostModelError("cannot estimate cardinality of an empty relation set")
    qrels = set(query.relations)
    if not sub <= qrels:
        raise CostModelError(f"subset {sorted(sub)} not contained in query relations")
    internal = [catalog.predicates[i] for i in query.predicates
                if catalog.predicates[i].left in sub and catalog.predicates[i].right in sub]
    if not _connected(set(sub), internal):
        raise CostModelError(f"subset {sorted(sub)} is disconnected under the query's predicates")
    value = math.prod(float(catalog.cardinality_of(r)) for r in sorted(sub))
    value *= math.prod(p.selectivity for p in internal)
    return max(1.0, value)


def plan_cost(catalog: Catalog, query: QuerySpec, plan: PlanTree) -> float:
    """Sum of estimated intermediate-result cardinalities over all joins."""
    leaves = list(plan.leaves())
    if sorted(leaves) != sorted(query.relations):
        raise CostModelError(
            f"plan leaves {sorted(leaves)} do not match query relations {sorted(query.relations)}"
        )
    return sum(estimate_cardinality(catalog, query, node.leaf_set()) for node in plan.subtrees())
