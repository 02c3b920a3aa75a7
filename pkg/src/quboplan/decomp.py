"""Decomposition, simulated-hardware embedding, and composition.

Problems above sampler capacity are split along the join graph: a
Kernighan-Lin style bisection of the relations minimizes cut predicates,
every variable column of a cut predicate is shared between the two sides,
and couplings internal to several parts are down-weighted so the pieces
sum back to the original exactly. Same-step penalty couplings between
edges that ended up in different exclusive regions fit in no part; they
are kept in a residual bucket that the conservation audit includes and
the composition stage (consensus plus full-problem tabu refinement)
compensates for.

Embedding places logical variables on a degree-bounded hardware graph
(default: king-graph grid), growing chains of physical nodes only where
single-node placements cannot realize a coupling. Chain disagreements
after sampling are repaired by majority vote.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import EmbeddingError, PartitionError
from .joingraph import JoinGraph
from .qubo import Assignment, Qubo, TermClass, VarMap, energy, to_dense
from .sampler import SamplerParams, SampleSet

__all__ = [
    "HardwareGraph",
    "Embedding",
    "SubProblem",
    "Partitioning",
    "partition_join_graph",
    "embed",
    "verify_embedding",
    "embed_qubo_on_hardware",
    "resolve_chains",
    "allocate_sampling",
    "weighted_consensus",
    "compose_bp",
    "tabu_refine",
    "clear_embedding_cache",
]

Pair = tuple[int, int]

TABU_TENURE = 7


@dataclass(frozen=True)
class HardwareGraph:
    """Simulated annealer topology: degree-bounded, connected."""

    nodes: tuple[int, ...]
    adjacency: dict[int, frozenset[int]]
    degree_bound: int = 8

    def __post_init__(self):
        node_set = set(self.nodes)
        for v, nbrs in self.adjacency.items():
            if v not in node_set or not nbrs <= node_set:
                raise ValueError("adjacency references unknown nodes")
            if len(nbrs) > self.degree_bound:
                raise ValueError(f"node {v} exceeds degree bound {self.degree_bound}")
            for u in nbrs:
                if v not in self.adjacency[u]:
                    raise ValueError("adjacency must be symmetric")
        if not self._connected():
            raise ValueError("hardware graph must be connected")

    def _connected(self) -> bool:
        if not self.nodes:
            return False
        seen = {self.nodes[0]}
        stack = [self.nodes[0]]
        while stack:
            v = stack.pop()
            for u in self.adjacency[v]:
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        return len(seen) == len(self.nodes)

    @property
    def capacity(self) -> int:
        return len(self.nodes)

    def signature(self) -> tuple:
        return (self.nodes, tuple(sorted((v, tuple(sorted(n))) for v, n in self.adjacency.items())))

    @staticmethod
    def from_edges(nodes: Sequence[int], edges: Sequence[Pair], degree_bound: int = 8) -> "HardwareGraph":
        adj: dict[int, set[int]] = {v: set() for v in nodes}
        for u, v in edges:
            adj[u].add(v)
            adj[v].add(u)
        return HardwareGraph(
            nodes=tuple(sorted(nodes)),
            adjacency={v: frozenset(n) for v, n in adj.items()},
            degree_bound=degree_bound,
        )

    @staticmethod
    def king_grid(rows: int, cols: int) -> "HardwareGraph":
        """Grid with 8-neighborhood links, the default simulated topology."""
        if rows < 1 or cols < 1:
            raise ValueError("grid dimensions must be positive")
        nodes = list(range(rows * cols))
        edges = []
        for r in range(rows):
            for c in range(cols):
                v = r * cols + c
                for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < rows and 0 <= cc < cols:
                        edges.append((v, rr * cols + cc))
        return HardwareGraph.from_edges(nodes, edges)


@dataclass(frozen=True)
class Embedding:
    """Logical variable -> chain of physical nodes, plus the chain coupling weight."""

    chains: dict[int, tuple[int, ...]]
    chain_strength: float


# in-run template memo: identical (coupling structure, topology) pairs reuse
# the computed placement
_template_cache: dict[tuple, Embedding] = {}


def clear_embedding_cache() -> None:
    _template_cache.clear()


def _bfs_distances(hw: HardwareGraph, sources: Sequence[int]) -> dict[int, int]:
    dist = {s: 0 for s in sources}
    frontier = sorted(sources)
    d = 0
    while frontier:
        d += 1
        nxt = []
        for v in frontier:
            for u in sorted(hw.adjacency[v]):
                if u not in dist:
                    dist[u] = d
                    nxt.append(u)
        frontier = nxt
    return dist


def _free_distances(hw: HardwareGraph, chain: Sequence[int], free: set[int]) -> dict[int, int]:
    """Routable distance: free hops needed before a node touches the chain."""
    dist: dict[int, int] = {}
    frontier = []
    for n in sorted(chain):
        for u in sorted(hw.adjacency[n]):
            if u in free and u not in dist:
                dist[u] = 0
                frontier.append(u)
    d = 0
    while frontier:
        d += 1
        nxt = []
        for v in frontier:
            for u in sorted(hw.adjacency[v]):
                if u in free and u not in dist:
                    dist[u] = d
                    nxt.append(u)
        frontier = nxt
    return dist


def embed(qubo: Qubo, hw: HardwareGraph) -> Embedding:
    """Greedy place-and-route embedding of the QUBO's coupling graph.

    Variables are placed densest-coupled first. Each new variable starts
    at the free node with the smallest total routable distance to the
    chains of its already-placed neighbors, then grows its own chain
    along free shortest paths until it touches every one of them, so
    interacting variables (same join, same step, adjacent steps) occupy
    adjacent regions and every coupling is realized at placement time.
    Raises when the topology cannot host the problem; callers should
    re-partition smaller or pick a larger simulated device.
    """
    if qubo.n > hw.capacity:
        raise EmbeddingError(f"{qubo.n} logical variables exceed hardware capacity {hw.capacity}")
    cache_key = (qubo.n, tuple(sorted(qubo.quadratic)), hw.signature())
    cached = _template_cache.get(cache_key)
    if cached is not None:
        return replace(cached, chain_strength=_chain_strength(qubo))

    coupled: dict[int, set[int]] = {v: set() for v in range(qubo.n)}
    for i, j in qubo.quadratic:
        coupled[i].add(j)
        coupled[j].add(i)
    order = sorted(range(qubo.n), key=lambda v: (-len(coupled[v]), v))

    free = set(hw.nodes)
    chains: dict[int, list[int]] = {}
    unreachable = len(hw.nodes) ** 2
    for v in order:
        targets = [u for u in sorted(coupled[v]) if u in chains]
        if not chains:
            spot = hw.nodes[len(hw.nodes) // 2]
        elif not targets:
            dist = _bfs_distances(hw, sorted(n for ch in chains.values() for n in ch))
            spot = min(free, key=lambda f: (dist.get(f, unreachable), f), default=None)
        else:
            score = {f: 0 for f in free}
            for u in targets:
                dist = _free_distances(hw, chains[u], free)
                for f in free:
                    score[f] += dist.get(f, unreachable)
            spot = min(free, key=lambda f: (score[f], f), default=None)
        if spot is None:
            raise EmbeddingError(f"no free node left to place variable {v}")
        chain = [spot]
        free.discard(spot)
        pending = [u for u in targets if not _touching(hw, chain, chains[u])]
        while pending:
            u = pending[0]
            path = _grow_chain(hw, chain, chains[u], free)
            if path is None:
                raise EmbeddingError(
                    f"cannot realize coupling ({min(u, v)}, {max(u, v)}); "
                    "topology too small or fragmented"
                )
            chain.extend(path)
            free.difference_update(path)
            pending = [w for w in pending if not _touching(hw, chain, chains[w])]
        chains[v] = chain

    embedding = Embedding(
        chains={v: tuple(ch) for v, ch in chains.items()},
        chain_strength=_chain_strength(qubo),
    )
    _template_cache[cache_key] = embedding
    return embedding


def _chain_strength(qubo: Qubo) -> float:
    largest = max((abs(v) for v in qubo.quadratic.values()), default=1.0)
    return 1.5 * largest


def _touching(hw: HardwareGraph, chain_a: Sequence[int], chain_b: Sequence[int]) -> bool:
    b = set(chain_b)
    return any(b & hw.adjacency[n] for n in chain_a)


def _grow_chain(hw, source_chain, target_chain, free):
    """Shortest free path from `source_chain` to the neighborhood of `target_chain`."""
    target_halo = set()
    for n in target_chain:
        target_halo |= hw.adjacency[n]
    parent: dict[int, int | None] = {}
    frontier = []
    for n in sorted(source_chain):
        for u in sorted(hw.adjacency[n]):
            if u in free and u not in parent:
                parent[u] = None
                frontier.append(u)
    while frontier:
        nxt = []
        for v in frontier:
            if v in target_halo:
                path = [v]
                while parent[path[-1]] is not None:
                    path.append(parent[path[-1]])
                return list(reversed(path))
            for u in sorted(hw.adjacency[v]):
                if u in free and u not in parent:
                    parent[u] = v
                    nxt.append(u)
        frontier = nxt
    return None


def verify_embedding(qubo: Qubo, hw: HardwareGraph, embedding: Embedding) -> list[str]:
    """Independent check of the three embedding invariants; empty list means valid."""
    problems = []
    node_set = set(hw.nodes)
    seen: dict[int, int] = {}
    for v in range(qubo.n):
        chain = embedding.chains.get(v)
        if not chain:
            problems.append(f"variable {v} has no chain")
            continue
        for n in chain:
            if n not in node_set:
                problems.append(f"chain of {v} uses unknown node {n}")
            if n in seen:
                problems.append(f"node {n} shared by chains of {seen[n]} and {v}")
            seen[n] = v
        members = set(chain)
        reached = {chain[0]}
        stack = [chain[0]]
        while stack:
            x = stack.pop()
            for u in hw.adjacency.get(x, ()):  # restrict walk to the chain
                if u in members and u not in reached:
                    reached.add(u)
                    stack.append(u)
        if reached != members:
            problems.append(f"chain of {v} is not connected")
    for i, j in sorted(qubo.quadratic):
        ci = embedding.chains.get(i, ())
        cj = embedding.chains.get(j, ())
        if ci and cj and not _touching(hw, ci, cj):
            problems.append(f"coupling ({i}, {j}) has no physical link")
    if embedding.chain_strength <= 0:
        problems.append("chain strength must be positive")
    return problems


def embed_qubo_on_hardware(qubo: Qubo, hw: HardwareGraph, embedding: Embedding) -> tuple[Qubo, dict[int, int]]:
    """Physical-node QUBO with ferromagnetic chain penalties.

    Every logical bias is spread across its chain; every logical coupling
    is carried by one physical link between the two chains; intra-chain
    links get `strength * (x_a + x_b - 2 x_a x_b)`, which is zero when the
    chain agrees. Returns the physical QUBO (indices are compacted node
    positions) and the node -> physical-index map.
    """
    used_nodes = sorted(n for chain in embedding.chains.values() for n in chain)
    node_index = {n: k for k, n in enumerate(used_nodes)}
    linear: dict[int, float] = {}
    quadratic: dict[Pair, float] = {}

    def add_quad(a: int, b: int, w: float) -> None:
        key = (a, b) if a < b else (b, a)
        quadratic[key] = quadratic.get(key, 0.0) + w

    for v, h in qubo.linear.items():
        chain = embedding.chains[v]
        share = h / len(chain)
        for n in chain:
            linear[node_index[n]] = linear.get(node_index[n], 0.0) + share
    for (i, j), w in qubo.quadratic.items():
        link = None
        cj = set(embedding.chains[j])
        for a in embedding.chains[i]:
            hits = sorted(cj & hw.adjacency[a])
            if hits:
                link = (a, hits[0])
                break
        if link is None:
            raise EmbeddingError(f"embedding does not realize coupling ({i}, {j})")
        add_quad(node_index[link[0]], node_index[link[1]], w)
    strength = embedding.chain_strength
    for v, chain in embedding.chains.items():
        members = set(chain)
        for a in chain:
            for b in sorted(hw.adjacency[a] & members):
                if a < b:
                    linear[node_index[a]] = linear.get(node_index[a], 0.0) + strength
                    linear[node_index[b]] = linear.get(node_index[b], 0.0) + strength
                    add_quad(node_index[a], node_index[b], -2.0 * strength)
    physical = Qubo.build(n=len(used_nodes), linear=linear, quadratic=quadratic, offset=qubo.offset)
    return physical, node_index


def resolve_chains(
    sample: Mapping[int, int], embedding: Embedding
) -> tuple[Assignment, int]:
    """Majority-vote each chain down to its logical bit.

    Exact ties resolve to 0. Returns the logical assignment (indexed by
    logical variable) and the number of broken chains.
    """
    n = len(embedding.chains)
    bits = [0] * n
    broken = 0
    for v in range(n):
        chain = embedding.chains[v]
        values = [int(sample[node]) for node in chain]
        ones = sum(values)
        if 0 < ones < len(values):
            broken += 1
        bits[v] = 1 if 2 * ones > len(values) else 0
    return tuple(bits), broken


@dataclass(frozen=True)
class SubProblem:
    """One partition: its global variables and the sliced local QUBO."""

    variables: tuple[int, ...]
    qubo: Qubo
    cost_estimate: float

    def local_index(self, global_var: int) -> int:
        return self.variables.index(global_var)


@dataclass(frozen=True)
class Partitioning:
    parts: tuple[SubProblem, ...]
    shared: frozenset[int]
    residual: dict[Pair, float]
    n: int

    def reconstruct(self) -> Qubo:
        """Sum the parts (plus the residual bucket) back into one QUBO."""
        linear: dict[int, float] = {}
        quadratic: dict[Pair, float] = {}
        offset = 0.0
        for part in self.parts:
            offset += part.qubo.offset
            for li, v in part.qubo.linear.items():
                g = part.variables[li]
                linear[g] = linear.get(g, 0.0) + v
            for (li, lj), v in part.qubo.quadratic.items():
                gi, gj = part.variables[li], part.variables[lj]
                key = (gi, gj) if gi < gj else (gj, gi)
                quadratic[key] = quadratic.get(key, 0.0) + v
        for pair, v in self.residual.items():
            quadratic[pair] = quadratic.get(pair, 0.0) + v
        return Qubo.build(n=self.n, linear=linear, quadratic=quadratic, offset=offset)


def _kl_bisect(vertices: list[str], edges: list[tuple[str, str]], restarts: int = 8) -> tuple[set[str], set[str]]:
    """Balanced bisection minimizing crossing edges, Kernighan-Lin refinement.

    Deterministic: multi-start from rotations of the sorted vertex list,
    full KL passes of tentative pair swaps, best prefix applied.
    """
    n = len(vertices)
    half = n // 2
    ordered = sorted(vertices)
    weight: dict[tuple[str, str], int] = {}
    for u, v in edges:
        key = (u, v) if u <= v else (v, u)
        weight[key] = weight.get(key, 0) + 1

    def crossing(group_a: set[str]) -> int:
        return sum(w for (u, v), w in weight.items() if (u in group_a) != (v in group_a))

    def w(u: str, v: str) -> int:
        key = (u, v) if u <= v else (v, u)
        return weight.get(key, 0)

    best_cut = None
    best_a: set[str] = set()
    for start in range(min(restarts, n)):
        rotated = ordered[start:] + ordered[:start]
        a, b = set(rotated[:half]), set(rotated[half:])
        improved = True
        while improved:
            improved = False
            locked: set[str] = set()
            gains: list[tuple[int, str, str]] = []
            ta, tb = set(a), set(b)
            while len(locked) < 2 * min(len(ta), len(tb)):
                cand = None
                for u in sorted(ta - locked):
                    du = sum(w(u, x) for x in tb) - sum(w(u, x) for x in ta if x != u)
                    for v in sorted(tb - locked):
                        dv = sum(w(v, x) for x in ta) - sum(w(v, x) for x in tb if x != v)
                        gain = du + dv - 2 * w(u, v)
                        if cand is None or gain > cand[0]:
                            cand = (gain, u, v)
                if cand is None:
                    break
                gains.append(cand)
                _, u, v = cand
                ta.remove(u); ta.add(v)
                tb.remove(v); tb.add(u)
                locked |= {u, v}
            # apply the best prefix of tentative swaps
            prefix_gain, best_k = 0, 0
            running = 0
            for k, (g, _, _) in enumerate(gains, start=1):
                running += g
                if running > prefix_gain:
                    prefix_gain, best_k = running, k
            if prefix_gain > 0:
                for g, u, v in gains[:best_k]:
                    a.remove(u); a.add(v)
                    b.remove(v); b.add(u)
                improved = True
        cut = crossing(a)
        if best_cut is None or cut < best_cut or (cut == best_cut and sorted(a) < sorted(best_a)):
            best_cut, best_a = cut, set(a)
    return best_a, set(vertices) - best_a


def partition_join_graph(
    graph: JoinGraph,
    varmap: VarMap,
    qubo: Qubo,
    max_vars: int,
    edge_costs: Mapping[int, float] | None = None,
) -> Partitioning:
    """Split the problem along the join graph until parts fit the sampler.

    Relations are bisected recursively with a minimum-cut heuristic; a
    part's edges are those touching its relations, so every cut
    predicate's variable column is shared between the adjacent parts.
    Terms covered by several parts are split evenly; same-step couplings
    between edges of disjoint parts fit nowhere and land in the residual.
    """
    steps = varmap.num_steps
    if steps > max_vars:
        raise PartitionError(
            f"one edge column needs {steps} variables, above the capacity {max_vars}"
        )
    target = 0.8 * max_vars
    costs = dict(edge_costs or {e.index: 1.0 for e in graph.base_edges})

    def part_edge_indices(group: frozenset[str]) -> list[int]:
        return [e.index for e in graph.base_edges if e.a in group or e.b in group]

    groups: list[frozenset[str]] = []
    work = [frozenset(graph.vertices)]
    while work:
        group = work.pop(0)
        size = len(part_edge_indices(group)) * steps
        if size <= target or len(group) < 2:
            groups.append(group)
            continue
        internal = [
            (e.a, e.b) for e in graph.base_edges if e.a in group and e.b in group
        ]
        side_a, side_b = _kl_bisect(sorted(group), internal)
        if not side_a or not side_b:
            groups.append(group)
            continue
        work.append(frozenset(side_a))
        work.append(frozenset(side_b))
    groups.sort(key=lambda g: sorted(g))

    part_vars: list[tuple[int, ...]] = []
    for group in groups:
        edge_ids = part_edge_indices(group)
        variables = sorted(varmap.index(e, t) for e in edge_ids for t in range(1, steps + 1))
        part_vars.append(tuple(variables))

    coverage: dict[int, int] = {}
    for variables in part_vars:
        for v in variables:
            coverage[v] = coverage.get(v, 0) + 1
    shared = frozenset(v for v, c in coverage.items() if c > 1)

    pair_coverage: dict[Pair, int] = {}
    for variables in part_vars:
        var_set = set(variables)
        for pair in qubo.quadratic:
            if pair[0] in var_set and pair[1] in var_set:
                pair_coverage[pair] = pair_coverage.get(pair, 0) + 1

    parts = []
    for group, variables in zip(groups, part_vars):
        var_set = set(variables)
        local = {g: l for l, g in enumerate(variables)}
        linear = {local[g]: qubo.linear[g] / coverage[g] for g in variables if g in qubo.linear}
        quadratic = {}
        classes: dict = {}
        for (i, j), v in qubo.quadratic.items():
            if i in var_set and j in var_set:
                quadratic[(local[i], local[j])] = v / pair_coverage[(i, j)]
                classes[(local[i], local[j])] = qubo.class_of((i, j))
        sub = Qubo.build(
            n=len(variables),
            linear=linear,
            quadratic=quadratic,
            offset=qubo.offset / len(groups),
            term_class=classes,
        )
        cost = sum(costs.get(e, 1.0) for e in part_edge_indices(group))
        parts.append(SubProblem(variables=variables, qubo=sub, cost_estimate=cost))

    residual = {pair: v for pair, v in qubo.quadratic.items() if pair not in pair_coverage}
    return Partitioning(parts=tuple(parts), shared=shared, residual=residual, n=qubo.n)


def allocate_sampling(
    partitioning: Partitioning,
    base: SamplerParams,
    energy_variances: Sequence[float] | None = None,
    gamma: float = 0.5,
) -> list[SamplerParams]:
    """Per-part sampling effort, scaled by cost estimates.

    Sweeps scale as (cost / mean cost)^gamma, clamped to [0.25, 4] times
    the base; parts whose previous-round energy variance exceeded the
    median get their reads doubled. Part seeds derive from the base seed
    and the part index.
    """
    costs = [p.cost_estimate for p in partitioning.parts]
    mean = sum(costs) / len(costs)
    variance_median = None
    if energy_variances is not None:
        if len(energy_variances) != len(costs):
            raise ValueError("one energy variance per part expected")
        variance_median = statistics.median(energy_variances)
    out = []
    for index, cost in enumerate(costs):
        factor = (cost / mean) ** gamma if mean > 0 else 1.0
        factor = min(4.0, max(0.25, factor))
        reads = base.num_reads
        if variance_median is not None and energy_variances[index] > variance_median:
            reads *= 2
        out.append(
            replace(
                base,
                num_reads=reads,
                sweeps=max(1, round(base.sweeps * factor)),
                seed=base.seed + index + 1,
            )
        )
    return out


def weighted_consensus(marginals: Sequence[float], weights: Sequence[float]) -> float:
    """Weighted mean of per-part marginals; the clamp threshold is 0.5."""
    total = sum(weights)
    if total <= 0:
        return 0.5
    return sum(m * w for m, w in zip(marginals, weights)) / total


def _boltzmann_marginals(samples: SampleSet, local_vars: Sequence[int], beta: float) -> dict[int, float]:
    floor = samples.best().energy
    weights = [r.occurrences * math.exp(-beta * (r.energy - floor)) for r in samples.rows]
    mass = sum(weights)
    out = {}
    for li in local_vars:
        out[li] = sum(w for w, r in zip(weights, samples.rows) if r.assignment[li]) / mass
    return out


def _fold_clamped(sub: Qubo, variables: tuple[int, ...], clamped: Mapping[int, int]) -> tuple[Qubo, tuple[int, ...]]:
    """Fix the clamped globals inside a part's local QUBO."""
    keep = [g for g in variables if g not in clamped]
    if len(keep) == len(variables):
        return sub, variables
    old_local = {g: l for l, g in enumerate(variables)}
    new_local = {g: l for l, g in enumerate(keep)}
    linear: dict[int, float] = {}
    offset = sub.offset
    for g in variables:
        h = sub.linear.get(old_local[g], 0.0)
        if g in clamped:
            offset += h * clamped[g]
        elif h:
            linear[new_local[g]] = h
    quadratic: dict[Pair, float] = {}
    for (li, lj), w in sub.quadratic.items():
        gi, gj = variables[li], variables[lj]
        ci, cj = gi in clamped, gj in clamped
        if ci and cj:
            offset += w * clamped[gi] * clamped[gj]
        elif ci:
            if clamped[gi]:
                linear[new_local[gj]] = linear.get(new_local[gj], 0.0) + w
        elif cj:
            if clamped[gj]:
                linear[new_local[gi]] = linear.get(new_local[gi], 0.0) + w
        else:
            quadratic[(new_local[gi], new_local[gj])] = w
    if not keep:
        # fully clamped part: keep a dummy variable so the QUBO stays well-formed
        return Qubo.build(n=1, linear={}, quadratic={}, offset=offset), ()
    return Qubo.build(n=len(keep), linear=linear, quadratic=quadratic, offset=offset), tuple(keep)


def compose_bp(
    partitioning: Partitioning,
    part_samples: Sequence[SampleSet],
    full_qubo: Qubo,
    rounds: int = 3,
    beta: float | None = None,
    resampler: Callable[[int, int, Qubo], SampleSet] | None = None,
) -> Assignment:
    """Consensus-driven merge of per-part samples into one full assignment.

    Each round, parts owning a still-open shared variable report its
    Boltzmann-weighted marginal; the part votes are combined with weights
    exp(-beta * best part energy), the variable is clamped to the majority
    side (ties clamp to 1), clamps are folded into the parts' linear
    terms, and parts are re-sampled via `resampler(part, round, qubo)`.
    Exclusive variables take their part's best value at the end.
    """
    if len(part_samples) != len(partitioning.parts):
        raise ValueError("one sample set per part expected")
    if beta is None:
        largest = full_qubo.max_abs_coefficient()
        beta = 1.0 / largest if largest > 0 else 1.0

    current_vars = [p.variables for p in partitioning.parts]
    current_qubos = [p.qubo for p in partitioning.parts]
    current_samples = list(part_samples)
    clamped: dict[int, int] = {}

    for round_index in range(1, rounds + 1):
        open_shared = sorted(partitioning.shared - set(clamped))
        if open_shared:
            best_energies = [s.best().energy for s in current_samples]
            floor = min(best_energies)
            part_weight = [math.exp(-beta * (e - floor)) for e in best_energies]
            marginals_by_part = []
            for variables, samples in zip(current_vars, current_samples):
                local = {g: l for l, g in enumerate(variables)}
                wanted = [local[g] for g in open_shared if g in local]
                marginals_by_part.append(
                    {variables[li]: m for li, m in _boltzmann_marginals(samples, wanted, beta).items()}
                )
            for g in open_shared:
                votes = [
                    (marginals_by_part[p][g], part_weight[p])
                    for p in range(len(current_vars))
                    if g in marginals_by_part[p]
                ]
                consensus = weighted_consensus([v for v, _ in votes], [w for _, w in votes])
                clamped[g] = 1 if consensus >= 0.5 else 0
        if resampler is None:
            # without a resampler the loop cannot iterate; merge from the
            # round-one sample sets, with clamps overriding shared slots
            break
        folded = [_fold_clamped(q, v, clamped) for q, v in zip(current_qubos, current_vars)]
        current_qubos = [f[0] for f in folded]
        new_vars = [f[1] for f in folded]
        current_samples = [
            resampler(p, round_index, current_qubos[p]) if new_vars[p] else current_samples[p]
            for p in range(len(current_qubos))
        ]
        current_vars = new_vars

    merged = [-1] * partitioning.n
    for g, val in clamped.items():
        merged[g] = val
    for variables, samples in zip(current_vars, current_samples):
        if not variables:
            continue
        best = samples.best().assignment
        for li, g in enumerate(variables):
            if merged[g] < 0:
                merged[g] = int(best[li])
    if any(v < 0 for v in merged):
        missing = [i for i, v in enumerate(merged) if v < 0]
        raise AssertionError(f"composition left variables unassigned: {missing[:5]}")
    return tuple(merged)


def tabu_refine(qubo: Qubo, start: Assignment, move_budget: int = 2000) -> Assignment:
    """Single-bit-flip tabu search from `start`; never returns a worse state.

    Tenure is fixed at 7 moves with aspiration on strict improvement;
    stops after `move_budget` moves or max(200, 20 n) consecutive
    non-improving moves.
    """
    if len(start) != qubo.n:
        raise ValueError("start assignment length mismatch")
    h, mat, _ = to_dense(qubo)
    state = np.array(start, dtype=np.float64)
    fields = h + mat @ state
    current = energy(qubo, tuple(int(b) for b in start))
    best_state = state.copy()
    best_energy = current
    n = qubo.n
    tabu_until = np.zeros(n, dtype=np.int64)
    stagnation_limit = max(200, 20 * n)
    stagnant = 0
    move = 0
    while move < move_budget and stagnant < stagnation_limit:
        deltas = (1.0 - 2.0 * state) * fields
        allowed = (tabu_until <= move) | (current + deltas < best_energy - 1e-12)
        if not allowed.any():
            allowed[:] = True
        masked = np.where(allowed, deltas, np.inf)
        i = int(masked.argmin())
        delta = float(deltas[i])
        sign = 1.0 - 2.0 * state[i]
        state[i] = 1.0 - state[i]
        current += delta
        fields += sign * mat[:, i]
        tabu_until[i] = move + 1 + TABU_TENURE
        if current < best_energy - 1e-12:
            best_energy = current
            best_state = state.copy()
            stagnant = 0
        else:
            stagnant += 1
        move += 1
    return tuple(int(b) for b in best_state)
