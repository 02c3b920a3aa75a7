"""Iterative correlation relaxation.

The solver never drops variables, only couplings: scoring ranks every
coupling by magnitude weighted with problem semantics (penalty couplings
are protected, objective couplings weigh in by the size of the relation
their two joins share), pruning keeps the top fraction, and sampling the
reduced problem produces feedback that selectively reactivates couplings.

Feedback compares the empirical sample distribution against the Boltzmann
distribution of the full problem restricted to the sampled support. Their
KL divergence is the convergence statistic, and the per-coupling gap in
second moments, scaled by the coupling weight, is the reactivation score:
it is the magnitude of the KL gradient with respect to that coupling in
the exponential family, so reintroduction follows the steepest residual
mismatch.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .budget import MODELED_REFINE_MS, BudgetClock
from .catalog import Catalog, PlanTree, QuerySpec, estimate_cardinality, plan_cost
from .joingraph import JoinGraph
from .qubo import Assignment, Qubo, TermClass, VarMap, decode_and_repair, energy
from .sampler import SamplerParams, SamplerTiming, SampleSet, empirical_distribution

__all__ = [
    "ReducedQubo",
    "Feedback",
    "RelaxConfig",
    "IterationRecord",
    "score_correlations",
    "prune",
    "kl_divergence",
    "js_divergence",
    "analyze_feedback",
    "reintroduce",
    "relax_loop",
    "resolve_beta",
]

Pair = tuple[int, int]
Distribution = Mapping[Assignment, float]


@dataclass(frozen=True)
class RelaxConfig:
    """Knobs of the relaxation loop; defaults target two-iteration solves."""

    keep_fraction: float = 0.5
    reintroduce_fraction: float = 0.1
    constraint_protection: float = 10.0
    beta: float | None = None
    max_iterations: int = 2
    stability_epsilon: float = 0.05
    patience: int = 2
    entropy_fallback: bool = True

    def __post_init__(self):
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ValueError("keep_fraction must be in (0, 1]")
        if self.reintroduce_fraction <= 0 or self.constraint_protection < 1:
            raise ValueError("reintroduce_fraction must be positive, constraint_protection >= 1")
        if self.max_iterations < 1 or self.patience < 1:
            raise ValueError("max_iterations and patience must be >= 1")
        if self.stability_epsilon <= 0:
            raise ValueError("stability_epsilon must be positive")


@dataclass(frozen=True)
class ReducedQubo:
    """A view of `base` with only `active_pairs` couplings in effect.

    Linear terms and the offset are always retained in full; relaxing
    never alters a coefficient, it only deactivates couplings.
    """

    base: Qubo
    active_pairs: frozenset[Pair]

    def __post_init__(self):
        extras = self.active_pairs - set(self.base.quadratic)
        if extras:
            raise ValueError(f"active pairs not present in the base QUBO: {sorted(extras)[:3]}")

    def effective(self) -> Qubo:
        quadratic = {p: self.base.quadratic[p] for p in sorted(self.active_pairs)}
        classes = {k: v for k, v in self.base.term_class.items()
                   if not isinstance(k, tuple) or k in quadratic}
        return Qubo(
            n=self.base.n,
            linear=dict(self.base.linear),
            quadratic=quadratic,
            term_class=classes,
            offset=self.base.offset,
            constraint_linear=dict(self.base.constraint_linear),
            constraint_offset=self.base.constraint_offset,
        )

    def inactive_pairs(self) -> list[Pair]:
        return sorted(set(self.base.quadratic) - self.active_pairs)


def resolve_beta(qubo: Qubo) -> float:
    """Default inverse temperature: keeps Boltzmann weights non-degenerate."""
    largest = qubo.max_abs_coefficient()
    return 1.0 / largest if largest > 0 else 1.0


def score_correlations(
    qubo: Qubo,
    varmap: VarMap,
    graph: JoinGraph,
    catalog: Catalog,
    query: QuerySpec,
    constraint_protection: float = 10.0,
) -> dict[Pair, float]:
    """Importance score per coupling: |J| x class multiplier x semantic factor.

    Penalty couplings are multiplied by the protection factor so validity
    structure survives pruning. Objective couplings between two joins are
    scaled by the estimated cardinality of the relations those joins
    share, normalized to (0, 1] over the present couplings: correlations
    around large intermediate results matter most.
    """
    shared_cards: dict[Pair, float] = {}
    for pair in qubo.quadratic:
        if qubo.class_of(pair) is TermClass.OBJECTIVE:
            e1 = varmap.slot(pair[0])[0]
            e2 = varmap.slot(pair[1])[0]
            shared = graph.shared_relations(e1, e2)
            shared_cards[pair] = estimate_cardinality(catalog, query, shared) if shared else 1.0
    norm = max(shared_cards.values(), default=1.0)
    scores: dict[Pair, float] = {}
    for pair, weight in qubo.quadratic.items():
        if qubo.class_of(pair) is TermClass.CONSTRAINT:
            scores[pair] = abs(weight) * constraint_protection
        else:
            scores[pair] = abs(weight) * (shared_cards.get(pair, norm) / norm)
    return scores


def prune(qubo: Qubo, scores: Mapping[Pair, float], config: RelaxConfig) -> ReducedQubo:
    """Keep the top `keep_fraction` of couplings by score, ties by pair index."""
    missing = set(qubo.quadratic) - set(scores)
    if missing:
        raise ValueError(f"scores missing for couplings {sorted(missing)[:3]}")
    ordered = sorted(qubo.quadratic, key=lambda p: (-scores[p], p))
    keep = math.ceil(config.keep_fraction * len(ordered))
    return ReducedQubo(base=qubo, active_pairs=frozenset(ordered[:keep]))


def kl_divergence(p: Distribution, q: Distribution, epsilon: float = 1e-9) -> float:
    """KL(p || q) over the union support, with q smoothed by epsilon."""
    support = set(p) | set(q)
    q_mass = sum(q.get(x, 0.0) + epsilon for x in support)
    total = 0.0
    for x in support:
        px = p.get(x, 0.0)
        if px <= 0.0:
            continue
        qx = (q.get(x, 0.0) + epsilon) / q_mass
        total += px * math.log(px / qx)
    return max(0.0, total)


def js_divergence(p: Distribution, q: Distribution) -> float:
    """Jensen-Shannon divergence; bounded and symmetric, the fallback statistic."""
    support = set(p) | set(q)
    mid = {x: 0.5 * (p.get(x, 0.0) + q.get(x, 0.0)) for x in support}
    def half(d):
        acc = 0.0
        for x, dx in d.items():
            if dx > 0.0:
                acc += dx * math.log(dx / mid[x])
        return acc
    return max(0.0, 0.5 * half(p) + 0.5 * half(q))


@dataclass(frozen=True)
class Feedback:
    """Everything one sampling round tells us about the relaxation."""

    kl: float
    js: float
    moment_gaps: dict[Pair, float] = field(default_factory=dict)
    constraint_pressure: dict[Pair, float] = field(default_factory=dict)
    h1_violations: int = 0
    h2_violations: int = 0
    best_plan: PlanTree | None = None
    best_plan_cost: float = math.inf
    energy_mean: float = 0.0
    energy_variance: float = 0.0

    def __post_init__(self):
        if self.kl < 0 or self.js < 0:
            raise ValueError("divergences must be non-negative")
        if any(g < 0 for g in self.moment_gaps.values()):
            raise ValueError("moment gaps must be non-negative")


def analyze_feedback(
    full: Qubo,
    reduced: ReducedQubo,
    samples: SampleSet,
    varmap: VarMap,
    graph: JoinGraph,
    catalog: Catalog,
    query: QuerySpec,
    beta: float | None = None,
) -> Feedback:
    """Compare samples of the reduced problem against the full problem.

    The target distribution is Boltzmann in the full energy, restricted to
    the sampled support (full-space normalization is intractable). Each
    distinct sample is decoded to a plan for solution-quality and
    violation feedback.
    """
    if not samples.rows:
        raise ValueError("cannot analyze an empty sample set")
    if beta is None:
        beta = resolve_beta(full)

    q_dist = empirical_distribution(samples)
    support = sorted(q_dist)
    log_w = [-beta * energy(full, x) for x in support]
    peak = max(log_w)
    weights = [math.exp(lw - peak) for lw in log_w]
    mass = sum(weights)
    p_dist = {x: w / mass for x, w in zip(support, weights)}

    kl = kl_divergence(p_dist, q_dist)
    js = js_divergence(p_dist, q_dist)

    moment_gaps: dict[Pair, float] = {}
    pressure: dict[Pair, float] = {}
    for pair in reduced.inactive_pairs():
        i, j = pair
        p_moment = sum(p_dist[x] for x in support if x[i] and x[j])
        q_moment = sum(q_dist[x] for x in support if x[i] and x[j])
        moment_gaps[pair] = abs(p_moment - q_moment) * abs(full.quadratic[pair])
        if full.class_of(pair) is TermClass.CONSTRAINT:
            pressure[pair] = q_moment

    h1 = h2 = 0
    best_plan = None
    best_cost = math.inf
    for x in support:
        plan, _, report = decode_and_repair(varmap, graph, catalog, query, x)
        h1 += report.h1_violations
        h2 += report.h2_violations
        cost = plan_cost(catalog, query, plan)
        if cost < best_cost:
            best_plan, best_cost = plan, cost

    total = samples.total_occurrences()
    mean = sum(r.energy * r.occurrences for r in samples.rows) / total
    variance = sum((r.energy - mean) ** 2 * r.occurrences for r in samples.rows) / total

    return Feedback(
        kl=kl,
        js=js,
        moment_gaps=moment_gaps,
        constraint_pressure=pressure,
        h1_violations=h1,
        h2_violations=h2,
        best_plan=best_plan,
        best_plan_cost=best_cost,
        energy_mean=mean,
        energy_variance=variance,
    )


def reintroduce(reduced: ReducedQubo, feedback: Feedback, config: RelaxConfig) -> ReducedQubo:
    """Reactivate the most-missed couplings.

    Penalty couplings that samples actually violate come first, then
    everything else by moment gap, ties by pair index.
    """
    inactive = reduced.inactive_pairs()
    if not inactive:
        return reduced
    def rank(pair: Pair):
        violated = (
            reduced.base.class_of(pair) is TermClass.CONSTRAINT
            and feedback.constraint_pressure.get(pair, 0.0) > 0.0
        )
        return (0 if violated else 1, -feedback.moment_gaps.get(pair, 0.0), pair)
    budgeted = math.ceil(config.reintroduce_fraction * len(inactive))
    chosen = sorted(inactive, key=rank)[:budgeted]
    return ReducedQubo(base=reduced.base, active_pairs=reduced.active_pairs | set(chosen))


@dataclass(frozen=True)
class IterationRecord:
    """One relaxation iteration, as exported to the trace CSV."""

    index: int
    timing: SamplerTiming
    refine_ms: float
    kl: float
    violations: int
    active_pairs: int
    best_cost: float


def relax_loop(
    qubo: Qubo,
    varmap: VarMap,
    graph: JoinGraph,
    catalog: Catalog,
    query: QuerySpec,
    sampler: Callable[[Qubo, SamplerParams], SampleSet],
    params: SamplerParams,
    budget: BudgetClock,
    config: RelaxConfig | None = None,
) -> tuple[PlanTree, float, list[IterationRecord]]:
    """Budgeted prune / sample / analyze / reintroduce loop.

    Keeps the best-cost decoded plan across iterations. Stops when the
    best cost has not improved for `patience` iterations, when the
    convergence statistic stabilizes below `stability_epsilon` relative
    change, when `max_iterations` is reached, or when the budget denies
    the next iteration. If the KL statistic oscillates, the stopping
    statistic switches to the Jensen-Shannon divergence.
    """
    config = config or RelaxConfig()
    beta = config.beta if config.beta is not None else resolve_beta(qubo)
    best_plan: PlanTree | None = None
    best_cost = math.inf
    trace: list[IterationRecord] = []
    reduced: ReducedQubo | None = None
    feedback: Feedback | None = None
    stats: list[float] = []
    deltas: list[float] = []
    use_js = False
    non_improving = 0

    for index in range(1, config.max_iterations + 1):
        if not budget.admits():
            break
        refine_started = time.perf_counter()
        if reduced is None:
            scores = score_correlations(
                qubo, varmap, graph, catalog, query, config.constraint_protection
            )
            reduced = prune(qubo, scores, config)
        else:
            reduced = reintroduce(reduced, feedback, config)

        sample_params = params.with_seed(params.seed + 1009 * (index - 1))
        samples = sampler(reduced.effective(), sample_params)
        feedback = analyze_feedback(qubo, reduced, samples, varmap, graph, catalog, query, beta)

        if feedback.best_plan_cost < best_cost:
            best_plan, best_cost = feedback.best_plan, feedback.best_plan_cost
            non_improving = 0
        else:
            non_improving += 1

        if params.modeled_timing:
            refine_ms = MODELED_REFINE_MS
        else:
            refine_ms = (time.perf_counter() - refine_started) * 1000.0 - samples.timing.end_to_end_ms
            refine_ms = max(0.0, refine_ms)
        transport_ms = samples.timing.ingress_ms + samples.timing.egress_ms
        budget.record(f"relax-{index}", samples.timing.solve_ms, transport_ms, refine_ms)
        trace.append(
            IterationRecord(
                index=index,
                timing=samples.timing,
                refine_ms=refine_ms,
                kl=feedback.kl,
                violations=feedback.h1_violations + feedback.h2_violations,
                active_pairs=len(reduced.active_pairs),
                best_cost=best_cost,
            )
        )

        stat = feedback.js if use_js else feedback.kl
        if stats:
            deltas.append(stat - stats[-1])
        stats.append(stat)
        if non_improving >= config.patience:
            break
        if len(stats) >= 2:
            rel_change = abs(stats[-1] - stats[-2]) / max(abs(stats[-2]), 1e-12)
            if rel_change < config.stability_epsilon:
                break
        if (
            config.entropy_fallback
            and not use_js
            and len(deltas) >= 3
            and deltas[-3] * deltas[-2] < 0
            and deltas[-2] * deltas[-1] < 0
        ):
            use_js = True

    if best_plan is None:
        # budget denied even the first iteration: fall back to the pure
        # greedy repair of the empty assignment
        best_plan, _, _ = decode_and_repair(varmap, graph, catalog, query, (0,) * varmap.n)
        best_cost = plan_cost(catalog, query, best_plan)
    return best_plan, best_cost, trace
