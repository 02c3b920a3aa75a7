import json
import math
import random
import statistics

import pytest

from quboplan.budget import BudgetClock
from quboplan.catalog import load_workload, plan_cost
from quboplan.joingraph import build_join_graph, dp_optimal_plan
from quboplan.qubo import Qubo, TermClass, encode_join_order, energy
from quboplan.relax import (
    Feedback,
    ReducedQubo,
    RelaxConfig,
    analyze_feedback,
    js_divergence,
    kl_divergence,
    prune,
    reintroduce,
    relax_loop,
    score_correlations,
)
from quboplan.sampler import SamplerParams, SamplerTiming, SampleRow, SampleSet, sa_sample


def chain_workload(cards, sels):
    names = [f"r{i}" for i in range(len(cards))]
    doc = {
        "relations": [{"name": n, "cardinality": c} for n, c in zip(names, cards)],
        "predicates": [
            {"left": names[i], "right": names[i + 1], "selectivity": sels[i]}
            for i in range(len(sels))
        ],
        "queries": [{"id": "q", "relations": names, "predicates": list(range(len(sels)))}],
    }
    catalog, (query,) = load_workload(json.dumps(doc))
    return catalog, query


def encoded(catalog, query):
    graph = build_join_graph(query, catalog)
    qubo, varmap = encode_join_order(catalog, query, graph)
    return graph, qubo, varmap


def sample_set(qubo, rows):
    timing = SamplerTiming.local(solve_ms=1.0)
    return SampleSet(
        rows=tuple(SampleRow(a, energy(qubo, a), occ) for a, occ in rows),
        timing=timing,
    )


class TestScoreCorrelations:
    def test_constraint_pairs_scaled_by_protection(self, chain3):
        catalog, _, q = chain3
        graph, qubo, varmap = encoded(catalog, q)
        scores = score_correlations(qubo, varmap, graph, catalog, q, constraint_protection=10.0)
        for pair, weight in qubo.quadratic.items():
            if qubo.class_of(pair) is TermClass.CONSTRAINT:
                assert scores[pair] == pytest.approx(10.0 * abs(weight))

    def test_objective_pairs_ranked_by_shared_cardinality(self):
        # 4-relation chain: couplings around joins sharing r1 (card 1000)
        # must score 100x those sharing r2 (card 10).
        catalog, query = chain_workload([50, 1000, 10, 50], [0.5, 0.5, 0.5])
        graph, qubo, varmap = encoded(catalog, query)
        scores = score_correlations(qubo, varmap, graph, catalog, query)
        shared_b, shared_c = [], []
        for pair in qubo.quadratic:
            if qubo.class_of(pair) is not TermClass.OBJECTIVE:
                continue
            e1, e2 = varmap.slot(pair[0])[0], varmap.slot(pair[1])[0]
            shared = graph.shared_relations(e1, e2)
            if shared == frozenset({"r1"}):
                shared_b.append(scores[pair])
            elif shared == frozenset({"r2"}):
                shared_c.append(scores[pair])
        assert shared_b and shared_c
        for sb in shared_b:
            for sc in shared_c:
                assert sb == pytest.approx(100.0 * sc)

    def test_defaults_rank_all_penalties_above_objective(self, chain3):
        catalog, _, q = chain3
        graph, qubo, varmap = encoded(catalog, q)
        scores = score_correlations(qubo, varmap, graph, catalog, q)
        constraint_scores = [
            scores[p] for p in qubo.quadratic if qubo.class_of(p) is TermClass.CONSTRAINT
        ]
        objective_scores = [
            scores[p] for p in qubo.quadratic if qubo.class_of(p) is TermClass.OBJECTIVE
        ]
        assert min(constraint_scores) > max(objective_scores)


class TestPrune:
    def test_keep_all(self, chain3):
        catalog, _, q = chain3
        graph, qubo, varmap = encoded(catalog, q)
        scores = score_correlations(qubo, varmap, graph, catalog, q)
        reduced = prune(qubo, scores, RelaxConfig(keep_fraction=1.0))
        assert reduced.active_pairs == frozenset(qubo.quadratic)

    def test_top_half_of_distinct_scores(self):
        qubo = Qubo.build(
            n=4,
            quadratic={(0, 1): 1.0, (0, 2): 2.0, (0, 3): 3.0, (1, 2): 4.0},
        )
        scores = {p: abs(w) for p, w in qubo.quadratic.items()}
        reduced = prune(qubo, scores, RelaxConfig(keep_fraction=0.5))
        assert reduced.active_pairs == frozenset({(0, 3), (1, 2)})

    def test_chain3_keeps_every_penalty_pair(self, chain3):
        catalog, _, q = chain3
        graph, qubo, varmap = encoded(catalog, q)
        scores = score_correlations(qubo, varmap, graph, catalog, q, constraint_protection=10.0)
        reduced = prune(qubo, scores, RelaxConfig(keep_fraction=0.6))
        for pair in qubo.quadratic:
            if qubo.class_of(pair) is TermClass.CONSTRAINT:
                assert pair in reduced.active_pairs

    def test_missing_scores_rejected(self):
        qubo = Qubo.build(n=3, quadratic={(0, 1): 1.0, (1, 2): 2.0})
        with pytest.raises(ValueError, match="missing"):
            prune(qubo, {(0, 1): 1.0}, RelaxConfig())


class TestDivergences:
    def test_identical_distributions(self):
        p = {(0,): 0.4, (1,): 0.6}
        assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-7)

    def test_point_mass_vs_uniform(self):
        p = {(0,): 1.0, (1,): 0.0}
        q = {(0,): 0.5, (1,): 0.5}
        assert kl_divergence(p, q) == pytest.approx(math.log(2), abs=1e-6)

    def test_matches_direct_summation(self):
        rng = random.Random(4)
        for _ in range(20):
            keys = [(i,) for i in range(8)]
            pw = [rng.random() for _ in keys]
            qw = [rng.random() for _ in keys]
            p = {k: w / sum(pw) for k, w in zip(keys, pw)}
            q = {k: w / sum(qw) for k, w in zip(keys, qw)}
            eps = 1e-9
            mass = sum(q[k] + eps for k in keys)
            expected = sum(p[k] * math.log(p[k] / ((q[k] + eps) / mass)) for k in keys if p[k] > 0)
            assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-12)

    def test_nonnegative(self):
        rng = random.Random(9)
        for _ in range(50):
            keys = [(i,) for i in range(5)]
            pw = [rng.random() for _ in keys]
            qw = [rng.random() for _ in keys]
            p = {k: w / sum(pw) for k, w in zip(keys, pw)}
            q = {k: w / sum(qw) for k, w in zip(keys, qw)}
            assert kl_divergence(p, q) >= 0.0
            assert js_divergence(p, q) >= 0.0


class TestAnalyzeFeedback:
    def test_full_reduction_tiny_beta_gives_uniform_target(self, chain3):
        catalog, _, q = chain3
        graph, qubo, varmap = encoded(catalog, q)
        reduced = ReducedQubo(base=qubo, active_pairs=frozenset(qubo.quadratic))
        rows = [((1, 0, 0, 1), 1), ((0, 1, 1, 0), 3)]
        samples = sample_set(reduced.effective(), rows)
        fb = analyze_feedback(qubo, reduced, samples, varmap, graph, catalog, q, beta=1e-15)
        assert fb.moment_gaps == {}
        # P is uniform over the two support points, Q is (0.25, 0.75)
        expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
        assert fb.kl == pytest.approx(expected, abs=1e-6)

    def test_point_support_zero_divergence(self, chain3):
        catalog, _, q = chain3
        graph, qubo, varmap = encoded(catalog, q)
        reduced = ReducedQubo(base=qubo, active_pairs=frozenset(qubo.quadratic))
        samples = sample_set(reduced.effective(), [((1, 0, 0, 1), 7)])
        for beta in (1e-6, 0.1, 10.0):
            fb = analyze_feedback(qubo, reduced, samples, varmap, graph, catalog, q, beta=beta)
            assert fb.kl == pytest.approx(0.0, abs=1e-9)

    def test_moment_gaps_match_hand_computation(self, chain3):
        catalog, _, q = chain3
        graph, qubo, varmap = encoded(catalog, q)
        scores = score_correlations(qubo, varmap, graph, catalog, q)
        reduced = prune(qubo, scores, RelaxConfig(keep_fraction=0.5))
        samples = sa_sample(reduced.effective(), SamplerParams(num_reads=16, sweeps=50, seed=5))
        beta = 0.05
        fb = analyze_feedback(qubo, reduced, samples, varmap, graph, catalog, q, beta=beta)

        # independent recomputation of both expectations over the support
        total = samples.total_occurrences()
        q_dist = {r.assignment: r.occurrences / total for r in samples.rows}
        weights = {x: math.exp(-beta * energy(qubo, x)) for x in q_dist}
        mass = sum(weights.values())
        p_dist = {x: w / mass for x, w in weights.items()}
        for pair in reduced.inactive_pairs():
            i, j = pair
            pm = sum(pr for x, pr in p_dist.items() if x[i] and x[j])
            qm = sum(pr for x, pr in q_dist.items() if x[i] and x[j])
            expected = abs(pm - qm) * abs(qubo.quadratic[pair])
            assert fb.moment_gaps[pair] == pytest.approx(expected, rel=1e-9, abs=1e-12)

    def test_best_plan_is_decodable_and_costed(self, chain3):
        catalog, _, q = chain3
        graph, qubo, varmap = encoded(catalog, q)
        reduced = ReducedQubo(base=qubo, active_pairs=frozenset(qubo.quadratic))
        samples = sa_sample(reduced.effective(), SamplerParams(num_reads=8, sweeps=100, seed=1))
        fb = analyze_feedback(qubo, reduced, samples, varmap, graph, catalog, q)
        assert fb.best_plan is not None
        assert fb.best_plan_cost == pytest.approx(plan_cost(catalog, q, fb.best_plan))

    def test_empty_samples_rejected(self, chain3):
        catalog, _, q = chain3
        graph, qubo, varmap = encoded(catalog, q)
        reduced = ReducedQubo(base=qubo, active_pairs=frozenset(qubo.quadratic))
        empty = SampleSet(rows=(), timing=SamplerTiming.local(solve_ms=0.0))
        with pytest.raises(ValueError, match="empty"):
            analyze_feedback(qubo, reduced, empty, varmap, graph, catalog, q)


class TestReintroduce:
    def test_nothing_inactive_is_identity(self):
        qubo = Qubo.build(n=3, quadratic={(0, 1): 1.0})
        reduced = ReducedQubo(base=qubo, active_pairs=frozenset({(0, 1)}))
        fb = Feedback(kl=0.0, js=0.0)
        assert reintroduce(reduced, fb, RelaxConfig()) is reduced

    def test_violated_constraint_beats_larger_objective_gap(self):
        qubo = Qubo.build(
            n=4,
            quadratic={(0, 1): 5.0, (2, 3): -1.0},
            term_class={(0, 1): TermClass.CONSTRAINT, (2, 3): TermClass.OBJECTIVE},
        )
        reduced = ReducedQubo(base=qubo, active_pairs=frozenset())
        fb = Feedback(
            kl=0.1,
            js=0.05,
            moment_gaps={(0, 1): 0.2, (2, 3): 5.0},
            constraint_pressure={(0, 1): 0.5},
        )
        grown = reintroduce(reduced, fb, RelaxConfig(reintroduce_fraction=0.5))
        assert grown.active_pairs == frozenset({(0, 1)})

    def test_repeated_reintroduction_restores_everything(self, chain3):
        catalog, _, q = chain3
        graph, qubo, varmap = encoded(catalog, q)
        scores = score_correlations(qubo, varmap, graph, catalog, q)
        config = RelaxConfig(keep_fraction=0.4, reintroduce_fraction=0.3)
        reduced = prune(qubo, scores, config)
        fb = Feedback(kl=0.0, js=0.0)
        for _ in range(20):
            reduced = reintroduce(reduced, fb, config)
        assert reduced.active_pairs == frozenset(qubo.quadratic)


class TestReducedQubo:
    def test_linear_terms_preserved(self, chain3):
        catalog, _, q = chain3
        _, qubo, _ = encoded(catalog, q)
        reduced = ReducedQubo(base=qubo, active_pairs=frozenset(list(qubo.quadratic)[:2]))
        eff = reduced.effective()
        assert eff.linear == qubo.linear
        assert eff.offset == qubo.offset
        assert set(eff.quadratic) == reduced.active_pairs
        for pair in reduced.active_pairs:
            assert eff.quadratic[pair] == qubo.quadratic[pair]

    def test_foreign_pairs_rejected(self):
        qubo = Qubo.build(n=3, quadratic={(0, 1): 1.0})
        with pytest.raises(ValueError, match="not present"):
            ReducedQubo(base=qubo, active_pairs=frozenset({(1, 2)}))


class TestRelaxLoop:
    def run_loop(self, catalog, query, seed=0, config=None, tau=1e9):
        graph, qubo, varmap = encoded(catalog, query)
        budget = BudgetClock(tau_ms=tau)
        params = SamplerParams(num_reads=8, sweeps=100, seed=seed, modeled_timing=True)
        plan, cost, trace = relax_loop(
            qubo, varmap, graph, catalog, query, sa_sample, params, budget,
            config or RelaxConfig(),
        )
        return plan, cost, trace, budget, qubo

    def test_two_relation_query_single_iteration(self, chain3):
        catalog, q_ab, _ = chain3
        plan, cost, trace, _, _ = self.run_loop(catalog, q_ab)
        assert sorted(plan.leaves()) == ["a", "b"]
        assert cost == pytest.approx(1000)
        assert trace[0].best_cost == pytest.approx(1000)

    def test_best_cost_is_monotone(self, chain3):
        catalog, _, q = chain3
        _, _, trace, _, _ = self.run_loop(catalog, q, seed=3)
        costs = [rec.best_cost for rec in trace]
        assert costs == sorted(costs, reverse=True)

    def test_iteration_count_capped(self, chain3):
        catalog, _, q = chain3
        config = RelaxConfig(max_iterations=4, stability_epsilon=1e-12, patience=10)
        _, _, trace, _, _ = self.run_loop(catalog, q, config=config)
        assert len(trace) <= 4

    def test_kl_nonnegative_throughout(self, chain3):
        catalog, _, q = chain3
        _, _, trace, _, _ = self.run_loop(catalog, q, seed=11)
        assert all(rec.kl >= 0.0 for rec in trace)

    def test_active_pairs_never_exceed_original(self, star4):
        catalog, q = star4
        graph, qubo, varmap = encoded(catalog, q)
        scores = score_correlations(qubo, varmap, graph, catalog, q)
        config = RelaxConfig(keep_fraction=0.3, reintroduce_fraction=0.4)
        reduced = prune(qubo, scores, config)
        fb = Feedback(kl=0.0, js=0.0, moment_gaps={p: 1.0 for p in reduced.inactive_pairs()})
        for _ in range(10):
            assert reduced.active_pairs <= set(qubo.quadratic)
            eff = reduced.effective()
            assert eff.linear == qubo.linear
            reduced = reintroduce(reduced, fb, config)

    def test_budget_denial_yields_greedy_plan(self, chain3):
        catalog, _, q = chain3
        plan, cost, trace, _, _ = self.run_loop(catalog, q, tau=1e-3)
        assert trace == []
        assert cost == pytest.approx(1100)  # greedy repair of the empty assignment

    def test_six_relation_chain_quality_vs_oracle(self):
        rng = random.Random(1234)
        ratios = []
        for seed in range(20):
            cards = [rng.randint(10, 10**6) for _ in range(6)]
            sels = [10 ** rng.uniform(-4, 0) for _ in range(5)]
            catalog, query = chain_workload(cards, sels)
            plan, cost, _, _, _ = self.run_loop(catalog, query, seed=seed)
            _, oracle_cost = dp_optimal_plan(catalog, query)
            ratios.append(cost / oracle_cost)
        assert statistics.median(ratios) <= 2.0
