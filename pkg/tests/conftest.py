import json

import pytest

from quboplan.catalog import load_workload

CHAIN3_DOC = {
    "relations": [
        {"name": "a", "cardinality": 1000},
        {"name": "b", "cardinality": 100},
        {"name": "c", "cardinality": 10},
    ],
    "predicates": [
        {"left": "a", "right": "b", "selectivity": 0.01},
        {"left": "b", "right": "c", "selectivity": 0.1},
    ],
    "queries": [
        {"id": "q_ab", "relations": ["a", "b"], "predicates": [0]},
        {"id": "q_abc", "relations": ["a", "b", "c"], "predicates": [0, 1]},
    ],
}

STAR4_DOC = {
    "relations": [
        {"name": "a", "cardinality": 5000},
        {"name": "b", "cardinality": 200},
        {"name": "c", "cardinality": 40},
        {"name": "d", "cardinality": 7},
    ],
    "predicates": [
        {"left": "a", "right": "b", "selectivity": 0.02},
        {"left": "a", "right": "c", "selectivity": 0.5},
        {"left": "a", "right": "d", "selectivity": 0.1},
    ],
    "queries": [{"id": "q_star", "relations": ["a", "b", "c", "d"], "predicates": [0, 1, 2]}],
}


@pytest.fixture(scope="session")
def chain3():
    catalog, queries = load_workload(json.dumps(CHAIN3_DOC))
    by_id = {q.id: q for q in queries}
    return catalog, by_id["q_ab"], by_id["q_abc"]


@pytest.fixture(scope="session")
def star4():
    catalog, queries = load_workload(json.dumps(STAR4_DOC))
    return catalog, queries[0]
