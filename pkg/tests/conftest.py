import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for oracles.py

from omtl.datastore import Record
from omtl.model import ModelSpec, build_model
from omtl.ontology import ConceptNode, OntologyGraph, ancestor_closure


def diamond_graph(core_outcomes=("event",)) -> OntologyGraph:
    nodes = [
        ConceptNode("a"),
        ConceptNode("b"),
        ConceptNode("c"),
        ConceptNode("d", core=True, outcomes=core_outcomes),
    ]
    return OntologyGraph(nodes, [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")])


def chain_graph(n=3, outcomes=("event",)) -> OntologyGraph:
    names = [chr(ord("a") + i) for i in range(n)]
    nodes = [ConceptNode(nid, core=(i == n - 1),
                         outcomes=outcomes if i == n - 1 else ())
             for i, nid in enumerate(names)]
    edges = [(names[i], names[i + 1]) for i in range(n - 1)]
    return OntologyGraph(nodes, edges)


def random_dag(rng: np.random.Generator, n_nodes: int, edge_prob=0.35,
               core_frac=0.4, outcomes=("event",)) -> OntologyGraph:
    """Random DAG on id-ordered nodes: edges only point id-forward."""
    names = [f"n{i:02d}" for i in range(n_nodes)]
    core = rng.random(n_nodes) < core_frac
    if not core.any():
        core[rng.integers(n_nodes)] = True
    nodes = [ConceptNode(nid, core=bool(c), outcomes=outcomes if c else ())
             for nid, c in zip(names, core)]
    edges = [(names[i], names[j])
             for i in range(n_nodes) for j in range(i + 1, n_nodes)
             if rng.random() < edge_prob]
    return OntologyGraph(nodes, edges)


def make_record(graph: OntologyGraph, rng: np.random.Generator, d: int,
                anchor: str | None = None, label=None, rid="r0") -> Record:
    if anchor is None:
        ids = graph.ordered_ids
        anchor = ids[rng.integers(len(ids))]
    labels = {}
    if label is not None:
        for nid in ancestor_closure(graph, [anchor]):
            for o in graph.nodes[nid].outcomes:
                labels[o] = label
    return Record(id=rid, features=rng.normal(size=d),
                  concepts=ancestor_closure(graph, [anchor]), labels=labels)


def tiny_model(graph, variant="omtl", d=7, de=3, experts=2, seed=0,
               dropout=0.0, shared_outcome=None):
    spec = ModelSpec(variant=variant, num_experts=1 if variant == "sb" else experts,
                     feature_dim=d, repr_dim=de, dropout=dropout)
    return build_model(spec, graph, seed=seed, shared_outcome=shared_outcome)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
