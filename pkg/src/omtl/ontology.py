"""The concept DAG the network mirrors: loading, levels, closure, growth.

Graphs are JSON files of the form
    {"nodes": [{"id": str, "concept": str, "core": bool, "outcomes": [str]}],
     "edges": [{"parent": str, "child": str}]}
Levels are longest-path-from-roots, so a child always sits strictly below
every parent. Iteration order is (level, id), which fixes the routing
order used by the model's forward pass.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .errors import ValidationError
from .rng import substream


@dataclass(frozen=True)
class ConceptNode:
    id: str
    concept: str = ""
    core: bool = False
    outcomes: tuple[str, ...] = ()


@dataclass(frozen=True)
class GrowthConfig:
    core_ids: tuple[str, ...]
    max_hops: int = 2
    iterations: int = 0
    seed: int = 0


class OntologyGraph:
    """Validated DAG over ConceptNodes with precomputed levels.

    Immutable after construction; safe for concurrent reads.
    """

    def __init__(self, nodes: list[ConceptNode], edges: list[tuple[str, str]]):
        self.nodes: dict[str, ConceptNode] = {}
        for n in nodes:
            if n.id in self.nodes:
                raise ValidationError(f"duplicate node id {n.id!r}")
            if n.outcomes and not n.core:
                raise ValidationError(
                    f"node {n.id!r} carries outcomes but is not a core node")
            if len(set(n.outcomes)) != len(n.outcomes):
                raise ValidationError(f"node {n.id!r} repeats an outcome name")
            self.nodes[n.id] = n
        self.edges: list[tuple[str, str]] = []
        parents: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        children: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        seen = set()
        for parent, child in edges:
            for end in (parent, child):
                if end not in self.nodes:
                    raise ValidationError(f"edge endpoint {end!r} is not a node")
            if (parent, child) in seen:
                raise ValidationError(f"duplicate edge {parent!r} -> {child!r}")
            seen.add((parent, child))
            self.edges.append((parent, child))
            parents[child].append(parent)
            children[parent].append(child)
        self.parents = {nid: tuple(sorted(ps)) for nid, ps in parents.items()}
        self.children = {nid: tuple(sorted(cs)) for nid, cs in children.items()}
        self.levels = compute_levels(self)
        self.depth = 1 + max(self.levels.values()) if self.levels else 0
        self.ordered_ids = sorted(self.nodes, key=lambda nid: (self.levels[nid], nid))

    @property
    def core_ids(self) -> tuple[str, ...]:
        return tuple(nid for nid in self.ordered_ids if self.nodes[nid].core)

    def outcome_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for nid in self.ordered_ids:
            for o in self.nodes[nid].outcomes:
                if o not in names:
                    names.append(o)
        return tuple(names)

    def to_json_obj(self) -> dict:
        return {
            "nodes": [
                {"id": n.id, "concept": n.concept, "core": n.core,
                 "outcomes": list(n.outcomes)}
                for n in self.nodes.values()
            ],
            "edges": [{"parent": p, "child": c} for p, c in self.edges],
        }

    def graph_hash(self) -> str:
        blob = json.dumps(self.to_json_obj(), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def compute_levels(graph: OntologyGraph) -> dict[str, int]:
    """Longest-path-from-roots level for every node; raises on cycles."""
    indeg = {nid: len(graph.parents[nid]) for nid in graph.nodes}
    level = {nid: 0 for nid in graph.nodes}
    ready = sorted(nid for nid, d in indeg.items() if d == 0)
    done = 0
    while ready:
        nid = ready.pop(0)
        done += 1
        for child in graph.children[nid]:
            level[child] = max(level[child], level[nid] + 1)
            indeg[child] -= 1
            if indeg[child] == 0:
                # sorted insertion keeps same-level ties in id order
                ready.append(child)
                ready.sort()
    if done != len(graph.nodes):
        raise ValidationError(f"graph contains a cycle: {_find_cycle(graph)}")
    return level


def _find_cycle(graph: OntologyGraph) -> str:
    state: dict[str, int] = {}  # 1 = on stack, 2 = finished
    stack: list[str] = []

    def visit(nid: str) -> list[str] | None:
        state[nid] = 1
        stack.append(nid)
        for child in graph.children[nid]:
            mark = state.get(child)
            if mark == 1:
                return stack[stack.index(child):] + [child]
            if mark is None:
                found = visit(child)
                if found:
                    return found
        stack.pop()
        state[nid] = 2
        return None

    for nid in sorted(graph.nodes):
        if nid not in state:
            found = visit(nid)
            if found:
                return " -> ".join(found)
    return "<cycle not isolated>"


def load_graph(path: str) -> OntologyGraph:
    """Read and validate a graph JSON file."""
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read graph file {path}: {exc}") from exc
    return graph_from_json_obj(obj)


def graph_from_json_obj(obj) -> OntologyGraph:
    if not isinstance(obj, dict) or "nodes" not in obj:
        raise ValidationError("graph JSON must be an object with a 'nodes' list")
    nodes = []
    for raw in obj["nodes"]:
        if not isinstance(raw, dict) or "id" not in raw:
            raise ValidationError(f"malformed node entry: {raw!r}")
        outcomes = raw.get("outcomes", [])
        if not all(isinstance(o, str) and o for o in outcomes):
            raise ValidationError(
                f"node {raw['id']!r} has an unknown outcome name: {outcomes!r}")
        nodes.append(ConceptNode(
            id=str(raw["id"]),
            concept=str(raw.get("concept", "")),
            core=bool(raw.get("core", False)),
            outcomes=tuple(outcomes),
        ))
    edges = []
    for raw in obj.get("edges", []):
        if not isinstance(raw, dict) or "parent" not in raw or "child" not in raw:
            raise ValidationError(f"malformed edge entry: {raw!r}")
        edges.append((str(raw["parent"]), str(raw["child"])))
    return OntologyGraph(nodes, edges)


def save_graph(graph: OntologyGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph.to_json_obj(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def ancestor_closure(graph: OntologyGraph, concept_set) -> frozenset[str]:
    """Smallest superset of concept_set closed under adding parents."""
    closed: set[str] = set()
    frontier = list(concept_set)
    for nid in frontier:
        if nid not in graph.nodes:
            raise ValidationError(f"unknown concept id {nid!r}")
    while frontier:
        nid = frontier.pop()
        if nid in closed:
            continue
        closed.add(nid)
        frontier.extend(graph.parents[nid])
    return frozenset(closed)


def induced_subgraph(graph: OntologyGraph, keep) -> OntologyGraph:
    keep = set(keep)
    nodes = [n for n in graph.nodes.values() if n.id in keep]
    edges = [(p, c) for p, c in graph.edges if p in keep and c in keep]
    return OntologyGraph(nodes, edges)


def grow_from_core(graph: OntologyGraph, config: GrowthConfig) -> OntologyGraph:
    """Grow an augmented subgraph by random predecessor walks from the core.

    Each iteration starts one walk at a uniformly chosen core node and takes
    up to max_hops uniform steps along parent edges, collecting every node
    visited. The result is the induced subgraph on core plus collected
    nodes, so every included node is within max_hops reverse-edge hops of
    some core node.
    """
    for cid in config.core_ids:
        if cid not in graph.nodes:
            raise ValidationError(f"core id {cid!r} is not in the graph")
    if config.max_hops < 0:
        raise ValidationError("max_hops must be >= 0")
    starts = sorted(set(config.core_ids))
    selected = set(starts)
    rng = substream(config.seed, "growth")
    if config.max_hops > 0:
        for _ in range(config.iterations):
            cur = starts[rng.integers(len(starts))]
            for _ in range(config.max_hops):
                ps = graph.parents[cur]
                if not ps:
                    break
                cur = ps[rng.integers(len(ps))]
                selected.add(cur)
    return induced_subgraph(graph, selected)
