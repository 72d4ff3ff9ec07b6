"""Records, dataset IO, stratified folds, and the synthetic cohort generator.

Record files are JSONL, one object per line:
    {"id": str, "features": [float x d], "concepts": [str, ...],
     "labels": {outcome: 0|1, ...}}
Concept sets are closed upward at load time so a record expressing a
concept always expresses all of its ancestors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .ontology import ConceptNode, OntologyGraph, ancestor_closure
from .rng import substream


@dataclass
class Record:
    id: str
    features: np.ndarray
    concepts: frozenset[str]
    labels: dict[str, int]

    @property
    def labeled(self) -> bool:
        return bool(self.labels)


@dataclass
class Dataset:
    records: list[Record]
    feature_dim: int
    outcomes: tuple[str, ...]

    def labeled_records(self) -> list[Record]:
        return [r for r in self.records if r.labeled]

    def by_id(self) -> dict[str, Record]:
        return {r.id: r for r in self.records}


@dataclass
class FoldPlan:
    k: int
    seed: int
    assignment: dict[str, int]

    def fold_of(self, record_id: str) -> int:
        return self.assignment[record_id]

    def to_json_obj(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignment": self.assignment}

    @staticmethod
    def from_json_obj(obj: dict) -> "FoldPlan":
        return FoldPlan(k=int(obj["k"]), seed=int(obj["seed"]),
                        assignment={str(k): int(v) for k, v in obj["assignment"].items()})


def load_dataset(path: str, graph: OntologyGraph) -> Dataset:
    """Read a JSONL record file, validating every line against the graph."""
    known_outcomes = set(graph.outcome_names())
    records: list[Record] = []
    feature_dim: int | None = None
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            rec = _record_from_obj(raw, graph, known_outcomes,
                                   where=f"{path}:{lineno}")
            if feature_dim is None:
                feature_dim = rec.features.size
            elif rec.features.size != feature_dim:
                raise ValidationError(
                    f"{path}:{lineno}: feature dimension {rec.features.size} "
                    f"does not match dataset dimension {feature_dim}")
            if rec.id in seen_ids:
                raise ValidationError(f"{path}:{lineno}: duplicate record id {rec.id!r}")
            seen_ids.add(rec.id)
            records.append(rec)
    if not records:
        raise ValidationError(f"{path}: no records")
    return Dataset(records=records, feature_dim=int(feature_dim),
                   outcomes=graph.outcome_names())


def _record_from_obj(raw, graph: OntologyGraph, known_outcomes: set[str],
                     where: str) -> Record:
    if not isinstance(raw, dict):
        raise ValidationError(f"{where}: record must be a JSON object")
    try:
        rid = str(raw["id"])
        features = raw["features"]
        concepts = raw["concepts"]
    except KeyError as exc:
        raise ValidationError(f"{where}: missing field {exc}") from exc
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 1 or not np.all(np.isfinite(feats)):
        raise ValidationError(f"{where}: features must be a flat list of finite numbers")
    if not concepts:
        raise ValidationError(f"{where}: concepts must be nonempty")
    for cid in concepts:
        if cid not in graph.nodes:
            raise ValidationError(f"{where}: unknown concept id {cid!r}")
    labels = {}
    for name, value in (raw.get("labels") or {}).items():
        if name not in known_outcomes:
            raise ValidationError(f"{where}: unknown outcome name {name!r}")
        if value not in (0, 1):
            raise ValidationError(f"{where}: label for {name!r} must be 0 or 1, got {value!r}")
        labels[name] = int(value)
    return Record(id=rid, features=feats,
                  concepts=ancestor_closure(graph, concepts), labels=labels)


def save_dataset(dataset: Dataset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in dataset.records:
            obj = {"id": r.id, "features": [float(v) for v in r.features],
                   "concepts": sorted(r.concepts), "labels": r.labels}
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# stratified folds


def strata_of(record: Record, graph: OntologyGraph) -> list[tuple[str, str, int]]:
    """(core node, outcome, label) memberships of one record."""
    out = []
    for nid in sorted(record.concepts):
        node = graph.nodes[nid]
        if not node.core:
            continue
        for o in node.outcomes:
            if o in record.labels:
                out.append((nid, o, record.labels[o]))
    return out


def make_folds(dataset: Dataset, graph: OntologyGraph, k: int = 5,
               seed: int = 0) -> FoldPlan:
    """Greedy stratified assignment on full stratum-membership signatures.

    The stratification key of a record is the multiset of its
    (core node, outcome, label) memberships. Records sharing a key are
    interchangeable, so each key group is dealt across folds as evenly as
    possible (largest group first), tie-breaking on fold size to keep
    per-node member counts level too. Exact stratification is impossible
    in general when core nodes overlap; this keeps every stratum's fold
    count within one of even and members balanced. Unlabeled records are
    spread uniformly at random.
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    labeled = dataset.labeled_records()
    if len(labeled) < k:
        raise ValidationError(
            f"need at least k={k} labeled records, have {len(labeled)}")
    rng = substream(seed, "folds")

    groups: dict[tuple, list[Record]] = {}
    for rec in labeled:
        key = tuple(strata_of(rec, graph))
        groups.setdefault(key, []).append(rec)

    assignment: dict[str, int] = {}
    fold_sizes = np.zeros(k, dtype=int)
    order = sorted(groups, key=lambda key: (-len(groups[key]), key))
    for key in order:
        members = sorted(groups[key], key=lambda r: r.id)
        rng.shuffle(members)
        counts = np.zeros(k, dtype=int)
        for rec in members:
            fold = min(range(k), key=lambda f: (counts[f], fold_sizes[f], f))
            assignment[rec.id] = fold
            counts[fold] += 1
            fold_sizes[fold] += 1
    for rec in dataset.records:
        if rec.id not in assignment:
            fold = int(rng.integers(k))
            assignment[rec.id] = fold
            fold_sizes[fold] += 1
    return FoldPlan(k=k, seed=seed, assignment=assignment)


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass
class SynthConfig:
    """Layered-DAG cohort generator settings.

    The graph is a `branching`-ary tree of `levels` levels; leaves are core
    nodes carrying every outcome, inner nodes are augmented (records
    anchored there stay unlabeled). Child task weights follow
    rho * parent + sqrt(1 - rho^2) * noise, so high rho means strongly
    shared tasks along the hierarchy.
    """

    levels: int = 3
    branching: int = 2
    records_per_node: int = 500
    feature_dim: int = 41
    prevalence: float = 0.15
    rho: float = 0.9
    noise_scale: float = 1.0
    signal_gain: float = 2.5  # score sharpening; larger = less label noise
    root_weight_scale: float = 1.0  # < 1 damps the shared root task component
    outcomes: tuple[str, ...] = ("mortality", "phenotype")
    low_data_node: str | None = None  # defaults to the last leaf
    low_data_records: int = 200
    seed: int = 0

    @staticmethod
    def from_json_obj(obj: dict) -> "SynthConfig":
        cfg = SynthConfig()
        fields = set(cfg.__dataclass_fields__)
        for key, value in obj.items():
            if key not in fields:
                raise ValidationError(f"unknown synth config field {key!r}")
            if key == "outcomes":
                value = tuple(value)
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.levels < 1 or self.branching < 1:
            raise ValidationError("levels and branching must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValidationError(f"rho must be in [0, 1], got {self.rho}")
        if not 0.0 < self.prevalence < 1.0:
            raise ValidationError(f"prevalence must be in (0, 1), got {self.prevalence}")
        if not self.outcomes:
            raise ValidationError("need at least one outcome name")


def _synth_node_id(level: int, index: int) -> str:
    return f"n{level}_{index}"


def build_synth_graph(config: SynthConfig) -> OntologyGraph:
    """Perfect branching-tree DAG; deepest level flagged core."""
    nodes: list[ConceptNode] = []
    edges: list[tuple[str, str]] = []
    last = config.levels - 1
    for level in range(config.levels):
        width = config.branching ** level
        for i in range(width):
            nid = _synth_node_id(level, i)
            core = level == last
            nodes.append(ConceptNode(
                id=nid, concept=str(10000 + 100 * level + i), core=core,
                outcomes=config.outcomes if core else ()))
            if level > 0:
                edges.append((_synth_node_id(level - 1, i // config.branching), nid))
    return OntologyGraph(nodes, edges)


def _tune_bias(scores: np.ndarray, uniforms: np.ndarray, target: float) -> float:
    """Bisect the shared label bias until realized prevalence hits target.

    Labels are (uniform < sigmoid(score + b)), monotone in b, so realized
    prevalence can always be driven to within one record of the target.
    """
    def realized(b: float) -> float:
        p = 1.0 / (1.0 + np.exp(-(scores + b)))
        return float(np.mean(uniforms < p))

    lo, hi = -60.0, 60.0
    if realized(lo) > target or realized(hi) < target:
        raise ValidationError(f"prevalence target {target} unreachable")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if realized(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


def generate_synthetic(config: SynthConfig) -> tuple[OntologyGraph, Dataset]:
    """Build the layered graph plus an anchored, partially labeled cohort."""
    config.validate()
    graph = build_synth_graph(config)
    rng = substream(config.seed, "synth")
    d = config.feature_dim

    prototypes = {nid: rng.normal(0.0, 1.0, size=d) for nid in graph.ordered_ids}
    weights: dict[str, dict[str, np.ndarray]] = {}
    for outcome in config.outcomes:
        w: dict[str, np.ndarray] = {}
        for nid in graph.ordered_ids:  # parents precede children
            ps = graph.parents[nid]
            fresh = rng.normal(0.0, 1.0, size=d) / np.sqrt(d)
            if ps:
                base = np.mean([w[p] for p in ps], axis=0)
                w[nid] = config.rho * base + np.sqrt(1.0 - config.rho ** 2) * fresh
            else:
                # a damped root keeps sibling subtrees related but distinct,
                # so fully shared models cannot ride one global direction
                w[nid] = config.root_weight_scale * fresh
        weights[outcome] = w

    low_data = config.low_data_node
    if low_data is None:
        leaves = [nid for nid in graph.ordered_ids if graph.nodes[nid].core]
        low_data = leaves[-1] if leaves else None
    if low_data is not None and low_data not in graph.nodes:
        raise ValidationError(f"low_data_node {low_data!r} is not in the graph")

    records: list[Record] = []
    anchors: list[str] = []
    feats: list[np.ndarray] = []
    for nid in graph.ordered_ids:
        n = config.records_per_node
        if nid == low_data:
            n = min(n, config.low_data_records)
        mu = prototypes[nid]
        for _ in range(n):
            anchors.append(nid)
            feats.append(mu + config.noise_scale * rng.normal(0.0, 1.0, size=d))

    labeled_idx = [i for i, a in enumerate(anchors) if graph.nodes[a].core]
    labels_by_idx: dict[int, dict[str, int]] = {i: {} for i in labeled_idx}
    for outcome in config.outcomes:
        if not labeled_idx:
            break
        scores = np.array([weights[outcome][anchors[i]] @ feats[i] for i in labeled_idx])
        # center per anchor cohort so every node sees the target prevalence,
        # then sharpen the within-cohort signal
        for nid in set(anchors[i] for i in labeled_idx):
            sel = np.array([anchors[i] == nid for i in labeled_idx])
            scores[sel] -= scores[sel].mean()
        scores = config.signal_gain * scores / max(np.std(scores), 1e-12)
        uniforms = rng.random(len(labeled_idx))
        bias = _tune_bias(scores, uniforms, config.prevalence)
        p = 1.0 / (1.0 + np.exp(-(scores + bias)))
        drawn = uniforms < p
        for j, i in enumerate(labeled_idx):
            labels_by_idx[i][outcome] = int(drawn[j])

    for i, (anchor, x) in enumerate(zip(anchors, feats)):
        records.append(Record(
            id=f"r{i:05d}",
            features=x,
            concepts=ancestor_closure(graph, [anchor]),
            labels=labels_by_idx.get(i, {}),
        ))
    dataset = Dataset(records=records, feature_dim=d, outcomes=config.outcomes)
    return graph, dataset
