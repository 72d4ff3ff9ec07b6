"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad inputs), 2 runtime or
numerical error. Human-readable messages go to stderr; machine-readable
results are written only to files. Every command that writes files also
writes a deterministic <first-output>.manifest.json (seed, input hashes,
tool version) plus a .stamp.json sidecar carrying the timestamp, so the
artifacts themselves are byte-reproducible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time

import numpy as np

from . import __version__
from .datastore import (FoldPlan, SynthConfig, generate_synthetic,
                        load_dataset, make_folds, save_dataset)
from .errors import OmtlError, ValidationError
from .metrics import ScoredSet, compare_scored_sets, score_metrics
from .model import build_model, forward, load_model, save_model
from .ontology import GrowthConfig, grow_from_core, load_graph, save_graph
from .rng import substream
from .tensor import Tape
from .trainer import (TrainConfig, compare_variants, run_cv, score_holdout,
                      train_variant)


def _file_hash(path: str | None) -> str | None:
    if path is None:
        return None
    try:
        with open(path, "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()
    except OSError:
        return None


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _emit_manifest(primary_out: str, args: argparse.Namespace,
                   outputs: list[str]) -> None:
    manifest = {
        "tool_version": __version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "inputs": {
            name: _file_hash(getattr(args, name, None))
            for name in ("graph", "data", "config", "model")
            if getattr(args, name, None)
        },
        "outputs": {path: _file_hash(path) for path in outputs},
    }
    _write_json(primary_out + ".manifest.json", manifest)
    _write_json(primary_out + ".manifest.stamp.json",
                {"written_at_unix": time.time()})


def _load_train_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        cfg = TrainConfig.from_json_obj(obj)
    else:
        cfg = TrainConfig()
    if getattr(args, "variant", None):
        cfg.variant = args.variant
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate_graph(args) -> int:
    g = load_graph(args.graph)
    print(f"ok: {len(g.nodes)} nodes, {len(g.edges)} edges, depth {g.depth}, "
          f"{len(g.core_ids)} core", file=sys.stderr)
    return 0


def cmd_augment(args) -> int:
    g = load_graph(args.graph)
    cfg = GrowthConfig(core_ids=tuple(args.core.split(",")),
                       max_hops=args.hops, iterations=args.iters,
                       seed=args.seed)
    sub = grow_from_core(g, cfg)
    save_graph(sub, args.out)
    _emit_manifest(args.out, args, [args.out])
    print(f"augmented subgraph: {len(sub.nodes)} nodes "
          f"({len(cfg.core_ids)} core)", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = SynthConfig.from_json_obj(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
    else:
        cfg = SynthConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    graph, data = generate_synthetic(cfg)
    save_graph(graph, args.out_graph)
    save_dataset(data, args.out_data)
    _emit_manifest(args.out_graph, args, [args.out_graph, args.out_data])
    labeled = sum(1 for r in data.records if r.labeled)
    print(f"synthetic cohort: {len(data.records)} records "
          f"({labeled} labeled), {len(graph.nodes)} nodes", file=sys.stderr)
    return 0


def cmd_folds(args) -> int:
    graph = load_graph(args.graph)
    data = load_dataset(args.data, graph)
    plan = make_folds(data, graph, k=args.k, seed=args.seed)
    _write_json(args.out, plan.to_json_obj())
    _emit_manifest(args.out, args, [args.out])
    return 0


def cmd_train(args) -> int:
    graph = load_graph(args.graph)
    data = load_dataset(args.data, graph)
    cfg = _load_train_config(args)
    model, log = train_variant(graph, data, cfg)
    save_model(model, args.out)
    outputs = [args.out]
    if args.log:
        _write_json(args.log, log.to_json_obj())
        outputs.append(args.log)
    _emit_manifest(args.out, args, outputs)
    print(f"trained {cfg.variant}: {model.param_count()} parameters, "
          f"{len(log.entries)} epochs", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    graph = load_graph(args.graph)
    data = load_dataset(args.data, graph)
    model = load_model(args.model, graph)
    collected = score_holdout(model, graph, data.records)
    per_target = {}
    scores_obj = {}
    roc_obj = {}
    for key in sorted(collected):
        triples = sorted(collected[key])
        s = ScoredSet(scores=np.array([t[2] for t in triples]),
                      labels=np.array([t[1] for t in triples]),
                      node=key[0], outcome=key[1],
                      ids=tuple(t[0] for t in triples))
        name = "|".join(key)
        scores_obj[name] = {"ids": list(s.ids), "labels": s.labels.tolist(),
                            "scores": s.scores.tolist()}
        if 0 < s.n_pos < s.n:
            tm = score_metrics(s)
            per_target[name] = tm.to_json_obj()
            roc_obj[name] = [list(p) for p in tm.roc]
    report = {"per_target": per_target,
              "metadata": {"model": args.model, "n_records": len(data.records)}}
    _write_json(args.report, report)
    outputs = [args.report]
    if args.roc_out:
        _write_json(args.roc_out, roc_obj)
        outputs.append(args.roc_out)
    if args.scores_out:
        _write_json(args.scores_out, scores_obj)
        outputs.append(args.scores_out)
    _emit_manifest(args.report, args, outputs)
    return 0


def cmd_cv(args) -> int:
    graph = load_graph(args.graph)
    data = load_dataset(args.data, graph)
    cfg = _load_train_config(args)
    variants = args.variants.split(",")
    if len(variants) == 1:
        cfg.variant = variants[0]
        result = run_cv(graph, data, cfg, k=args.k, jobs=args.jobs)
        obj = result.to_json_obj()
        scores = {v: result for v in variants}
    else:
        results, comparisons = compare_variants(graph, data, cfg, variants,
                                                k=args.k, jobs=args.jobs)
        obj = {"variants": {v: r.to_json_obj() for v, r in results.items()},
               "comparisons": comparisons}
        scores = results
    _write_json(args.report, obj)
    outputs = [args.report]
    if args.scores_out:
        scores_obj = {
            v: {"|".join(key): {"ids": list(s.ids),
                                "labels": s.labels.tolist(),
                                "scores": s.scores.tolist()}
                for key, s in r.pooled.items()}
            for v, r in scores.items()}
        _write_json(args.scores_out, scores_obj)
        outputs.append(args.scores_out)
    _emit_manifest(args.report, args, outputs)
    return 0


def _load_scores_file(path: str) -> dict[str, ScoredSet]:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read scores {path}: {exc}") from exc
    out = {}
    for name, entry in obj.items():
        node, _, outcome = name.partition("|")
        out[name] = ScoredSet(scores=np.array(entry["scores"], dtype=float),
                              labels=np.array(entry["labels"]),
                              node=node, outcome=outcome,
                              ids=tuple(entry["ids"]) if "ids" in entry else None)
    return out


def cmd_compare(args) -> int:
    sets_a = _load_scores_file(args.scores_a)
    sets_b = _load_scores_file(args.scores_b)
    names = args.reports.split(",") if args.reports else ["a", "b"]
    name_a = names[0]
    name_b = names[1] if len(names) > 1 else "b"
    shared = sorted(set(sets_a) & set(sets_b))
    if not shared:
        raise ValidationError("the two score files share no (node, outcome) targets")
    comparisons = [compare_scored_sets(sets_a[key], sets_b[key], name_a, name_b)
                   for key in shared]
    _write_json(args.out, {"comparisons": comparisons})
    _emit_manifest(args.out, args, [args.out])
    return 0


def cmd_gradcheck(args) -> int:
    # self-contained finite-difference audit of the full pipeline gradient
    from .datastore import Record
    from .objective import masked_loss
    from .ontology import ConceptNode, OntologyGraph, ancestor_closure

    rng = substream(args.seed, "gradcheck")
    nodes = [ConceptNode("a", core=False),
             ConceptNode("b", core=True, outcomes=("event",)),
             ConceptNode("c", core=True, outcomes=("event",))]
    graph = OntologyGraph(nodes, [("a", "b"), ("a", "c"), ("b", "c")])
    from .model import ModelSpec
    spec = ModelSpec(variant="omtl", num_experts=2, feature_dim=7, repr_dim=3,
                     dropout=0.0)
    model = build_model(spec, graph, seed=args.seed)
    rec = Record(id="r0", features=rng.normal(size=7),
                 concepts=ancestor_closure(graph, ["c"]),
                 labels={"event": 1})

    def loss_value() -> float:
        result = forward(model, graph, rec, mode="train", dropout_rng=None)
        return masked_loss(result, rec, graph, lam=0.1).total

    with Tape() as tape:
        result = forward(model, graph, rec, mode="train", dropout_rng=None)
        breakdown = masked_loss(result, rec, graph, lam=0.1)
    tape.backward(breakdown.loss)
    grads = tape.gradients(model.params)

    h = 1e-5
    worst = 0.0
    for name, p in model.params.items():
        flat = p.values.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_value()
            flat[i] = keep - h
            down = loss_value()
            flat[i] = keep
            numeric = (up - down) / (2 * h)
            analytic = grads[name].ravel()[i]
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    print(f"gradcheck: max relative error {worst:.3e}", file=sys.stderr)
    return 0 if worst < 1e-4 else 2


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omtl")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-graph", help="check a graph file")
    p.add_argument("--graph", required=True)
    p.set_defaults(handler=cmd_validate_graph)

    p = sub.add_parser("augment", help="grow a core-anchored subgraph")
    p.add_argument("--graph", required=True)
    p.add_argument("--core", required=True, help="comma-separated core node ids")
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_augment)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-graph", required=True)
    p.add_argument("--out-data", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("folds", help="build a stratified fold plan")
    p.add_argument("--data", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_folds)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--graph", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--variant", choices=["omtl", "mmoe", "moe", "sb"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a dataset with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--roc-out", default=None)
    p.add_argument("--scores-out", default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("cv", help="cross-validate one or more variants")
    p.add_argument("--graph", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--variants", default="omtl")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--report", required=True)
    p.add_argument("--scores-out", default=None)
    p.set_defaults(handler=cmd_cv)

    p = sub.add_parser("compare", help="DeLong-test two score files")
    p.add_argument("--reports", default=None,
                   help="comma-separated display names for the two models")
    p.add_argument("--delong", action="store_true")
    p.add_argument("--scores-a", required=True)
    p.add_argument("--scores-b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OmtlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())
