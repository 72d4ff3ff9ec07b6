"""Mini-batch training loops, the two-phase schedule, and cross-validation.

Phase 1 trains an omtl model with ontology routing switched off (experts,
expert gates, representations, reconstructions, heads). Phase 2 freezes
the experts and expert gates, draws fresh parent gates, switches routing
on, and fine-tunes everything else. Baselines train in a single phase.
Early stopping watches total loss on a held-out slice of the training
records and always restores the best snapshot seen.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .datastore import Dataset, FoldPlan, Record, make_folds
from .errors import NumericalError, ValidationError
from .metrics import (EvalReport, ScoredSet, compare_scored_sets, score_metrics)
from .model import (ModelSpec, OmtlModel, _expert_outputs, build_model,
                    forward_group, forward_prepared, reinit_parent_gates)
from .objective import (LossBreakdown, RewardScheme, make_reward_scheme,
                        masked_loss, shaped_loss)
from .ontology import OntologyGraph
from .rng import substream
from .tensor import Tape, Tensor, scale
from . import tensor as T

FROZEN_IN_PHASE2 = ("expert.", "expert_gate.")


class _FlatAdam:
    """Bias-corrected Adam over one flat buffer spanning all trainable
    parameters; per-element arithmetic identical to tensor.adam_step."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.items = []
        offset = 0
        for name, p in params.items():
            n = p.values.size
            self.items.append((name, p, slice(offset, offset + n), p.values.shape))
            offset += n
        self.m = np.zeros(offset)
        self.v = np.zeros(offset)
        self.g = np.empty(offset)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self, tape: Tape) -> None:
        g = self.g
        for _, p, sl, _ in self.items:
            g[sl] = tape.gradient(p).ravel()
        if not np.all(np.isfinite(g)):
            for name, _, sl, _ in self.items:
                if not np.all(np.isfinite(g[sl])):
                    raise NumericalError(
                        f"non-finite gradient for parameter {name!r}")
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * g * g
        step = self.lr / (1.0 - self.beta1 ** self.t)
        upd = step * self.m / (np.sqrt(self.v / (1.0 - self.beta2 ** self.t))
                               + self.eps)
        for _, p, sl, shape in self.items:
            p.values -= upd[sl].reshape(shape)


@dataclass
class TrainConfig:
    variant: str = "omtl"
    batch_size: int = 64
    lr: float = 0.001
    dropout: float = 0.5
    lam: float = 0.0001
    num_experts: int = 3
    repr_dim: int = 5
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    hierarchy_finetune: bool = True
    reward_f: float | None = None
    leaky_slope: float = 0.01

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.max_epochs < 0 or self.patience < 0:
            raise ValidationError("max_epochs and patience must be >= 0")
        if not 0.0 <= self.val_fraction < 0.5:
            raise ValidationError("val_fraction must be in [0, 0.5)")

    @staticmethod
    def from_json_obj(obj: dict) -> "TrainConfig":
        cfg = TrainConfig()
        known = set(cfg.__dataclass_fields__)
        for key, value in obj.items():
            if key not in known:
                raise ValidationError(f"unknown train config field {key!r}")
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def model_spec(self, feature_dim: int) -> ModelSpec:
        experts = 1 if self.variant == "sb" else self.num_experts
        return ModelSpec(variant=self.variant, num_experts=experts,
                         feature_dim=feature_dim, repr_dim=self.repr_dim,
                         dropout=self.dropout, leaky_slope=self.leaky_slope)


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0
    train_record_ids: set[str] = field(default_factory=set)
    final_param_hash: str = ""

    def phase_entries(self, phase: str) -> list[dict]:
        return [e for e in self.entries if e["phase"] == phase]

    def to_json_obj(self) -> dict:
        # wall clock deliberately excluded: log files must be reproducible
        return {"entries": self.entries, "final_param_hash": self.final_param_hash}


def _signature(rec: Record) -> tuple:
    return (rec.concepts, frozenset(rec.labels))


def group_records(records: list[Record]) -> list[list[Record]]:
    """Split records into forward groups sharing concepts and label keys."""
    groups: dict[tuple, list[Record]] = {}
    for rec in records:
        groups.setdefault(_signature(rec), []).append(rec)
    return list(groups.values())


def _batch_loss(model: OmtlModel, graph: OntologyGraph, batch: list[Record],
                cfg: TrainConfig, scheme: RewardScheme | None,
                mode: str, dropout_rng) -> LossBreakdown:
    """Mean-per-record loss over one batch of (possibly mixed) records.

    The expert pass runs once on the whole batch; each signature group then
    selects its rows, so mixed batches stay cheap.
    """
    groups: dict[tuple, tuple[list[Record], list[int]]] = {}
    for i, rec in enumerate(batch):
        recs, idx = groups.setdefault(_signature(rec), ([], []))
        recs.append(rec)
        idx.append(i)
    x_all = Tensor(np.vstack([r.features for r in batch]), const=True)
    if x_all.shape[1] != model.spec.feature_dim:
        raise ValidationError(f"record feature dim {x_all.shape[1]} != "
                              f"model dim {model.spec.feature_dim}")
    experts_all = _expert_outputs(model, x_all, mode, dropout_rng)
    parts: list[LossBreakdown] = []
    for recs, idx in groups.values():
        if len(recs) == len(batch):
            x_g, experts_g = x_all, experts_all
        else:
            rows = np.asarray(idx)
            x_g = T.take_rows(x_all, rows)
            experts_g = [T.take_rows(h, rows) for h in experts_all]
        result = forward_prepared(model, graph, recs, x_g, experts_g, mode)
        if scheme is None:
            parts.append(masked_loss(result, recs, graph, cfg.lam))
        else:
            parts.append(shaped_loss(result, recs, graph, cfg.lam, scheme))
    inv = 1.0 / len(batch)
    loss_t = scale(T.sum_tensors([p.loss for p in parts]), inv)
    l1 = sum(p.l1 for p in parts) * inv
    l2 = sum(p.l2 for p in parts) * inv
    per_outcome: dict[tuple[str, str], float] = {}
    per_node: dict[str, float] = {}
    for part in parts:
        for key, v in part.per_outcome.items():
            per_outcome[key] = per_outcome.get(key, 0.0) + v * inv
        for nid, v in part.per_node_recon.items():
            per_node[nid] = per_node.get(nid, 0.0) + v * inv
    return LossBreakdown(l1=l1, l2=l2, lam=cfg.lam, total=l1 + cfg.lam * l2,
                         per_outcome=per_outcome, per_node_recon=per_node,
                         loss=loss_t)


def evaluate_loss(model: OmtlModel, graph: OntologyGraph, records: list[Record],
                  cfg: TrainConfig, scheme: RewardScheme | None) -> LossBreakdown:
    """Eval-mode (dropout-free) loss over a record list."""
    return _batch_loss(model, graph, records, cfg, scheme, "eval", None)


def _split_validation(records: list[Record], graph: OntologyGraph,
                      cfg: TrainConfig, stream: str) -> tuple[list[Record], list[Record]]:
    if cfg.val_fraction <= 0.0:
        return records, []
    k = max(2, round(1.0 / cfg.val_fraction))
    labeled = [r for r in records if r.labeled]
    if len(labeled) < k:
        return records, []
    ds = Dataset(records=list(records), feature_dim=records[0].features.size,
                 outcomes=graph.outcome_names())
    seed = int(substream(cfg.seed, stream).integers(2 ** 31))
    plan = make_folds(ds, graph, k=k, seed=seed)
    train = [r for r in records if plan.fold_of(r.id) != 0]
    val = [r for r in records if plan.fold_of(r.id) == 0]
    return train, val


def train_loop(model: OmtlModel, graph: OntologyGraph, records: list[Record],
               cfg: TrainConfig, frozen_prefixes: tuple[str, ...],
               scheme: RewardScheme | None, phase: str, log: TrainLog,
               stage: int = 0) -> OmtlModel:
    """Adam over shuffled mini-batches with patience-based early stopping.

    stage indexes the rng streams, so omtl phase 1 and a single-phase
    baseline draw identical shuffles and dropout masks for the same seed.
    """
    started = time.perf_counter()
    trainable = {}
    frozen = []
    for name, p in model.params.items():
        if any(name.startswith(pre) for pre in frozen_prefixes):
            frozen.append(p)
            p.const = True  # tape skips gradient work for frozen parameters
        else:
            trainable[name] = p
    train_recs, val_recs = _split_validation(records, graph, cfg,
                                             stream=f"valsplit.{stage}")
    shuffle_rng = substream(cfg.seed, f"shuffle.{stage}")
    dropout_rng = substream(cfg.seed, f"dropout.{stage}")
    adam = _FlatAdam(trainable, lr=cfg.lr)

    best = model.snapshot()
    best_loss = float("inf")
    strikes = 0
    order = list(train_recs)
    for epoch in range(cfg.max_epochs):
        shuffle_rng.shuffle(order)
        epoch_l1 = epoch_l2 = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            with Tape() as tape:
                breakdown = _batch_loss(model, graph, batch, cfg, scheme,
                                        "train", dropout_rng)
            if not np.isfinite(breakdown.total):
                raise NumericalError(
                    f"non-finite loss in phase {phase!r}, epoch {epoch}, "
                    f"batch starting at record {batch[0].id!r}")
            tape.backward(breakdown.loss)
            adam.step(tape)
            log.train_record_ids.update(r.id for r in batch)
            w = len(batch) / max(len(order), 1)
            epoch_l1 += breakdown.l1 * w
            epoch_l2 += breakdown.l2 * w
        monitor_recs = val_recs if val_recs else order
        monitored = evaluate_loss(model, graph, monitor_recs, cfg, scheme)
        log.entries.append({
            "phase": phase, "epoch": epoch,
            "train_l1": epoch_l1, "train_l2": epoch_l2,
            "train_total": epoch_l1 + cfg.lam * epoch_l2,
            "val_total": monitored.total,
            "val_l1": monitored.l1, "val_l2": monitored.l2,
        })
        if monitored.total < best_loss:
            best_loss = monitored.total
            best = model.snapshot()
            strikes = 0
        else:
            strikes += 1
            if strikes >= cfg.patience:
                break
    model.restore(best)
    for p in frozen:
        p.const = False
    log.wall_clock_s += time.perf_counter() - started
    return model


def train_phase1(model: OmtlModel, data: Dataset, cfg: TrainConfig,
                 graph: OntologyGraph | None = None,
                 log: TrainLog | None = None) -> OmtlModel:
    """Learn experts, expert gates, and node blocks with routing disabled."""
    if model.spec.variant != "omtl":
        raise ValidationError("phase-1 training applies to the omtl variant")
    graph = graph or model.graph
    log = log if log is not None else TrainLog()
    model.hierarchy_enabled = False
    return train_loop(model, graph, data.records, cfg,
                      frozen_prefixes=("parent_gate.",),
                      scheme=None, phase="phase1", log=log, stage=0)


def train_phase2(model: OmtlModel, data: Dataset, cfg: TrainConfig,
                 graph: OntologyGraph | None = None,
                 log: TrainLog | None = None,
                 scheme: RewardScheme | None = None) -> OmtlModel:
    """Freeze experts and expert gates, admit the hierarchy, fine-tune."""
    if model.spec.variant != "omtl":
        raise ValidationError("phase-2 training applies to the omtl variant")
    graph = graph or model.graph
    log = log if log is not None else TrainLog()
    reinit_parent_gates(model, cfg.seed)
    model.hierarchy_enabled = True
    return train_loop(model, graph, data.records, cfg,
                      frozen_prefixes=FROZEN_IN_PHASE2,
                      scheme=scheme, phase="phase2", log=log, stage=1)


def train_baseline(variant: str, data: Dataset, cfg: TrainConfig,
                   graph: OntologyGraph,
                   log: TrainLog | None = None) -> OmtlModel:
    """Single-phase masked-loss training for sb, moe, or mmoe."""
    if variant == "omtl":
        raise ValidationError("omtl trains in two phases; use train_variant")
    cfg = _with_variant(cfg, variant)
    log = log if log is not None else TrainLog()
    model = build_model(cfg.model_spec(data.feature_dim), graph, seed=cfg.seed)
    return train_loop(model, graph, data.records, cfg,
                      frozen_prefixes=(), scheme=None, phase="single",
                      log=log, stage=0)


def _with_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    if cfg.variant == variant:
        return cfg
    clone = TrainConfig(**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__})
    clone.variant = variant
    return clone


def _shaping_scheme(cfg: TrainConfig, graph: OntologyGraph) -> RewardScheme | None:
    if cfg.reward_f is None:
        return None
    outcomes = graph.outcome_names()
    if len(outcomes) != 1:
        raise ValidationError(
            "reward shaping needs a single shared outcome; graph declares "
            f"{list(outcomes)}")
    return make_reward_scheme(graph, cfg.reward_f, outcomes[0])


def train_variant(graph: OntologyGraph, data: Dataset,
                  cfg: TrainConfig) -> tuple[OmtlModel, TrainLog]:
    """Train cfg.variant end to end (two phases for omtl)."""
    cfg.validate()
    log = TrainLog()
    if cfg.variant != "omtl":
        model = train_baseline(cfg.variant, data, cfg, graph, log=log)
        log.final_param_hash = _param_hash(model)
        return model, log
    scheme = _shaping_scheme(cfg, graph)
    shared = scheme.outcome if scheme else None
    model = build_model(cfg.model_spec(data.feature_dim), graph,
                        seed=cfg.seed, shared_outcome=shared)
    train_phase1(model, data, cfg, graph, log=log)
    if cfg.hierarchy_finetune:
        train_phase2(model, data, cfg, graph, log=log, scheme=scheme)
    log.final_param_hash = _param_hash(model)
    return model, log


def _param_hash(model: OmtlModel) -> str:
    import hashlib
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].values.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# cross-validated experiments


@dataclass
class CvResult:
    variant: str
    plan: FoldPlan
    fold_reports: list[EvalReport]
    pooled: dict[tuple[str, str], ScoredSet]
    pooled_report: EvalReport
    logs: list[TrainLog]

    def to_json_obj(self) -> dict:
        agg: dict[str, dict] = {}
        for key in sorted(self.pooled):
            per_fold = [r.per_target[key].auc for r in self.fold_reports
                        if key in r.per_target]
            aps_fold = [r.per_target[key].aps for r in self.fold_reports
                        if key in r.per_target]
            agg["|".join(key)] = {
                "auc_mean": float(np.mean(per_fold)) if per_fold else None,
                "auc_per_fold": per_fold,
                "aps_mean": float(np.mean(aps_fold)) if aps_fold else None,
            }
        return {
            "variant": self.variant,
            "k": self.plan.k,
            "aggregate": agg,
            "pooled": self.pooled_report.to_json_obj(),
            "folds": [r.to_json_obj() for r in self.fold_reports],
        }


def score_holdout(model: OmtlModel, graph: OntologyGraph,
                  records: list[Record]) -> dict[tuple[str, str], list[tuple[str, int, float]]]:
    """Eval-mode predictions for every labeled (core node, outcome) pair the
    held-out records express; returns (record id, label, score) triples."""
    collected: dict[tuple[str, str], list[tuple[str, int, float]]] = {}
    for group in group_records(records):
        result = forward_group(model, graph, group, "eval", None)
        preds = result.predictions()
        for (nid, o), p in preds.items():
            if not graph.nodes[nid].core or o not in graph.nodes[nid].outcomes:
                continue
            for i, rec in enumerate(group):
                if o in rec.labels:
                    collected.setdefault((nid, o), []).append(
                        (rec.id, rec.labels[o], float(p[i])))
    return collected


def _scored_set(key: tuple[str, str],
                triples: list[tuple[str, int, float]]) -> ScoredSet:
    triples = sorted(triples)  # record-id order aligns sets across models
    return ScoredSet(
        scores=np.array([t[2] for t in triples]),
        labels=np.array([t[1] for t in triples]),
        node=key[0], outcome=key[1], ids=tuple(t[0] for t in triples))


def run_cv(graph: OntologyGraph, data: Dataset, cfg: TrainConfig, k: int = 5,
           plan: FoldPlan | None = None, jobs: int = 1) -> CvResult:
    """Train and score cfg.variant across k folds of one shared plan."""
    cfg.validate()
    if plan is None:
        plan = make_folds(data, graph, k=k, seed=cfg.seed)
    elif plan.k != k:
        raise ValidationError(f"fold plan has k={plan.k}, requested k={k}")
    missing = [r.id for r in data.records if r.id not in plan.assignment]
    if missing:
        raise ValidationError(
            f"fold plan does not cover {len(missing)} records "
            f"(first: {missing[0]!r})")

    def one_fold(fold: int):
        train_recs = [r for r in data.records if plan.fold_of(r.id) != fold]
        test_recs = [r for r in data.records if plan.fold_of(r.id) == fold]
        fold_data = Dataset(records=train_recs, feature_dim=data.feature_dim,
                            outcomes=data.outcomes)
        model, log = train_variant(graph, fold_data, cfg)
        leaked = log.train_record_ids & {r.id for r in test_recs}
        if leaked:
            raise NumericalError(f"fold {fold}: test records leaked into "
                                 f"training: {sorted(leaked)[:3]}")
        return score_holdout(model, graph, test_recs), log

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(one_fold, range(k)))
    else:
        outcomes = [one_fold(fold) for fold in range(k)]

    fold_reports: list[EvalReport] = []
    logs: list[TrainLog] = []
    pooled_triples: dict[tuple[str, str], list[tuple[str, int, float]]] = {}
    for fold, (collected, log) in enumerate(outcomes):
        logs.append(log)
        per_target = {}
        for key, triples in sorted(collected.items()):
            pooled_triples.setdefault(key, []).extend(triples)
            s = _scored_set(key, triples)
            if 0 < s.n_pos < s.n:
                per_target[key] = score_metrics(s, with_roc=False)
        fold_reports.append(EvalReport(per_target=per_target,
                                       metadata={"fold": fold}))
    pooled = {key: _scored_set(key, triples)
              for key, triples in sorted(pooled_triples.items())}
    pooled_report = EvalReport(
        per_target={key: score_metrics(s) for key, s in pooled.items()},
        metadata={"delong_pooling": "out_of_fold_pooled", "k": k,
                  "variant": cfg.variant, "seed": cfg.seed})
    return CvResult(variant=cfg.variant, plan=plan, fold_reports=fold_reports,
                    pooled=pooled, pooled_report=pooled_report, logs=logs)


def compare_variants(graph: OntologyGraph, data: Dataset, cfg: TrainConfig,
                     variants: list[str], k: int = 5,
                     jobs: int = 1) -> tuple[dict[str, CvResult], list[dict]]:
    """Run several variants on exactly the same folds and DeLong-test every
    pair on the pooled out-of-fold scores."""
    plan = make_folds(data, graph, k=k, seed=cfg.seed)
    results = {v: run_cv(graph, data, _with_variant(cfg, v), k=k, plan=plan,
                         jobs=jobs)
               for v in variants}
    comparisons: list[dict] = []
    for i, va in enumerate(variants):
        for vb in variants[i + 1:]:
            shared = sorted(set(results[va].pooled) & set(results[vb].pooled))
            for key in shared:
                comparisons.append(compare_scored_sets(
                    results[va].pooled[key], results[vb].pooled[key], va, vb))
    return results, comparisons
