"""Experiment configuration and multi-seed orchestration."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import engines as en
from . import evaluation as ev
from . import graph_seq as gs
from .ingest import ExternalProbs, load_graph
from .model import train

log = logging.getLogger(__name__)

DATA_KINDS = ("sbm", "files", "external")


@dataclass(frozen=True)
class DataSource:
    """Where the base graph (and optionally the probabilities) come from.

    ``sbm`` draws a homophilous SBM once from ``graph_seed``; ``files`` reads
    edges/features/labels; ``external`` reads the graph like ``files`` and
    takes per-timestep probabilities and the schedule from ``scores_dir``.
    """

    kind: str = "sbm"
    n: int = 1500
    k_classes: int = 4
    p_in: float = 0.05
    p_out: float = 0.005
    feat_dim: int = 16
    feat_separation: float = 1.0
    graph_seed: int = 0
    edges: str | None = None
    features: str | None = None
    labels: str | None = None
    scores_dir: str | None = None

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ValueError(f"data.kind must be one of {DATA_KINDS}")
        if self.kind in ("files", "external") and not (self.edges and self.labels):
            raise ValueError("file data sources need 'edges' and 'labels' paths")
        if self.kind == "external" and not self.scores_dir:
            raise ValueError("external data source needs 'scores_dir'")


@dataclass(frozen=True)
class ModelParams:
    hops: int = 2
    lr: float = 0.1
    epochs: int = 300
    l2: float = 5e-4


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "upon_arrival"
    t: int | None = None

    def build(self, seed: int) -> en.EvalPolicy:
        if self.kind == "upon_arrival":
            return en.EvalPolicy.upon_arrival()
        if self.kind == "fixed_time":
            return en.EvalPolicy.fixed_time(self.t)
        if self.kind == "random_time":
            return en.EvalPolicy.random_time(seed)
        raise ValueError(f"unknown policy {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSource = field(default_factory=DataSource)
    sequence: str = gs.NODE
    engines: tuple = (en.NAIVE, en.NODEEX)
    score: str = "aps"
    alpha: float = 0.1
    seeds: tuple = (0,)
    policy: PolicySpec = field(default_factory=PolicySpec)
    model: ModelParams = field(default_factory=ModelParams)
    train_per_class: int = 20
    n_cal: int = 80
    naps_k: int = 1
    vote_K: int = 10
    vote_subgraph_fraction: float = 0.5
    daps_lambda: float = 0.5
    out: str = "results"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.n_cal < 1:
            raise ValueError("calibration size must be >= 1")
        if self.sequence not in (gs.NODE, gs.EDGE):
            raise ValueError(f"sequence must be {gs.NODE!r} or {gs.EDGE!r}")
        for e in self.engines:
            if e not in en.ENGINES:
                raise ValueError(f"unknown engine {e!r}")
        if en.EDGEEX in self.engines and self.sequence != gs.EDGE:
            # calibration nodes may be isolated in node sequences
            raise ValueError("edgeex needs an edge sequence")
        if self.policy.kind == "fixed_time" and self.policy.t is None:
            raise ValueError("fixed_time policy needs 't'")
        self.engine_config(0)  # validates engine parameters

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        nested = {"data": DataSource, "policy": PolicySpec, "model": ModelParams}
        for key, typ in nested.items():
            if key in d:
                sub = d[key] or {}
                bad = set(sub) - {f.name for f in dataclasses.fields(typ)}
                if bad:
                    raise ValueError(f"unknown {key} keys: {sorted(bad)}")
                d[key] = typ(**sub)
        for key in ("engines", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            doc = yaml.safe_load(fh)  # JSON is a YAML subset
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["engines"] = list(self.engines)
        d["seeds"] = list(self.seeds)
        return d

    def engine_config(self, seed: int) -> en.EngineConfig:
        return en.EngineConfig(
            engine=self.engines[0] if self.engines else en.NODEEX, alpha=self.alpha,
            score_kind=self.score, daps_lambda=self.daps_lambda, naps_k=self.naps_k,
            vote_K=self.vote_K, vote_subgraph_fraction=self.vote_subgraph_fraction, seed=seed)


def load_base_graph(src: DataSource) -> gs.Graph:
    if src.kind == "sbm":
        rng = np.random.default_rng(src.graph_seed)
        return gs.sbm_homophilous(src.n, src.k_classes, src.p_in, src.p_out, src.feat_dim,
                                  src.feat_separation, rng)
    g, report = load_graph(src.edges, src.features, src.labels)
    if report.self_loops or report.duplicates:
        log.info("graph load dropped %d self-loops, %d duplicates",
                 report.self_loops, report.duplicates)
    return g


@dataclass
class SeedResult:
    seed: int
    records: list = field(default_factory=list)
    aggregates: list = field(default_factory=list)
    error: str | None = None


def prepare_seed(cfg: ExperimentConfig, seed: int, base: gs.Graph):
    """Schedule and trained model (or external provider) for one seed."""
    if cfg.data.kind == "external":
        model = ExternalProbs(cfg.data.scores_dir, base)
        return model.schedule, model
    rng = np.random.default_rng(seed)
    pinned = gs.stratified_nodes(base.labels, cfg.train_per_class, rng)
    if cfg.sequence == gs.NODE:
        schedule = gs.node_sequence(base, rng, cfg.n_cal, pinned)
    else:
        schedule = gs.edge_sequence(base, rng, cfg.n_cal, pinned)
    g0 = gs.view_at(schedule, base, schedule.t_train)
    mp = cfg.model
    model = train(g0, pinned, hops=mp.hops, lr=mp.lr, epochs=mp.epochs, l2=mp.l2,
                  num_classes=base.num_classes)
    return schedule, model


def run_seed(cfg: ExperimentConfig, seed: int, base: gs.Graph | None = None) -> SeedResult:
    """One full sequence: schedule, training on G_0, all engines, metrics."""
    try:
        base = base if base is not None else load_base_graph(cfg.data)
        schedule, model = prepare_seed(cfg, seed, base)
        stats: list = []
        records = en.evaluate_sequence(base, schedule, model, cfg.engine_config(seed),
                                       cfg.policy.build(seed), cfg.engines, step_stats=stats)
        aggs = ev.cumulative_aggregates(records, stats, seed)
        return SeedResult(seed, records, aggs)
    except Exception as exc:  # a failed seed must not sink the others
        log.error("seed %d failed: %s: %s", seed, type(exc).__name__, exc)
        return SeedResult(seed, error=f"{type(exc).__name__}: {exc}")


def _run_seed_job(args):
    cfg, seed = args
    return run_seed(cfg, seed)


def _finite(x):
    return None if isinstance(x, float) and math.isnan(x) else x


def _summarize(cfg: ExperimentConfig, results: list[SeedResult]) -> dict:
    ok = [r for r in results if r.error is None]
    out = {}
    for eng in cfg.engines:
        per_seed = []
        for r in ok:
            recs = [x for x in r.records if x.engine == eng]
            app = [x for x in recs if x.applicable]
            if not recs:
                continue
            row = {"inapplicable": ev.inapplicable_fraction(recs)}
            if app:
                row.update(coverage=ev.empirical_coverage(app), size=ev.avg_set_size(app),
                           hit=ev.singleton_hit_ratio(app))
            per_seed.append(row)
        covs = [p["coverage"] for p in per_seed if "coverage" in p]

        def mean(key):
            vals = [p[key] for p in per_seed if key in p]
            return float(np.mean(vals)) if vals else math.nan

        summary = {
            "n_seeds": len(per_seed),
            "coverage_mean": float(np.mean(covs)) if covs else math.nan,
            "coverage_std": float(np.std(covs, ddof=1)) if len(covs) > 1 else 0.0,
            "deviation_pct": float(np.mean([100 * abs(c - (1 - cfg.alpha)) for c in covs]))
            if covs else math.nan,
            "avg_size": mean("size"),
            "singleton_hit": mean("hit"),
        }
        if eng == en.NAPS:
            summary["inapplicable_fraction"] = mean("inapplicable")
        out[eng] = {k: _finite(v) for k, v in summary.items()}
    return out


def run_experiment(cfg: ExperimentConfig, workers: int = 1, out: str | None = None) -> int:
    """Run every seed, write records.csv, aggregates.csv and summary.json.

    Returns 0 if at least one seed succeeded, 1 otherwise. Outputs do not
    depend on ``workers``.
    """
    out_dir = Path(out or cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(cfg.seeds)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed_job, [(cfg, s) for s in seeds]))
    else:
        base = None
        try:
            base = load_base_graph(cfg.data)
        except Exception as exc:
            log.error("cannot load data: %s", exc)
        results = [run_seed(cfg, s, base) if base is not None
                   else SeedResult(s, error="data load failed") for s in seeds]

    ev.write_csv(out_dir / "records.csv",
                 (rec.as_row() for r in results for rec in r.records), ev.RECORD_COLUMNS)
    ev.write_csv(out_dir / "aggregates.csv",
                 (row for r in results for row in r.aggregates), ev.AGGREGATE_COLUMNS)
    summary = {
        "config": cfg.to_dict(),
        "engines": _summarize(cfg, results),
        "failed_seeds": {str(r.seed): r.error for r in results if r.error is not None},
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    n_ok = sum(r.error is None for r in results)
    log.info("%d/%d seeds succeeded; outputs in %s", n_ok, len(results), out_dir)
    return 0 if n_ok else 1
