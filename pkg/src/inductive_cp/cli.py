"""Command line entry point: ``run``, ``gen`` and ``laws`` subcommands."""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from . import graph_seq as gs
from .cp_core import (CoverageLawParams, DegenerateLaw, beta_coverage_params,
                      nodeex_coverage_law, transductive_coverage_law)
from .experiment import ExperimentConfig, run_experiment
from .ingest import load_graph, save_graph

__all__ = ["ExperimentConfig", "load_graph", "main", "run_experiment", "save_graph"]


def law_rows(n: int, m: int, alpha: float, step: float = 0.01) -> list[dict]:
    """CDF values on a grid for the Beta law (n calibration points, one test
    point) and the hypergeometric laws for m test points."""
    from scipy.stats import beta as beta_dist

    try:
        a, b = beta_coverage_params(n, alpha)
        beta_cdf = beta_dist(a, b).cdf
    except DegenerateLaw:
        beta_cdf = None
    params = CoverageLawParams(n, m, alpha)
    rows = []
    for t in np.round(np.arange(0.0, 1.0 + step / 2, step), 10):
        rows.append({
            "t": f"{t:.4f}",
            "beta_cdf": f"{beta_cdf(t):.10f}" if beta_cdf else ("1" if t >= 1 else "0"),
            "transductive_cdf": f"{transductive_coverage_law(params, t):.10f}",
            "nodeex_cdf": f"{nodeex_coverage_law(n, m, alpha, t):.10f}",
        })
    return rows


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    return run_experiment(cfg, workers=args.workers, out=args.out)


def _cmd_gen(args) -> int:
    rng = np.random.default_rng(args.seed)
    g = gs.sbm_homophilous(args.n, args.k, args.p_in, args.p_out, args.feat_dim,
                           args.feat_separation, rng)
    paths = save_graph(g, args.out)
    print(f"wrote {g.num_nodes} nodes, {len(g.edges)} edges to {paths['edges'].parent}")
    return 0


def _cmd_laws(args) -> int:
    rows = law_rows(args.n, args.m, args.alpha, args.step)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inductive-cp",
                                description="Conformal prediction on growing graphs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a YAML/JSON config")
    r.add_argument("config")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", default=None, help="output directory (overrides config)")
    r.set_defaults(func=_cmd_run)

    g = sub.add_parser("gen", help="write a synthetic SBM graph to files")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1500)
    g.add_argument("--k", type=int, default=4)
    g.add_argument("--p-in", type=float, default=0.05)
    g.add_argument("--p-out", type=float, default=0.005)
    g.add_argument("--feat-dim", type=int, default=16)
    g.add_argument("--feat-separation", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen)

    law = sub.add_parser("laws", help="print coverage-law CDFs as CSV")
    law.add_argument("--n", type=int, required=True, help="calibration size")
    law.add_argument("--m", type=int, required=True, help="number of evaluated nodes")
    law.add_argument("--alpha", type=float, default=0.1)
    law.add_argument("--step", type=float, default=0.01)
    law.set_defaults(func=_cmd_laws)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
